"""Regenerate configs/full.json and configs/reduced.json from the dataclass defaults."""

import json
from pathlib import Path

from dvsl.config import config_to_json, full_scenario, reduced_scenario

ROOT = Path(__file__).resolve().parents[1] / "configs"


def main() -> None:
    ROOT.mkdir(exist_ok=True)
    for name, cfg in (("full", full_scenario()), ("reduced", reduced_scenario())):
        path = ROOT / f"{name}.json"
        path.write_text(json.dumps(config_to_json(cfg), indent=2) + "\n")
        print(f"{path}  digest {cfg.digest()}")


if __name__ == "__main__":
    main()
