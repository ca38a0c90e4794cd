"""Desk-scale experiment: train graph and raw encoders on the reduced scenario,
then compare both policies with NoVsl and RuleBased over eight seeds.

    python3 scripts/train_reduced.py --out runs/reduced
"""

import argparse
from pathlib import Path

import numpy as np

from dvsl.config import load_config
from dvsl.harness import format_table, run_compare
from dvsl.mdp import DvslEnv
from dvsl.ppo import train

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "reduced.json"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(CONFIG))
    ap.add_argument("--out", default="runs/reduced")
    ap.add_argument("--seeds", type=int, default=8, help="evaluation seeds 1..N")
    args = ap.parse_args()

    out = Path(args.out)
    ckpts = {}
    for mode, tag in (("graph", "graph-policy"), ("raw", "raw-policy")):
        cfg = load_config(args.config)
        cfg.encoder.mode = mode
        res = train(lambda: DvslEnv(cfg, reward_csv=out / mode / "rewards.csv"), cfg.trainer, out / mode, cfg.digest())
        r = [row["mean_reward"] for row in res.log]
        print(f"{tag}: first5 {np.mean(r[:5]):.4f}  last5 {np.mean(r[-5:]):.4f}")
        ckpts[tag] = res.checkpoint

    cfg = load_config(args.config)
    _, means, path = run_compare(["NoVsl", "RuleBased"], list(range(1, args.seeds + 1)), cfg, out / "eval", ckpts,
                                 keep_logs=False)
    print(format_table(means))
    print(f"comparison: {path}")


if __name__ == "__main__":
    main()
