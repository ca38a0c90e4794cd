"""Mean reward of fixed DSA limit patterns on the reduced scenario.

Used to check that the scenario leaves room for VSL to matter: if every
pattern scores the same, there is nothing for a policy to learn.
"""

import argparse

import numpy as np

from dvsl.config import reduced_scenario
from dvsl.mdp import DvslEnv

PATTERNS = {
    "all 100": np.ones(5),
    "all 70": np.full(5, 0.5),
    "all 40": np.zeros(5),
    "right 40": np.array([1.0, 1.0, 1.0, 0.0, 0.0]),
    "left 40": np.array([0.0, 0.0, 0.0, 1.0, 1.0]),
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--scale", type=float, default=None, help="override the demand scale")
    args = ap.parse_args()
    cfg = reduced_scenario()
    if args.scale is not None:
        cfg.demand.scale = args.scale
    env = DvslEnv(cfg, mode="raw")
    for name, u in PATTERNS.items():
        means = []
        for seed in range(1, args.seeds + 1):
            env.reset(seed)
            rs, done = [], False
            while not done:
                _, r, done, _ = env.env_step(u)
                rs.append(r)
            means.append(np.mean(rs))
        print(f"{name:9s} {np.mean(means):.4f}  {np.round(means, 3)}")


if __name__ == "__main__":
    main()
