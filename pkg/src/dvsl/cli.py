"""Command line: train, eval, compare, inspect-adjacency.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import load_config
from .control import ControllerKind
from .harness import (
    RunManifest, default_out_dir, format_table, now_iso, parse_seeds, revision, run_compare, run_eval,
)
from .mdp import DvslEnv
from .net import build_adjacency, build_network


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, seeds: bool = True) -> None:
    p.add_argument("--config", required=True, help="scenario JSON")
    p.add_argument("--out", default=None, help="output directory (default: $DVSL_OUT or ./runs)")
    p.add_argument("--encoder", choices=("raw", "graph"), default=None, help="state encoder mode")
    if seeds:
        p.add_argument("--seeds", default="1..8", help="e.g. 1..8 or 1,2,3")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dvsl", description="Lane-level differential VSL laboratory")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a policy with adaptive-KL PPO")
    _common(p, seeds=False)
    p.add_argument("--seed", type=int, default=None, help="trainer seed")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate one controller over several seeds")
    _common(p)
    p.add_argument("--controller", choices=[k.value for k in ControllerKind], default=None,
                   help="default: Policy when --checkpoint is given, else NoVsl")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--no-logs", action="store_true", help="skip writing per-seed event logs")

    p = sub.add_parser("compare", help="evaluate several controllers and tabulate deltas vs NoVsl")
    _common(p)
    p.add_argument("--controllers", default="NoVsl,RuleBased", help="comma list of NoVsl,RuleBased,Policy")
    p.add_argument("--checkpoint", action="append", default=[],
                   help="policy checkpoint, optionally TAG=PATH; repeatable")
    p.add_argument("--no-logs", action="store_true")

    p = sub.add_parser("inspect-adjacency", help="dump the lane adjacency matrix as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="write adjacency.csv here instead of stdout")
    return parser


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else default_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "encoder", None):
        cfg.encoder.mode = args.encoder
    return cfg


def cmd_train(args) -> int:
    from .ppo import train

    cfg = _load(args)
    if args.seed is not None:
        cfg.trainer.seed = args.seed
    if args.iterations is not None:
        if args.iterations < 1:
            raise UsageError("--iterations must be positive")
        cfg.trainer.iterations = args.iterations
    out = _out_dir(args)
    manifest = RunManifest(cfg.digest(), revision(), [cfg.trainer.seed], now_iso())
    rewards = out / "rewards.csv"
    rewards.unlink(missing_ok=True)

    def report(row):
        if not args.quiet:
            print(f"iter {row['iteration']:4d}  reward {row['mean_reward']:.4f}  kl {row['mean_kl']:.5f}  "
                  f"lambda {row['lambda']:.4g}", flush=True)

    res = train(lambda: DvslEnv(cfg, reward_csv=rewards), cfg.trainer, out, cfg.digest(), report)
    manifest.files = [str(p) for p in (out / "train_log.csv", res.checkpoint, res.checkpoint.with_suffix(".bin"), rewards)]
    manifest.finished = now_iso()
    manifest.files.append(str(manifest.write(out / "manifest.json")))
    print(f"checkpoint: {res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    seeds = parse_seeds(args.seeds)
    kind = ControllerKind(args.controller) if args.controller else (
        ControllerKind.POLICY if args.checkpoint else ControllerKind.NO_VSL)
    if kind is ControllerKind.POLICY and args.checkpoint is None:
        raise UsageError("the Policy controller needs --checkpoint")
    out = _out_dir(args)
    manifest = RunManifest(cfg.digest(), revision(), seeds, now_iso())
    if kind is ControllerKind.POLICY and args.encoder:
        _check_encoder(args.checkpoint, args.encoder)
    res = run_eval(kind, seeds, cfg, out, checkpoint=args.checkpoint, keep_logs=not args.no_logs)
    manifest.files = [str(p) for p in res.files]
    manifest.finished = now_iso()
    manifest.files.append(str(manifest.write(out / f"manifest_{kind.value}.json")))
    m = res.mean
    print(f"{kind.value}: TST {m.TST:.1f}  AWT {m.AWT:.2f} s  BT {m.BT:.1f} veh/h  NPC {m.NPC:.1f}")
    print(f"summary: {res.summary_csv}")
    return 0


def _check_encoder(checkpoint, mode: str) -> None:
    import json

    header = json.loads(Path(checkpoint).read_text())
    if header.get("mode") != mode:
        raise ValueError(f"checkpoint was trained with the {header.get('mode')} encoder, not {mode}")


def cmd_compare(args) -> int:
    cfg = _load(args)
    seeds = parse_seeds(args.seeds)
    kinds = [ControllerKind(k.strip()) for k in args.controllers.split(",") if k.strip()]
    ckpts = {}
    for k, spec in enumerate(args.checkpoint):
        tag, _, path = spec.rpartition("=")
        ckpts[tag or ("Policy" if len(args.checkpoint) == 1 else f"Policy{k}")] = path
    if ControllerKind.POLICY in kinds and not ckpts:
        raise UsageError("comparing a Policy controller needs --checkpoint")
    out = _out_dir(args)
    manifest = RunManifest(cfg.digest(), revision(), seeds, now_iso())
    results, means, path = run_compare(kinds, seeds, cfg, out, ckpts, keep_logs=not args.no_logs)
    manifest.files = [str(p) for r in results.values() for p in r.files] + [str(path)]
    manifest.finished = now_iso()
    manifest.files.append(str(manifest.write(out / "manifest_compare.json")))
    print(format_table(means))
    print(f"comparison: {path}")
    return 0


def cmd_inspect(args) -> int:
    cfg = load_config(args.config)
    net = build_network(cfg)
    E = build_adjacency(net).entries
    ids = [ln.id for ln in net.state_lanes]
    rows = [["lane", *ids]] + [[ids[i], *map(str, E[i].tolist())] for i in range(len(ids))]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "adjacency.csv").open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        print(f"adjacency: {out / 'adjacency.csv'}")
    else:
        csv.writer(sys.stdout, lineterminator="\n").writerows(rows)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "compare": cmd_compare, "inspect-adjacency": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"dvsl: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
