"""Evaluation harness: episode runs, log files, metrics and comparison tables."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import os
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ScenarioConfig
from .control import Controller, ControllerKind, make_controller
from .net import AreaKind, build_network
from .sim import Simulator

METRICS = ("TST", "AWT", "BT", "NPC")


@dataclass
class MetricsRecord:
    seed: int | str
    controller: str
    TST: float
    AWT: float
    BT: float
    NPC: float


@dataclass
class RunManifest:
    config_hash: str
    revision: str
    seeds: list[int]
    started: str
    finished: str = ""
    files: list[str] = field(default_factory=list)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def default_out_dir() -> Path:
    return Path(os.environ.get("DVSL_OUT", "runs"))


def revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def now_iso() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------- logs
def write_event_log(events, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for ev in events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    return path


def read_event_log(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


DETECTOR_HEADER = ("t", "lane_id", "count", "occupancy", "mean_speed")


def write_detector_csv(rows, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTOR_HEADER)
        for t, lane, cnt, occ, spd in rows:
            w.writerow([repr(float(t)), lane, int(cnt), repr(float(occ)), repr(float(spd))])
    return path


def read_detector_csv(path: str | Path) -> list[tuple]:
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [(float(t), lane, int(c), float(o), float(s)) for t, lane, c, o, s in r]


# ---------------------------------------------------------------- metrics
def compute_metrics(events, detector_rows, window: tuple[float, float] = (3000.0, 5400.0), dt: float = 1.0,
                    seed: int | str = 0, controller: str = "") -> MetricsRecord:
    """TST, AWT, BT and NPC over observations at times t with t0 < t <= t1.

    Standing is read from halt/resume/arrive events: a vehicle halted at t_h
    is counted at every step until the step before it resumes or leaves.
    """
    t0, t1 = map(float, window)
    eps = 1e-9
    if t1 <= t0:
        raise ValueError("metric window must have t1 > t0")
    t_max = max((ev["t"] for ev in events), default=None)
    if t_max is None or t0 < -eps or t1 > t_max + eps:
        raise ValueError(f"window [{t0}, {t1}] is outside the logged range [0, {t_max}]")

    def n_obs(a: float, b: float) -> int:
        # observation times k*dt with a <= t < b, clipped to the window
        lo, hi = max(a, t0 + dt), min(b, t1 + dt)
        return max(0, int(round((hi - lo) / dt))) if hi > lo + eps else 0

    spawn: dict[int, float] = {}
    gone: dict[int, float] = {}
    halt_at: dict[int, float] = {}
    stood: dict[int, int] = {}
    npc = 0
    for ev in events:
        kind, t = ev["event"], float(ev["t"])
        if kind == "sample":
            if t0 + eps < t <= t1 + eps:
                npc += int(ev["npc"])
            continue
        vid = ev["id"]
        if kind == "spawn":
            spawn[vid] = t
        elif kind == "halt":
            halt_at[vid] = t
        elif kind in ("resume", "arrive"):
            if vid in halt_at:
                stood[vid] = stood.get(vid, 0) + n_obs(halt_at.pop(vid), t)
            if kind == "arrive":
                gone[vid] = t
    for vid, th in halt_at.items():
        stood[vid] = stood.get(vid, 0) + n_obs(th, t_max + dt)

    present = [v for v, s in spawn.items() if n_obs(s, gone.get(v, t_max + dt)) > 0]
    tst = sum(stood.values())
    awt = float(sum(stood.get(v, 0) for v in present) * dt / len(present)) if present else 0.0

    crossings = sum(c for t, lane, c, _, _ in detector_rows
                    if lane.startswith(AreaKind.MA.value + "_") and t0 + eps < t <= t1 + eps)
    bt = crossings * 3600.0 / (t1 - t0)
    return MetricsRecord(seed, controller, float(tst), awt, float(bt), float(npc))


# ---------------------------------------------------------------- episodes
def run_episode(controller: Controller, cfg: ScenarioConfig, seed: int, network=None) -> Simulator:
    """Warm up under No-VSL, then let the controller act every control horizon."""
    net = network or build_network(cfg)
    sim = Simulator(net, cfg, seed=seed, record_events=True)
    ep = cfg.episode
    sim.run_until(ep.warmup_end_s)
    while sim.clock < ep.episode_end_s - 1e-9:
        sim.apply_speed_limits(controller.decide(sim.read_detectors(), net))
        sim.run_until(min(sim.clock + ep.control_horizon_s, ep.episode_end_s))
    return sim


def parse_seeds(text: str) -> list[int]:
    """'1..8' or '1,2,5' (or a mix, e.g. '1..3,7')."""
    seeds: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            a, b = part.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def _fmt(x) -> str:
    return format(float(x), ".6f")


def mean_record(records: list[MetricsRecord], controller: str) -> MetricsRecord:
    return MetricsRecord("mean", controller, *(float(np.mean([getattr(r, m) for r in records])) for m in METRICS))


def write_summary_csv(records: list[MetricsRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["controller", "seed", *METRICS])
        for r in records:
            w.writerow([r.controller, r.seed, *(_fmt(getattr(r, m)) for m in METRICS)])
    return path


@dataclass
class EvalResult:
    records: list[MetricsRecord]
    mean: MetricsRecord
    summary_csv: Path | None
    files: list[Path]


def run_eval(kind: ControllerKind | str, seeds, cfg: ScenarioConfig, out_dir: str | Path | None = None,
             checkpoint: str | Path | None = None, keep_logs: bool = True, tag: str | None = None) -> EvalResult:
    kind = ControllerKind(kind)
    if kind is ControllerKind.POLICY:
        if checkpoint is None:
            raise ValueError("Policy evaluation needs --checkpoint")
        if not Path(checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    net = build_network(cfg)
    controller = make_controller(kind, cfg, net, checkpoint)
    name = tag or kind.value
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "logs").mkdir(parents=True, exist_ok=True)
    window = (cfg.episode.warmup_end_s, cfg.episode.episode_end_s)
    records, files = [], []
    for seed in seeds:
        sim = run_episode(controller, cfg, int(seed), net)
        if out is not None and keep_logs:
            ev_path = write_event_log(sim.events, out / "logs" / f"{name}_seed{seed}_events.jsonl")
            det_path = write_detector_csv(sim.detector_rows, out / "logs" / f"{name}_seed{seed}_detectors.csv")
            files += [ev_path, det_path]
            events, rows = read_event_log(ev_path), read_detector_csv(det_path)
        else:
            events, rows = sim.events, sim.detector_rows
        records.append(compute_metrics(events, rows, window, cfg.sim_step_s, int(seed), name))
    mean = mean_record(records, name)
    summary = None
    if out is not None:
        summary = write_summary_csv([*records, mean], out / f"summary_{name}.csv")
        files.append(summary)
    return EvalResult(records, mean, summary, files)


def delta_pct(value: float, base: float) -> float:
    if base == 0:
        return 0.0 if value == 0 else float("inf")
    return (value - base) / base * 100.0


def comparison_rows(means: list[MetricsRecord], baseline: str = ControllerKind.NO_VSL.value) -> list[list[str]]:
    base = next((m for m in means if m.controller == baseline), None)
    if base is None:
        raise ValueError(f"comparison needs a {baseline} row")
    rows = []
    for m in means:
        vals = [getattr(m, k) for k in METRICS]
        deltas = [delta_pct(getattr(m, k), getattr(base, k)) for k in METRICS]
        rows.append([m.controller, *map(_fmt, vals), *(format(d, ".2f") for d in deltas)])
    return rows


def write_comparison_csv(means: list[MetricsRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["controller", *METRICS, *(f"delta_{m}_pct" for m in METRICS)])
        w.writerows(comparison_rows(means))
    return path


def format_table(means: list[MetricsRecord]) -> str:
    head = ["controller", *METRICS, *(f"d{m}%" for m in METRICS)]
    rows = [head] + [[r[0], *(f"{float(x):.2f}" for x in r[1:])] for r in comparison_rows(means)]
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def run_compare(kinds, seeds, cfg: ScenarioConfig, out_dir: str | Path | None = None,
                checkpoints: dict[str, str | Path] | None = None, keep_logs: bool = True):
    """Evaluate several controllers on the same seeds; NoVsl is always included
    because it is the reference for the deltas. ``checkpoints`` maps a tag to
    a policy checkpoint, so several policies can be compared side by side."""
    kinds = [ControllerKind(k) for k in kinds if ControllerKind(k) is not ControllerKind.POLICY]
    if ControllerKind.NO_VSL not in kinds:
        kinds.insert(0, ControllerKind.NO_VSL)
    results = {}
    for k in kinds:
        results[k.value] = run_eval(k, seeds, cfg, out_dir, keep_logs=keep_logs)
    for tag, ckpt in (checkpoints or {}).items():
        results[tag] = run_eval(ControllerKind.POLICY, seeds, cfg, out_dir, checkpoint=ckpt, keep_logs=keep_logs, tag=tag)
    means = [r.mean for r in results.values()]
    path = write_comparison_csv(means, Path(out_dir) / "comparison.csv") if out_dir is not None else None
    return results, means, path
