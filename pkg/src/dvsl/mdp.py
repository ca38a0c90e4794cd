"""Environment contract: action decoding, reward terms and episode stepping."""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SafetyConfig, ScenarioConfig, VslBounds
from .graphstate import EncoderWeights, encode_features, node_features
from .net import build_adjacency, build_network
from .sim import Simulator


def decode_action(u, bounds: VslBounds) -> np.ndarray:
    """Map u in [0,1]^Nc onto [v_min, v_max] (m/s); out-of-range u is clamped."""
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    # written as a convex combination so u=1 lands on v_max exactly
    return (1.0 - u) * bounds.v_min + u * bounds.v_max


def speed_term(ma_lane_speeds, cfg: SafetyConfig) -> float:
    """Normalized MA speed: 0 if any lane is below v_c_min, else the affine
    map of the lane mean onto [0, 1]."""
    v = np.asarray(ma_lane_speeds, dtype=float)
    if v.size == 0:
        raise ValueError("speed_term needs at least one MA lane speed")
    v = v[~np.isnan(v)]
    if v.size == 0:
        return 1.0  # nobody in MA: nothing is slowed down
    if np.any(v < cfg.v_c_min):
        return 0.0
    return float(np.clip((v.mean() - cfg.v_c_min) / (cfg.v_max - cfg.v_c_min), 0.0, 1.0))


def safety_term(ttcs, n_active: int, cfg: SafetyConfig) -> tuple[int, float]:
    """(count of TTC below threshold, (M - count)/M) with M = 0 giving 1."""
    ttcs = np.asarray(ttcs, dtype=float)
    npc = int(np.count_nonzero(ttcs < cfg.ttc_threshold_s))
    if n_active <= 0:
        return npc, 1.0
    return npc, (n_active - npc) / n_active


@dataclass(frozen=True)
class RewardComponents:
    v_ma: float
    npc: float
    r: float


def horizon_reward(samples) -> RewardComponents:
    """Average (speed term, safety term) pairs over one control horizon."""
    arr = np.asarray(samples, dtype=float).reshape(-1, 2)
    if arr.shape[0] == 0:
        raise ValueError("horizon_reward needs at least one sample")
    v, n = arr.mean(axis=0)
    return RewardComponents(float(v), float(n), float((v + n) / 2.0))


def sim_reward_sample(sim: Simulator) -> tuple[float, float]:
    cfg = sim.cfg.safety
    return speed_term(sim.ma_lane_speeds(), cfg), safety_term(sim.closing_ttc(), sim.active_count, cfg)[1]


class EpisodeDone(RuntimeError):
    pass


class DvslEnv:
    """One simulator episode seen as an MDP with T_c-long steps.

    ``observe`` returns the node-feature matrix; the encoded vector comes from
    ``encode`` so a learned encoder can be differentiated by the trainer.
    """

    def __init__(self, cfg: ScenarioConfig, weights: EncoderWeights | None = None, mode: str | None = None,
                 record_events: bool = False, reward_csv: str | Path | None = None, cache_warmup: bool = True):
        self.cfg = cfg
        self.net = build_network(cfg)
        self.adjacency = build_adjacency(self.net)
        self.mode = mode or cfg.encoder.mode
        if weights is None and self.mode == "graph":
            weights = EncoderWeights.init(cfg.encoder.width, 2, cfg.encoder.seed, cfg.encoder.weights == "learned")
        self.weights = weights
        self.record_events = record_events
        self.reward_csv = Path(reward_csv) if reward_csv else None
        self.cache_warmup = cache_warmup
        self._warm: dict[int, Simulator] = {}
        self.sim: Simulator | None = None
        self.done = True
        self.history: list[tuple] = []

    @property
    def n_actions(self) -> int:
        return self.net.lane_count("DSA")

    @property
    def state_dim(self) -> int:
        n = self.net.n_nodes
        return 2 * n if self.mode == "raw" else n * self.weights.width

    def observe(self) -> np.ndarray:
        return node_features(self.sim.read_detectors(), self.net)

    def encode(self, V: np.ndarray) -> np.ndarray:
        return encode_features(V, self.adjacency, self.weights, self.mode)

    def reset(self, seed: int = 0) -> np.ndarray:
        """Fresh episode: warm up under No-VSL, return the state at warmup end."""
        seed = int(seed)
        if self.cache_warmup and not self.record_events and seed in self._warm:
            self.sim = copy.deepcopy(self._warm[seed])
        else:
            sim = Simulator(self.net, self.cfg, seed=seed, record_events=self.record_events)
            sim.run_until(self.cfg.episode.warmup_end_s)
            if self.cache_warmup and not self.record_events:
                self._warm[seed] = copy.deepcopy(sim)
            self.sim = sim
        self.done = False
        self.history = []
        return self.encode(self.observe())

    def step_limits(self, limits) -> tuple[np.ndarray, float, bool, dict]:
        """Hold the given DSA limits (m/s) for one control horizon."""
        if self.done or self.sim is None:
            raise EpisodeDone("episode is finished; call reset()")
        sim, ep = self.sim, self.cfg.episode
        sim.apply_speed_limits(limits)
        t_end = min(sim.clock + ep.control_horizon_s, ep.episode_end_s)
        samples = []
        while sim.clock < t_end - 1e-9:
            n_before = len(sim.samples)
            sim.step()
            if len(sim.samples) > n_before:
                samples.append(sim_reward_sample(sim))
        if not samples:
            samples.append(sim_reward_sample(sim))
        rc = horizon_reward(samples)
        self.done = sim.clock >= ep.episode_end_s - 1e-9
        u = (np.asarray(limits) - self.cfg.vsl.v_min) / (self.cfg.vsl.v_max - self.cfg.vsl.v_min)
        self.history.append((sim.clock, rc.v_ma, rc.npc, rc.r, *u))
        if self.done and self.reward_csv is not None:
            self.write_reward_csv(self.reward_csv)
        V = self.observe()
        return self.encode(V), rc.r, self.done, {"components": rc, "features": V, "t": sim.clock}

    def env_step(self, u) -> tuple[np.ndarray, float, bool, dict]:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_actions,):
            raise ValueError(f"expected action of length {self.n_actions}, got shape {u.shape}")
        return self.step_limits(decode_action(u, self.cfg.vsl))

    step = env_step

    def write_reward_csv(self, path: str | Path) -> None:
        """Append this episode's per-step rewards; the header goes in once."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not path.exists() or path.stat().st_size == 0
        with path.open("a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if fresh:
                w.writerow(["t", "v_ma_term", "npc_term", "reward", *(f"action_{i}" for i in range(self.n_actions))])
            for row in self.history:
                w.writerow([repr(float(x)) for x in row])
