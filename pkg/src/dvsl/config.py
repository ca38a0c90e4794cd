"""Scenario and run configuration.

Everything is plain dataclasses so a config can be built in code for tests or
loaded from the JSON scenario document used by the CLI. Speeds in the JSON are
km/h (keys end in ``_kmh``); every dataclass stores m/s.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

KMH = 1.0 / 3.6

AREA_NAMES = ("MI", "DSA", "AA", "RI", "MA", "MO", "RO")
ROUTES = ("M2M", "M2Off", "On2M")


class ConfigError(ValueError):
    pass


@dataclass
class AreaSpec:
    lane_count: int
    length_m: float
    speed_limit_kmh: float | None = None  # falls back to the scenario base limit


@dataclass
class CarFollowParams:
    a_max: float = 2.6
    b: float = 4.5
    b_emergency: float = 9.0
    tau: float = 1.0
    s0: float = 2.0
    T: float = 1.5
    delta: float = 4.0
    sigma: float = 0.0  # Krauss dawdling; 0 keeps runs collision-free by construction


@dataclass
class LaneChangeParams:
    threshold: float = 1.5  # m/s of weighted anticipated speed gain
    cooldown_s: float = 3.0
    mandatory_cooldown_s: float = 1.0
    mandatory_min_gap: float = 0.5  # bumper gap a forced change will accept


@dataclass
class DemandProfile:
    """Piecewise-linear per-route demand in veh/h.

    ``points`` rows are ``(t_s, M2M, M2Off, On2M)``; the profile is held flat
    outside the covered range. The peak sits above what the merge can
    discharge, so even the halved desk-scale profile still loads the merge
    close to breakdown.
    """

    points: list[list[float]] = field(
        default_factory=lambda: [
            [0.0, 3840.0, 320.0, 800.0],
            [2700.0, 9440.0, 800.0, 2400.0],
            [5400.0, 9440.0, 800.0, 2400.0],
            [9000.0, 5760.0, 480.0, 1440.0],
            [18000.0, 3200.0, 240.0, 640.0],
        ]
    )
    scale: float = 1.0

    def rates(self, t: float) -> tuple[float, float, float]:
        pts = self.points
        if t <= pts[0][0]:
            row = pts[0][1:]
        elif t >= pts[-1][0]:
            row = pts[-1][1:]
        else:
            for lo, hi in zip(pts, pts[1:]):
                if lo[0] <= t <= hi[0]:
                    w = (t - lo[0]) / (hi[0] - lo[0]) if hi[0] > lo[0] else 0.0
                    row = [a + w * (b - a) for a, b in zip(lo[1:], hi[1:])]
                    break
        return tuple(max(0.0, r * self.scale) for r in row)  # type: ignore[return-value]


@dataclass
class EpisodeConfig:
    warmup_end_s: float = 3000.0
    episode_end_s: float = 5400.0
    control_horizon_s: float = 30.0

    def __post_init__(self) -> None:
        if not self.warmup_end_s < self.episode_end_s:
            raise ConfigError("warmup_end_s must precede episode_end_s")
        span = self.episode_end_s - self.warmup_end_s
        if self.control_horizon_s <= 0 or abs(span / self.control_horizon_s - round(span / self.control_horizon_s)) > 1e-9:
            raise ConfigError("control_horizon_s must divide the controlled window")

    @property
    def n_steps(self) -> int:
        return int(round((self.episode_end_s - self.warmup_end_s) / self.control_horizon_s))


@dataclass
class SafetyConfig:
    ttc_threshold_s: float = 3.0
    v_c_min: float = 15.0 * KMH
    v_max: float = 100.0 * KMH

    def __post_init__(self) -> None:
        if self.ttc_threshold_s <= 0:
            raise ConfigError("ttc_threshold_s must be positive")
        if not 0 <= self.v_c_min < self.v_max:
            raise ConfigError("need 0 <= v_c_min < v_max")


@dataclass
class VslBounds:
    v_min: float = 40.0 * KMH
    v_max: float = 100.0 * KMH

    def __post_init__(self) -> None:
        if not 0 < self.v_min < self.v_max:
            raise ConfigError("need 0 < v_min < v_max for speed limit bounds")


@dataclass
class EncoderConfig:
    mode: str = "graph"  # raw | graph
    width: int = 2
    weights: str = "learned"  # learned | fixed
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("raw", "graph"):
            raise ConfigError(f"unknown encoder mode {self.mode!r}")
        if self.weights not in ("learned", "fixed"):
            raise ConfigError(f"unknown encoder weights {self.weights!r}")
        if self.width < 1:
            raise ConfigError("encoder width must be >= 1")


@dataclass
class TrainerConfig:
    iterations: int = 100
    episodes: int = 2
    horizon: int | None = None  # None: run each episode to completion
    policy_epochs: int = 10
    value_epochs: int = 10
    gamma: float = 0.99
    kl_coeff: float = 0.2
    alpha: float = 1.5
    beta_high: float = 1.5
    beta_low: float = 0.5
    kl_target: float = 0.01
    lr_policy: float = 3e-4
    lr_value: float = 1e-3
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = -1.2
    max_grad_norm: float | None = None
    normalize_advantages: bool = False
    seed_pool: int | None = None  # distinct episode seeds cycled; None = one per episode slot
    seed: int = 0

    def __post_init__(self) -> None:
        self.hidden = tuple(self.hidden)
        if self.alpha <= 1:
            raise ConfigError("alpha must exceed 1")
        if not 0 < self.beta_low < 1 < self.beta_high:
            raise ConfigError("need 0 < beta_low < 1 < beta_high")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.kl_coeff <= 0 or self.kl_target <= 0:
            raise ConfigError("kl_coeff and kl_target must be positive")
        counts = [self.iterations, self.episodes, self.seed_pool or 1]
        if any(c < 1 for c in counts) or self.policy_epochs < 0 or self.value_epochs < 0:
            raise ConfigError("iteration, episode and seed-pool counts must be positive")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError("horizon must be positive")


DEFAULT_RULE_TABLE = [[0.0, 100.0], [0.25, 80.0], [0.45, 60.0]]


@dataclass
class ScenarioConfig:
    areas: dict[str, AreaSpec] = field(
        default_factory=lambda: {
            "MI": AreaSpec(5, 200.0),
            "DSA": AreaSpec(5, 200.0),
            "AA": AreaSpec(5, 200.0),
            "RI": AreaSpec(1, 200.0, 60.0),
            "MA": AreaSpec(6, 200.0),
            "MO": AreaSpec(5, 200.0),
            "RO": AreaSpec(1, 200.0, 60.0),
        }
    )
    base_speed_limit_kmh: float = 100.0
    sim_step_s: float = 1.0
    control_update_s: float = 5.0
    detector_window_s: float = 30.0
    adjacency_transitive: bool = False
    demand: DemandProfile = field(default_factory=DemandProfile)
    car_follow: CarFollowParams = field(default_factory=CarFollowParams)
    lane_change: LaneChangeParams = field(default_factory=LaneChangeParams)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    safety: SafetyConfig = field(default_factory=SafetyConfig)
    vsl: VslBounds = field(default_factory=VslBounds)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    rule_table: list[list[float]] = field(default_factory=lambda: copy.deepcopy(DEFAULT_RULE_TABLE))
    overlap_guard: bool = True
    seed: int = 0

    @property
    def base_speed_limit(self) -> float:
        return self.base_speed_limit_kmh * KMH

    def area_limit(self, area: str) -> float:
        spec = self.areas[area]
        kmh = spec.speed_limit_kmh if spec.speed_limit_kmh is not None else self.base_speed_limit_kmh
        return kmh * KMH

    def to_dict(self) -> dict[str, Any]:
        return config_to_json(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _pick(cls, data: dict[str, Any], renames: dict[str, str] | None = None, kmh: tuple[str, ...] = ()):
    renames = renames or {}
    fields = cls.__dataclass_fields__
    kwargs = {}
    for key, value in data.items():
        name = renames.get(key, key)
        if name.endswith("_kmh") and name[:-4] in kmh:
            kwargs[name[:-4]] = float(value) * KMH
            continue
        if name not in fields:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[name] = value
    return cls(**kwargs)


def config_from_json(doc: dict[str, Any]) -> ScenarioConfig:
    """Build a ScenarioConfig from the JSON scenario document."""
    doc = copy.deepcopy(doc)
    for key in ("areas", "base_speed_limit_kmh", "sim_step_s", "control_update_s"):
        if key not in doc:
            raise ConfigError(f"scenario is missing required key {key!r}")
    if "adjacency" not in doc or "transitive" not in doc["adjacency"]:
        raise ConfigError("scenario is missing required key 'adjacency.transitive'")

    areas = {}
    for name, spec in doc.pop("areas").items():
        if name not in AREA_NAMES:
            raise ConfigError(f"unknown area {name!r}")
        areas[name] = _pick(AreaSpec, spec)
    kwargs: dict[str, Any] = {"areas": areas}
    kwargs["adjacency_transitive"] = bool(doc.pop("adjacency")["transitive"])

    sections = {
        "demand": (DemandProfile, ()),
        "car_follow": (CarFollowParams, ()),
        "lane_change": (LaneChangeParams, ()),
        "episode": (EpisodeConfig, ()),
        "safety": (SafetyConfig, ("v_c_min", "v_max")),
        "vsl": (VslBounds, ("v_min", "v_max")),
        "encoder": (EncoderConfig, ()),
        "trainer": (TrainerConfig, ()),
    }
    for key, (cls, kmh) in sections.items():
        if key in doc:
            kwargs[key] = _pick(cls, doc.pop(key), kmh=kmh)
    if "controller" in doc:
        ctl = doc.pop("controller")
        if "rule_table" in ctl:
            kwargs["rule_table"] = [list(map(float, row)) for row in ctl["rule_table"]]
    for key in ("base_speed_limit_kmh", "sim_step_s", "control_update_s", "detector_window_s", "overlap_guard", "seed"):
        if key in doc:
            kwargs[key] = doc.pop(key)
    if doc:
        raise ConfigError(f"unknown scenario keys: {sorted(doc)}")
    return ScenarioConfig(**kwargs)


def config_to_json(cfg: ScenarioConfig) -> dict[str, Any]:
    def kmh_section(obj, names):
        out = asdict(obj)
        for n in names:
            out[n + "_kmh"] = round(out.pop(n) / KMH, 9)
        return out

    trainer = asdict(cfg.trainer)
    trainer["hidden"] = list(trainer["hidden"])
    return {
        "areas": {k: asdict(v) for k, v in cfg.areas.items()},
        "base_speed_limit_kmh": cfg.base_speed_limit_kmh,
        "sim_step_s": cfg.sim_step_s,
        "control_update_s": cfg.control_update_s,
        "detector_window_s": cfg.detector_window_s,
        "adjacency": {"transitive": cfg.adjacency_transitive},
        "demand": asdict(cfg.demand),
        "car_follow": asdict(cfg.car_follow),
        "lane_change": asdict(cfg.lane_change),
        "episode": asdict(cfg.episode),
        "safety": kmh_section(cfg.safety, ("v_c_min", "v_max")),
        "vsl": kmh_section(cfg.vsl, ("v_min", "v_max")),
        "encoder": asdict(cfg.encoder),
        "trainer": trainer,
        "controller": {"rule_table": cfg.rule_table},
        "overlap_guard": cfg.overlap_guard,
        "seed": cfg.seed,
    }


def load_config(path: str | Path) -> ScenarioConfig:
    with open(path) as fh:
        return config_from_json(json.load(fh))


def full_scenario(**overrides: Any) -> ScenarioConfig:
    """The merge-bottleneck scenario: 5/5/5 mainline lanes, 1 ramp lane, 6 MA lanes."""
    return ScenarioConfig(**overrides)


def reduced_scenario(**overrides: Any) -> ScenarioConfig:
    """Desk-scale training scenario: 600 s controlled window, demand halved,
    40 iterations of 2 episodes with step sizes tuned for that budget."""
    cfg = ScenarioConfig(**overrides)
    cfg.episode = EpisodeConfig(warmup_end_s=3000.0, episode_end_s=3600.0, control_horizon_s=30.0)
    cfg.demand.scale *= 0.5
    if "trainer" not in overrides:
        cfg.trainer = TrainerConfig(
            iterations=40, episodes=2, gamma=0.8, kl_target=0.05, lr_policy=0.01, lr_value=0.01,
            init_log_std=-0.9, max_grad_norm=1.0, normalize_advantages=True, seed=0,
        )
    return cfg
