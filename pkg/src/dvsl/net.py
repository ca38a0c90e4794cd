"""Road geometry, area decomposition and the directed lane graph."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, ScenarioConfig


class AreaKind(str, enum.Enum):
    MI = "MI"
    DSA = "DSA"
    AA = "AA"
    RI = "RI"
    MA = "MA"
    MO = "MO"
    RO = "RO"


# Areas that contribute graph nodes / state rows, in node order.
STATE_AREAS = (AreaKind.MI, AreaKind.DSA, AreaKind.AA, AreaKind.RI, AreaKind.MA)

# Direct predecessor areas along the traffic flow.
AREA_FEEDS = {
    AreaKind.MI: (AreaKind.DSA,),
    AreaKind.DSA: (AreaKind.AA,),
    AreaKind.AA: (AreaKind.MA,),
    AreaKind.RI: (AreaKind.MA,),
    AreaKind.MA: (AreaKind.MO, AreaKind.RO),
    AreaKind.MO: (),
    AreaKind.RO: (),
}


@dataclass
class Lane:
    id: str
    area: AreaKind
    index: int  # 0 = leftmost; the ramp lane is the highest index in MA
    length: float
    base_speed_limit: float
    successor_ids: list[str] = field(default_factory=list)
    neighbor_ids: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Network:
    lanes: tuple[Lane, ...]
    area_lengths: dict[AreaKind, float]
    segment_length: float
    sim_step: float
    control_update: float
    transitive: bool = False

    def lane(self, lane_id: str) -> Lane:
        return self._by_id[lane_id]

    @property
    def _by_id(self) -> dict[str, Lane]:
        cache = self.__dict__.get("_lane_cache")
        if cache is None:
            cache = {ln.id: ln for ln in self.lanes}
            object.__setattr__(self, "_lane_cache", cache)
        return cache

    def lanes_in(self, area: AreaKind) -> list[Lane]:
        return [ln for ln in self.lanes if ln.area == area]

    def lane_count(self, area: AreaKind) -> int:
        return sum(1 for ln in self.lanes if ln.area == area)

    @property
    def state_lanes(self) -> list[Lane]:
        """Graph nodes in node order (node i is ``state_lanes[i]``)."""
        return [ln for ln in self.lanes if ln.area in STATE_AREAS]

    @property
    def n_nodes(self) -> int:
        return len(self.state_lanes)

    @property
    def n_controlled(self) -> int:
        return self.lane_count(AreaKind.DSA)


def lane_id(area: AreaKind | str, index: int) -> str:
    return f"{AreaKind(area).value}_{index}"


def validate_cfl(segment_length: float, v_seg: float, dt: float) -> bool:
    """True when a vehicle at ``v_seg`` cannot skip a segment within ``dt``."""
    if segment_length <= 0 or v_seg <= 0 or dt <= 0:
        raise ValueError("segment length, speed and time step must be positive")
    return segment_length >= v_seg * dt


def build_network(config: ScenarioConfig) -> Network:
    areas = {AreaKind(name): spec for name, spec in config.areas.items()}
    if not areas:
        raise ConfigError("scenario defines no areas")
    for kind, spec in areas.items():
        if spec.lane_count < 1:
            raise ConfigError(f"{kind.value}: lane_count must be >= 1")
        if spec.length_m <= 0:
            raise ConfigError(f"{kind.value}: length_m must be positive")
        limit = config.area_limit(kind.value)
        if limit <= 0:
            raise ConfigError(f"{kind.value}: speed limit must be positive")
        if kind in STATE_AREAS and not validate_cfl(spec.length_m, limit, config.control_update_s):
            raise ConfigError(
                f"{kind.value}: length {spec.length_m} m violates CFL "
                f"(needs >= {limit * config.control_update_s:.1f} m at dt={config.control_update_s} s)"
            )

    n_main = max((areas[k].lane_count for k in (AreaKind.MI, AreaKind.DSA, AreaKind.AA) if k in areas), default=0)
    lanes: list[Lane] = []
    for kind in AreaKind:
        if kind not in areas:
            continue
        spec = areas[kind]
        limit = config.area_limit(kind.value)
        for i in range(spec.lane_count):
            lanes.append(Lane(lane_id(kind, i), kind, i, float(spec.length_m), limit))
    # node order: MI, DSA, AA, RI, MA then the downstream-only areas
    order = {k: n for n, k in enumerate(STATE_AREAS + (AreaKind.MO, AreaKind.RO))}
    lanes.sort(key=lambda ln: (order[ln.area], ln.index))

    by_id = {ln.id: ln for ln in lanes}
    for ln in lanes:
        for other in (ln.index - 1, ln.index + 1):
            nid = lane_id(ln.area, other)
            if nid in by_id:
                ln.neighbor_ids.append(nid)
        ln.successor_ids = _successors(ln, areas, n_main)

    return Network(
        lanes=tuple(lanes),
        area_lengths={k: float(s.length_m) for k, s in areas.items()},
        segment_length=float(min(s.length_m for s in areas.values())),
        sim_step=float(config.sim_step_s),
        control_update=float(config.control_update_s),
        transitive=config.adjacency_transitive,
    )


def _successors(ln: Lane, areas: dict, n_main: int) -> list[str]:
    def has(kind, idx):
        return kind in areas and idx < areas[kind].lane_count

    out = []
    if ln.area in (AreaKind.MI, AreaKind.DSA, AreaKind.AA):
        nxt = AREA_FEEDS[ln.area][0]
        if has(nxt, ln.index):
            out.append(lane_id(nxt, ln.index))
    elif ln.area == AreaKind.RI:
        if has(AreaKind.MA, n_main + ln.index):
            out.append(lane_id(AreaKind.MA, n_main + ln.index))
    elif ln.area == AreaKind.MA:
        if ln.index < n_main and has(AreaKind.MO, ln.index):
            out.append(lane_id(AreaKind.MO, ln.index))
        elif ln.index >= n_main and has(AreaKind.RO, ln.index - n_main):
            out.append(lane_id(AreaKind.RO, ln.index - n_main))
    return out


@dataclass(frozen=True)
class AdjacencyMatrix:
    entries: np.ndarray

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def __post_init__(self) -> None:
        self.entries.setflags(write=False)


def _upstream_areas(transitive: bool) -> dict[AreaKind, set[AreaKind]]:
    """Map each area to the set of areas it is upstream of."""
    direct = {k: set(v) for k, v in AREA_FEEDS.items()}
    if not transitive:
        return direct
    closure = {k: set(v) for k, v in direct.items()}
    changed = True
    while changed:
        changed = False
        for k in closure:
            extra = set().union(*(closure[d] for d in closure[k])) - closure[k] if closure[k] else set()
            if extra:
                closure[k] |= extra
                changed = True
    return closure


def build_adjacency(network: Network) -> AdjacencyMatrix:
    """Directed lane graph over the state lanes.

    ``e[i, j] = 1`` when lane i's area directly feeds lane j's area, or when i
    and j are lateral neighbours in the same area. ``network.transitive``
    extends "feeds" to every downstream area.
    """
    nodes = network.state_lanes
    pos = {ln.id: k for k, ln in enumerate(nodes)}
    feeds = _upstream_areas(network.transitive)
    n = len(nodes)
    e = np.zeros((n, n), dtype=np.int8)
    for i, li in enumerate(nodes):
        for nid in li.neighbor_ids:
            if nid in pos:
                e[i, pos[nid]] = 1
        for j, lj in enumerate(nodes):
            if lj.area in feeds[li.area]:
                e[i, j] = 1
    np.fill_diagonal(e, 0)
    return AdjacencyMatrix(e)
