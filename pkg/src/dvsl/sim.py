"""Microscopic simulator for the on-ramp merge corridor.

The corridor is laid out on one longitudinal axis. Every physical lane is a
*column*: mainline columns ``0..n_main-1`` run MI -> DSA -> AA -> MA -> MO and
ramp columns run RI -> MA -> RO, joining the mainline laterally inside MA.
Vehicle state lives in parallel numpy arrays kept sorted by (column, position),
so the leader of vehicle ``i`` is ``i + 1`` whenever it shares the column.

Position ``x`` is the front bumper; a vehicle occupies ``[x - length, x]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .carfollow import idm_accel, krauss_next_speed, krauss_safe_speed
from .config import ROUTES, ConfigError, ScenarioConfig
from .net import AreaKind, Network, STATE_AREAS

_SCALE = 1.0e5  # column stride in the sort key; larger than any corridor length
HALT_SPEED = 0.1


class CarFollowModel(enum.IntEnum):
    KRAUSS = 0
    IDM = 1


class Route(enum.IntEnum):
    M2M = 0
    M2OFF = 1
    ON2M = 2


@dataclass(frozen=True)
class VehicleType:
    name: str
    length: float
    car_follow_model: CarFollowModel
    speed_factor_mean: float
    speed_factor_std: float
    lc_speed_gain: float


VEHICLE_TYPES = (
    VehicleType("type1", 8.0, CarFollowModel.KRAUSS, 1.0, 0.1, 1.0),
    VehicleType("type2", 8.0, CarFollowModel.IDM, 1.0, 0.1, 0.8),
    VehicleType("type3", 3.5, CarFollowModel.KRAUSS, 1.0, 0.1, 1.0),
    VehicleType("type4", 3.5, CarFollowModel.IDM, 1.0, 0.1, 0.8),
)


@dataclass
class Vehicle:
    id: int
    vtype: VehicleType
    route: Route
    lane_id: str
    position: float  # meters from the start of its lane
    speed: float
    speed_factor_sample: float
    spawn_time: float
    arrival_time: float | None = None


@dataclass(frozen=True)
class DetectorReading:
    lane_id: str
    window_s: float
    count: int
    occupancy: float
    mean_speed: float


_FIELDS = ("vid", "col", "x", "v", "length", "factor", "model", "route", "lcgain", "last_lc", "spawn_t", "halted")


class Simulator:
    def __init__(self, network: Network, cfg: ScenarioConfig, seed: int = 0, record_events: bool = True):
        self.net = network
        self.cfg = cfg
        self.cf = cfg.car_follow
        self.lc = cfg.lane_change
        self.dt = float(cfg.sim_step_s)
        self.rng = np.random.default_rng(seed)
        self.seed = seed
        self.record_events = record_events
        self.clock = 0.0
        self.spawned_total = 0
        self.arrived_total = 0
        self._next_id = 0
        self._build_geometry()

        self.s = {k: np.zeros(0, dtype=float) for k in _FIELDS}
        for k in ("vid", "col", "model", "route"):
            self.s[k] = np.zeros(0, dtype=np.int64)
        self.s["halted"] = np.zeros(0, dtype=bool)
        self.pending: list[list[tuple]] = [[] for _ in ROUTES]

        n_det = len(self.det_lane)
        self._det_count = np.zeros(n_det)
        self._det_dwell = np.zeros(n_det)
        self._det_vsum = np.zeros(n_det)
        self._det_window_start = 0.0
        self.last_readings: list[DetectorReading] = [
            DetectorReading(self.lane_ids[l], cfg.detector_window_s, 0, 0.0, 0.0) for l in self.det_lane
        ]
        self.events: list[dict] = []
        self.detector_rows: list[tuple] = []
        self.samples: list[tuple[float, np.ndarray, int, int]] = []

    # ------------------------------------------------------------------ geometry
    def _build_geometry(self) -> None:
        net = self.net
        need = (AreaKind.MI, AreaKind.DSA, AreaKind.AA, AreaKind.RI, AreaKind.MA, AreaKind.MO, AreaKind.RO)
        for kind in need:
            if net.lane_count(kind) == 0:
                raise ConfigError(f"simulator needs the full merge corridor; area {kind.value} is missing")
        n_main = net.lane_count(AreaKind.MI)
        n_ramp = net.lane_count(AreaKind.RI)
        if not (net.lane_count(AreaKind.DSA) == net.lane_count(AreaKind.AA) == net.lane_count(AreaKind.MO) == n_main):
            raise ConfigError("MI, DSA, AA and MO must have equal lane counts")
        if net.lane_count(AreaKind.MA) != n_main + n_ramp or net.lane_count(AreaKind.RO) != n_ramp:
            raise ConfigError("MA must carry mainline + ramp lanes and RO the ramp lanes")
        self.n_main, self.n_ramp = n_main, n_ramp
        self.n_cols = n_main + n_ramp
        L = net.area_lengths
        x_dsa = L[AreaKind.MI]
        x_aa = x_dsa + L[AreaKind.DSA]
        self.x_ma = x_aa + L[AreaKind.AA]
        self.x_mo = self.x_ma + L[AreaKind.MA]
        starts = {
            AreaKind.MI: 0.0,
            AreaKind.DSA: x_dsa,
            AreaKind.AA: x_aa,
            AreaKind.RI: self.x_ma - L[AreaKind.RI],
            AreaKind.MA: self.x_ma,
            AreaKind.MO: self.x_mo,
            AreaKind.RO: self.x_mo,
        }
        self.col_start = np.array([0.0] * n_main + [starts[AreaKind.RI]] * n_ramp)
        self.col_end = np.array([self.x_mo + L[AreaKind.MO]] * n_main + [self.x_mo + L[AreaKind.RO]] * n_ramp)

        lanes = list(net.lanes)
        self.lane_ids = [ln.id for ln in lanes]
        self.lane_index = {ln.id: k for k, ln in enumerate(lanes)}
        nl = len(lanes)
        self.lane_col = np.zeros(nl, dtype=np.int64)
        self.lane_start = np.zeros(nl)
        self.lane_end = np.zeros(nl)
        self.lane_area = [ln.area for ln in lanes]
        self.lane_area_code = np.array([list(AreaKind).index(ln.area) for ln in lanes])
        self.lane_limit = np.array([ln.base_speed_limit for ln in lanes], dtype=float)
        self.base_limit = self.lane_limit.copy()
        for k, ln in enumerate(lanes):
            if ln.area in (AreaKind.RI, AreaKind.RO):
                col = n_main + ln.index
            else:
                col = ln.index
            self.lane_col[k] = col
            self.lane_start[k] = starts[ln.area]
            self.lane_end[k] = starts[ln.area] + ln.length

        bps = sorted(set(self.lane_start.tolist()) | set(self.lane_end.tolist()))
        self.bp = np.array(bps)
        self.seg_lane = -np.ones((self.n_cols, len(bps)), dtype=np.int64)
        for k in range(nl):
            c = self.lane_col[k]
            for s in range(len(bps) - 1):
                if self.lane_start[k] <= bps[s] < self.lane_end[k]:
                    self.seg_lane[c, s] = k
        self.next_lane = -np.ones(nl, dtype=np.int64)
        for k, ln in enumerate(lanes):
            if ln.successor_ids:
                self.next_lane[k] = self.lane_index[ln.successor_ids[0]]
        self._limit_next = np.append(self.lane_limit, np.inf)

        self.dsa_lanes = np.array([self.lane_index[ln.id] for ln in net.lanes_in(AreaKind.DSA)])
        self.ma_lanes = np.array([self.lane_index[ln.id] for ln in net.lanes_in(AreaKind.MA)])
        self.aa_range = (starts[AreaKind.AA], starts[AreaKind.AA] + L[AreaKind.AA])

        # one detector per state lane at the lane midpoint
        self.det_lane = np.array([self.lane_index[ln.id] for ln in net.state_lanes])
        det_x = (self.lane_start[self.det_lane] + self.lane_end[self.det_lane]) / 2.0
        key = self.lane_col[self.det_lane] * _SCALE + det_x
        order = np.argsort(key)
        self._det_key = key[order]
        self._det_pos = det_x[order]
        self._det_col = self.lane_col[self.det_lane][order]
        self._det_slot = order  # index into det_lane order

    def lane_at(self, col, x):
        """Lane index for each (column, position); -1 off the network."""
        seg = np.searchsorted(self.bp, x, side="right") - 1
        seg = np.clip(seg, 0, len(self.bp) - 1)
        return self.seg_lane[col, seg]

    # ------------------------------------------------------------------ control
    def apply_speed_limits(self, limits) -> None:
        limits = np.asarray(limits, dtype=float)
        if limits.shape != (len(self.dsa_lanes),):
            raise ValueError(f"expected {len(self.dsa_lanes)} DSA limits, got shape {limits.shape}")
        lo, hi = self.cfg.vsl.v_min, self.cfg.vsl.v_max
        if np.any(limits < lo - 1e-9) or np.any(limits > hi + 1e-9) or not np.all(np.isfinite(limits)):
            raise ValueError("speed limit outside the allowed VSL range")
        self.lane_limit[self.dsa_lanes] = limits
        self._limit_next = np.append(self.lane_limit, np.inf)

    @property
    def dsa_limits(self) -> np.ndarray:
        return self.lane_limit[self.dsa_lanes].copy()

    # ------------------------------------------------------------------ state
    @property
    def active_count(self) -> int:
        return len(self.s["vid"])

    def _resort(self) -> None:
        s = self.s
        order = np.lexsort((s["x"], s["col"]))
        for k in _FIELDS:
            s[k] = s[k][order]

    def _append(self, **vals) -> None:
        for k in _FIELDS:
            self.s[k] = np.append(self.s[k], vals[k])

    def add_vehicle(self, route: Route, vtype: int, lane_id: str, position: float, speed: float, factor: float = 1.0) -> int:
        """Place a vehicle directly (tests, fuzzing). Counts as spawned."""
        lane = self.lane_index[lane_id]
        vt = VEHICLE_TYPES[vtype]
        vid = self._new_vehicle(route, vtype, int(self.lane_col[lane]), self.lane_start[lane] + position, speed, factor)
        self._log("spawn", vid, self.lane_col[lane], self.lane_start[lane] + position, speed, route=Route(route).name, type=vt.name)
        self._resort()
        return vid

    def _new_vehicle(self, route, vtype, col, x, v, factor) -> int:
        vt = VEHICLE_TYPES[vtype]
        vid = self._next_id
        self._next_id += 1
        self._append(
            vid=vid, col=col, x=x, v=v, length=vt.length, factor=factor, model=int(vt.car_follow_model),
            route=int(route), lcgain=vt.lc_speed_gain, last_lc=-np.inf, spawn_t=self.clock, halted=False,
        )
        self.spawned_total += 1
        return vid

    def vehicles(self) -> list[Vehicle]:
        s = self.s
        lanes = self.lane_at(s["col"], s["x"])
        out = []
        for i in range(self.active_count):
            l = lanes[i]
            out.append(Vehicle(
                id=int(s["vid"][i]), vtype=_type_of(s["length"][i], s["model"][i]), route=Route(int(s["route"][i])),
                lane_id=self.lane_ids[l], position=float(s["x"][i] - self.lane_start[l]), speed=float(s["v"][i]),
                speed_factor_sample=float(s["factor"][i]), spawn_time=float(s["spawn_t"][i]),
            ))
        return out

    def leader_gaps(self) -> np.ndarray:
        """Leader rear minus follower front for every same-column pair."""
        s = self.s
        same = s["col"][1:] == s["col"][:-1]
        gaps = s["x"][1:] - s["length"][1:] - s["x"][:-1]
        return gaps[same]

    def effective_limits(self) -> np.ndarray:
        s = self.s
        return self.lane_limit[self.lane_at(s["col"], s["x"])]

    # ------------------------------------------------------------------ demand
    def _draw_demand(self) -> None:
        rates = self.cfg.demand.rates(self.clock)
        for r, rate in enumerate(rates):
            n = self.rng.poisson(rate * self.dt / 3600.0) if rate > 0 else 0
            for _ in range(n):
                vtype = int(self.rng.integers(len(VEHICLE_TYPES)))
                vt = VEHICLE_TYPES[vtype]
                factor = self.rng.normal(vt.speed_factor_mean, vt.speed_factor_std)
                while factor <= 0:
                    factor = self.rng.normal(vt.speed_factor_mean, vt.speed_factor_std)
                self.pending[r].append((vtype, float(factor)))

    def _insert_pending(self) -> None:
        s = self.s
        cf = self.cf
        # bumper gap from each column's entry to the closest vehicle ahead of it
        entry_gap = np.full(self.n_cols, np.inf)
        entry_speed = np.zeros(self.n_cols)
        for c in range(self.n_cols):
            idx = np.searchsorted(s["col"], c, side="left")
            if idx < len(s["col"]) and s["col"][idx] == c:
                entry_gap[c] = s["x"][idx] - s["length"][idx] - self.col_start[c]
                entry_speed[c] = s["v"][idx]
        inserted = False
        for r in (Route.M2M, Route.M2OFF, Route.ON2M):
            queue = self.pending[r]
            if r == Route.ON2M:
                cols = list(range(self.n_main, self.n_cols))
            elif r == Route.M2OFF:
                cols = list(range(max(0, self.n_main - 2), self.n_main))
            else:
                cols = list(range(self.n_main))
            while queue:
                vtype, factor = queue[0]
                best = max(cols, key=lambda c: (entry_gap[c], -c))
                g = entry_gap[best]
                if g < cf.s0:
                    break
                lane = self.lane_at(best, self.col_start[best])
                v_des = factor * self.lane_limit[lane]
                if np.isinf(g):
                    v_ins = v_des
                else:
                    v_ins = min(v_des, krauss_safe_speed(g - cf.s0, entry_speed[best], v_des, cf.b, cf.tau))
                if v_ins < 0:
                    break
                queue.pop(0)
                vid = self._new_vehicle(r, vtype, best, self.col_start[best], v_ins, factor)
                self._log("spawn", vid, best, self.col_start[best], v_ins, route=Route(r).name, type=VEHICLE_TYPES[vtype].name)
                entry_gap[best] = -VEHICLE_TYPES[vtype].length
                inserted = True
        if inserted:
            self._resort()

    # ------------------------------------------------------------------ lane changes
    def _lead_lag(self, target_col, x):
        """Indices of the lead (front at or ahead of x) and lag on target columns."""
        s = self.s
        key = s["col"] * _SCALE + s["x"]
        q = target_col * _SCALE + x
        idx = np.searchsorted(key, q, side="left")
        n = len(key)
        lead = np.where((idx < n) & (s["col"][np.minimum(idx, n - 1)] == target_col), idx, -1)
        lagi = idx - 1
        lag = np.where((lagi >= 0) & (s["col"][np.maximum(lagi, 0)] == target_col), lagi, -1)
        return lead, lag

    def _anticipated_speed(self, lane, lead, x, v, factor):
        """Speed a vehicle expects on a lane: posted limit (looking one lane ahead)
        and the Krauss-safe speed behind the lead there."""
        nxt = self.next_lane[lane]
        lim = np.minimum(self.lane_limit[lane], self._limit_next[nxt])
        cap = factor * lim
        s = self.s
        has = lead >= 0
        li = np.where(has, lead, 0)
        gap = np.where(has, s["x"][li] - s["length"][li] - x, np.inf)
        vs = krauss_safe_speed(np.maximum(gap - self.cf.s0, 0.0), np.where(has, s["v"][li], 0.0), v, self.cf.b, self.cf.tau)
        return np.minimum(cap, vs)

    def _safe_slot(self, me, lead, lag, b_lag, min_gap):
        """Vectorized gap-acceptance on the target column."""
        s = self.s
        cf = self.cf
        x, v, ln = s["x"][me], s["v"][me], s["length"][me]
        ok = np.ones(len(me), dtype=bool)
        has = lead >= 0
        li = np.where(has, lead, 0)
        gap_lead = s["x"][li] - s["length"][li] - x
        v_ok = v <= krauss_safe_speed(np.maximum(gap_lead - cf.s0, 0.0), s["v"][li], v, cf.b, cf.tau) + 1e-9
        ok &= ~has | ((gap_lead >= min_gap) & v_ok)
        has = lag >= 0
        gi = np.where(has, lag, 0)
        gap_lag = x - ln - s["x"][gi]
        vs = krauss_safe_speed(np.maximum(gap_lag - cf.s0, 0.0), v, s["v"][gi], b_lag, cf.tau)
        ok &= ~has | ((gap_lag >= min_gap) & (s["v"][gi] <= vs + 1e-9))
        return ok

    def _mandatory_dirs(self) -> np.ndarray:
        """Route-forced lateral direction per vehicle: +1 right, -1 left, 0 none.

        Off-ramp traffic heads for the rightmost mainline lane from AA on and
        for the ramp lane inside MA; ramp and through traffic on the ramp lane
        must leave it before the end of MA.
        """
        s = self.s
        col, x = s["col"], s["x"]
        is_off = s["route"] == Route.M2OFF
        ramp_col = col >= self.n_main
        in_aa = (x >= self.aa_range[0]) & (x < self.aa_range[1])
        in_ma = (x >= self.x_ma) & (x < self.x_mo)
        mand = np.zeros(len(col), dtype=np.int64)
        mand[is_off & in_aa & (col < self.n_main - 1)] = 1
        mand[is_off & in_ma & ~ramp_col] = 1
        mand[~is_off & in_ma & ramp_col] = -1
        return mand

    def _lane_change_proposals(self):
        """Return (vehicle indices, target columns, mandatory flags) of safe changes."""
        s = self.s
        n = self.active_count
        if n == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
        col, x, v = s["col"], s["x"], s["v"]
        lane = self.lane_at(col, x)
        in_aa = (x >= self.aa_range[0]) & (x < self.aa_range[1])
        in_ma = (x >= self.x_ma) & (x < self.x_mo)
        is_off = s["route"] == Route.M2OFF
        mand = self._mandatory_dirs()

        cooldown = np.where(mand != 0, self.lc.mandatory_cooldown_s, self.lc.cooldown_s)
        ready = (self.clock - s["last_lc"]) >= cooldown

        same_lead = np.arange(1, n + 1)
        same_lead = np.where((same_lead < n) & (col[np.minimum(same_lead, n - 1)] == col), same_lead, -1)
        ant_here = self._anticipated_speed(lane, same_lead, x, v, s["factor"])

        best_target = -np.ones(n, dtype=np.int64)
        best_gain = np.zeros(n)
        is_mand = np.zeros(n, dtype=bool)
        for d in (-1, 1):
            tcol = col + d
            valid = (tcol >= 0) & (tcol < self.n_cols) & ready
            tc = np.clip(tcol, 0, self.n_cols - 1)
            tlane = self.lane_at(tc, x)
            valid &= tlane >= 0
            tl = np.maximum(tlane, 0)
            # lateral neighbours only within one area
            valid &= self.lane_area_code[tl] == self.lane_area_code[lane]
            if not valid.any():
                continue
            lead, lag = self._lead_lag(tc, x)
            mandatory = valid & (mand == d)
            # discretionary moves may not fight the route
            disc = valid & (mand == 0)
            if d == 1:
                disc &= ~(in_ma & (tc >= self.n_main) & ~is_off)
            else:
                disc &= ~(is_off & (in_aa | in_ma))
            ant_there = self._anticipated_speed(tl, lead, x, v, s["factor"])
            gain = (ant_there - ant_here) * s["lcgain"]
            disc &= gain > self.lc.threshold
            b_lag = np.where(mandatory, self.cf.b_emergency, self.cf.b)
            min_gap = np.where(mandatory, self.lc.mandatory_min_gap, self.cf.s0)
            safe = self._safe_slot(np.arange(n), lead, lag, b_lag, min_gap)
            take_m = mandatory & safe
            take_d = disc & safe & ~is_mand & (gain > best_gain)
            best_target = np.where(take_m | take_d, tc, best_target)
            best_gain = np.where(take_d, gain, best_gain)
            is_mand |= take_m
        who = np.nonzero(best_target >= 0)[0]
        return who, best_target[who], is_mand[who]

    def _fits(self, i: int, col: int, ignore: int, b_lag: float) -> bool:
        """Gap acceptance for vehicle i on ``col`` with vehicle ``ignore`` removed."""
        s = self.s
        cf = self.cf
        m = s["col"] == col
        m[ignore] = False
        xs = s["x"][m]
        ahead = xs >= s["x"][i]
        if ahead.any():
            j = np.nonzero(m)[0][ahead][0]
            gap = s["x"][j] - s["length"][j] - s["x"][i]
            vs = krauss_safe_speed(max(gap - cf.s0, 0.0), s["v"][j], s["v"][i], cf.b, cf.tau)
            if gap < self.lc.mandatory_min_gap or s["v"][i] > vs + 1e-9:
                return False
        if (~ahead).any():
            j = np.nonzero(m)[0][~ahead][-1]
            gap = s["x"][i] - s["length"][i] - s["x"][j]
            vs = krauss_safe_speed(max(gap - cf.s0, 0.0), s["v"][i], s["v"][j], b_lag, cf.tau)
            if gap < self.lc.mandatory_min_gap or s["v"][j] > vs + 1e-9:
                return False
        return True

    def _swaps(self, blocked: np.ndarray, mand: np.ndarray) -> list[tuple[int, int]]:
        """Pairs of slow vehicles side by side that each need the other's lane."""
        s = self.s
        cf = self.cf
        out = []
        used: set[int] = set()
        slow = blocked[s["v"][blocked] < 1.0]
        for i in slow:
            if i in used:
                continue
            tcol = s["col"][i] + mand[i]
            for j in slow:
                if j in used or j == i or s["col"][j] != tcol or mand[j] != -mand[i]:
                    continue
                reach = max(s["length"][i], s["length"][j]) + cf.s0
                if abs(s["x"][i] - s["x"][j]) >= reach:
                    continue
                if self._fits(i, tcol, j, cf.b_emergency) and self._fits(j, s["col"][i], i, cf.b_emergency):
                    out.append((int(i), int(j)))
                    used.update((int(i), int(j)))
                    break
        return out

    def _execute_lane_changes(self) -> None:
        who, target, mand = self._lane_change_proposals()
        s = self.s
        cf = self.cf
        moved = []
        if len(who):
            order = np.lexsort((who, ~mand))
            accepted: dict[int, list[int]] = {}
            for k in order:
                i, t = int(who[k]), int(target[k])
                ok = True
                b_lag = cf.b_emergency if mand[k] else cf.b
                min_gap = self.lc.mandatory_min_gap if mand[k] else cf.s0
                for j in accepted.get(t, ()):
                    a, b_ = (i, j) if s["x"][j] >= s["x"][i] else (j, i)  # a follows b_
                    gap = s["x"][b_] - s["length"][b_] - s["x"][a]
                    vs = krauss_safe_speed(max(gap - cf.s0, 0.0), s["v"][b_], s["v"][a], b_lag, cf.tau)
                    if gap < min_gap or s["v"][a] > vs + 1e-9:
                        ok = False
                        break
                if ok:
                    accepted.setdefault(t, []).append(i)
                    moved.append((i, t))
        dirs = self._mandatory_dirs()
        taken = {i for i, _ in moved}
        ready = (self.clock - s["last_lc"]) >= self.lc.mandatory_cooldown_s
        blocked = np.array([k for k in np.nonzero((dirs != 0) & ready)[0] if k not in taken], dtype=np.int64)
        if len(blocked) > 1:
            for i, j in self._swaps(blocked, dirs):
                moved += [(i, int(s["col"][j])), (j, int(s["col"][i]))]
        if not moved:
            return
        for i, t in moved:
            s["col"][i] = t
            s["last_lc"][i] = self.clock
            self._log("lane_change", int(s["vid"][i]), t, s["x"][i], s["v"][i])
        self._resort()

    def lane_change_decision(self, vid: int) -> str | None:
        """Target lane id this vehicle would change into right now, if any."""
        who, target, _ = self._lane_change_proposals()
        idx = np.nonzero(self.s["vid"] == vid)[0]
        if len(idx) == 0:
            raise KeyError(vid)
        hit = np.nonzero(who == idx[0])[0]
        if len(hit) == 0:
            return None
        lane = self.lane_at(target[hit[0]], self.s["x"][idx[0]])
        return self.lane_ids[int(lane)]

    # ------------------------------------------------------------------ motion
    def _next_speeds(self) -> np.ndarray:
        s = self.s
        cf = self.cf
        n = self.active_count
        col, x, v, f = s["col"], s["x"], s["v"], s["factor"]
        lane = self.lane_at(col, x)
        lim = self.lane_limit[lane]
        v_des = f * lim

        lead = np.arange(1, n + 1)
        has = (lead < n) & (col[np.minimum(lead, n - 1)] == col)
        li = np.minimum(lead, n - 1)
        gap = np.where(has, x[li] - s["length"][li] - x, np.inf)
        v_lead = np.where(has, v[li], 0.0)

        # the ramp lane ends with MA for everyone not leaving at the off-ramp;
        # off-ramp traffic still on the mainline there misses its exit
        wall = (col >= self.n_main) & (s["route"] != Route.M2OFF) & (x <= self.x_mo)
        wall_gap = np.where(wall, self.x_mo - x, np.inf)

        # cooperation: the lag on a requester's target lane treats it as a leader
        coop_gap = np.full(n, np.inf)
        coop_v = np.zeros(n)
        mand = self._mandatory_dirs()
        req = np.nonzero((mand != 0) & (x >= self.x_ma))[0]
        if len(req):
            _, lag = self._lead_lag(col[req] + mand[req], x[req])
            ok = lag >= 0
            req, lag = req[ok], lag[ok]
            g = x[req] - s["length"][req] - x[lag]
            ok = g >= 0
            req, lag, g = req[ok], lag[ok], g[ok]
            # a lag may yield to several requesters; keep the tightest
            order = np.lexsort((-g, lag))
            coop_gap[lag[order]] = g[order]
            coop_v[lag[order]] = v[req[order]]

        noise = self.rng.random(n) if cf.sigma > 0 else None
        krauss = krauss_next_speed(gap, v_lead, v, v_des, cf, self.dt, noise)
        krauss = np.minimum(krauss, krauss_next_speed(wall_gap, 0.0, v, v_des, cf, self.dt))
        krauss = np.minimum(krauss, krauss_next_speed(coop_gap, coop_v, v, v_des, cf, self.dt))
        acc = np.minimum(idm_accel(gap, v, v - v_lead, v_des, cf), idm_accel(wall_gap, v, v, v_des, cf))
        acc = np.minimum(acc, idm_accel(coop_gap, v, v - coop_v, v_des, cf))
        idm = np.maximum(v + acc * self.dt, 0.0)
        v_new = np.where(s["model"] == CarFollowModel.KRAUSS, krauss, idm)

        # posted-limit compliance, braking ahead of a lower limit on the next lane
        v_new = np.minimum(v_new, v_des)
        nxt = self.next_lane[lane]
        lim_next = self._limit_next[nxt]
        bound = self.lane_end[lane]
        crossing = (x + v_new * self.dt >= bound) & (lim_next < lim)
        if crossing.any():
            stay = np.maximum((bound - x - 1e-6) / self.dt, 0.0)
            v_new = np.where(crossing, np.minimum(v_new, np.maximum(f * lim_next, stay)), v_new)

        if self.cfg.overlap_guard:
            v_new = np.where(wall, np.minimum(v_new, np.maximum(wall_gap, 0.0) / self.dt), v_new)
            for _ in range(n + 1):
                x_new = x + v_new * self.dt
                room = np.where(has, (x_new[li] - s["length"][li] - x) / self.dt, np.inf)
                bad = v_new > room
                if not bad.any():
                    break
                v_new = np.where(bad, np.maximum(room, 0.0), v_new)
        return v_new

    def step(self) -> None:
        t_next = self.clock + self.dt
        s = self.s
        if self.active_count:
            self._execute_lane_changes()
            s = self.s
            x0 = s["x"].copy()
            v_new = self._next_speeds()
            s["v"] = v_new
            s["x"] = x0 + v_new * self.dt
            self._detect(x0, s["x"], v_new, s["col"], s["length"])
            gone = s["x"] >= self.col_end[s["col"]]
            if gone.any():
                for i in np.nonzero(gone)[0]:
                    self._log("arrive", int(s["vid"][i]), s["col"][i], s["x"][i], s["v"][i], t=t_next)
                self.arrived_total += int(gone.sum())
                keep = ~gone
                for k in _FIELDS:
                    s[k] = s[k][keep]
            self._resort()
        self.clock = t_next
        self._draw_demand()
        self._insert_pending()
        self._track_halts()
        if _is_multiple(self.clock, self.cfg.detector_window_s):
            self._flush_detectors()
        if _is_multiple(self.clock, self.cfg.control_update_s):
            self._sample()

    def run_until(self, t_end: float) -> None:
        while self.clock < t_end - 1e-9:
            self.step()

    def _track_halts(self) -> None:
        s = self.s
        now = s["v"] < HALT_SPEED
        changed = now != s["halted"]
        if changed.any() and self.record_events:
            for i in np.nonzero(changed)[0]:
                self._log("halt" if now[i] else "resume", int(s["vid"][i]), s["col"][i], s["x"][i], s["v"][i])
        s["halted"] = now

    # ------------------------------------------------------------------ detectors
    def _detect(self, x0, x1, v, col, length) -> None:
        if len(x0) == 0:
            return
        q = col * _SCALE + (x0 - length)
        k = np.searchsorted(self._det_key, q, side="right")
        ok = k < len(self._det_key)
        kk = np.minimum(k, len(self._det_key) - 1)
        ok &= self._det_col[kk] == col
        d = self._det_pos[kk]
        ok &= d <= x1 + 1e-12
        if not ok.any():
            return
        idx = np.nonzero(ok)[0]
        d = d[idx]
        a, b, vv, ln = x0[idx], x1[idx], v[idx], length[idx]
        lo = np.maximum(a, d)
        hi = np.minimum(b, d + ln)
        moving = vv > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            dwell = np.where(moving, np.maximum(hi - lo, 0.0) / np.where(moving, vv, 1.0), 0.0)
        dwell = np.where(~moving & (d <= a) & (a < d + ln), self.dt, np.minimum(dwell, self.dt))
        cross = (a < d) & (d <= b)
        slot = self._det_slot[kk[idx]]
        np.add.at(self._det_dwell, slot, dwell)
        np.add.at(self._det_count, slot, cross.astype(float))
        np.add.at(self._det_vsum, slot, np.where(cross, vv, 0.0))

    def _flush_detectors(self) -> None:
        window = self.clock - self._det_window_start
        readings = []
        for slot, lane in enumerate(self.det_lane):
            cnt = int(self._det_count[slot])
            occ = min(self._det_dwell[slot] / window, 1.0) if window > 0 else 0.0
            mean = self._det_vsum[slot] / cnt if cnt else 0.0
            readings.append(DetectorReading(self.lane_ids[lane], window, cnt, float(occ), float(mean)))
            self.detector_rows.append((self.clock, self.lane_ids[lane], cnt, float(occ), float(mean)))
        self.last_readings = readings
        self._det_count[:] = 0
        self._det_dwell[:] = 0
        self._det_vsum[:] = 0
        self._det_window_start = self.clock

    def read_detectors(self) -> list[DetectorReading]:
        """Readings of the most recently closed detector window, in node order."""
        return list(self.last_readings)

    # ------------------------------------------------------------------ sampling
    def ma_lane_speeds(self) -> np.ndarray:
        """Instantaneous mean speed per MA lane (nan for an empty lane)."""
        s = self.s
        lanes = self.lane_at(s["col"], s["x"])
        out = np.full(len(self.ma_lanes), np.nan)
        for k, l in enumerate(self.ma_lanes):
            m = lanes == l
            if m.any():
                out[k] = s["v"][m].mean()
        return out

    def closing_ttc(self) -> np.ndarray:
        """TTC of every follower closing on its same-column leader."""
        s = self.s
        if self.active_count < 2:
            return np.zeros(0)
        same = s["col"][1:] == s["col"][:-1]
        gap = s["x"][1:] - s["length"][1:] - s["x"][:-1]
        closing = s["v"][:-1] - s["v"][1:]
        m = same & (closing > 0)
        return np.maximum(gap[m], 0.0) / closing[m]

    def npc_count(self, threshold: float | None = None) -> int:
        thr = self.cfg.safety.ttc_threshold_s if threshold is None else threshold
        return int(np.count_nonzero(self.closing_ttc() < thr))

    def _sample(self) -> None:
        npc = self.npc_count()
        self.samples.append((self.clock, self.ma_lane_speeds(), npc, self.active_count))
        if self.record_events:
            self.events.append({"t": self.clock, "event": "sample", "npc": npc, "active": self.active_count})

    # ------------------------------------------------------------------ logging
    def _log(self, kind, vid, col, x, v, t=None, **extra) -> None:
        if not self.record_events:
            return
        lane = int(self.lane_at(int(col), min(float(x), self.col_end[int(col)] - 1e-9)))
        rec = {
            "t": self.clock if t is None else t, "event": kind, "id": vid, "lane": self.lane_ids[lane],
            "pos": round(float(x - self.lane_start[lane]), 6), "speed": round(float(v), 6),
        }
        rec.update(extra)
        self.events.append(rec)


def _is_multiple(t: float, period: float) -> bool:
    r = t / period
    return abs(r - round(r)) < 1e-9


def _type_of(length: float, model: int) -> VehicleType:
    for vt in VEHICLE_TYPES:
        if vt.length == length and int(vt.car_follow_model) == int(model):
            return vt
    raise ValueError("unknown vehicle type")
