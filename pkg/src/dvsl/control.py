"""Controllers that turn detector readings into DSA lane speed limits."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import KMH, VslBounds
from .graphstate import node_features
from .mdp import decode_action
from .net import AreaKind, Network


class ControllerKind(str, enum.Enum):
    NO_VSL = "NoVsl"
    RULE_BASED = "RuleBased"
    POLICY = "Policy"


@dataclass(frozen=True)
class RuleTable:
    """Rows (occupancy_lo, limit m/s); the last row whose breakpoint is at or
    below the measured occupancy wins."""

    rows: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if not self.rows:
            raise ValueError("rule table needs at least one row")
        occ = [r[0] for r in self.rows]
        if any(b <= a for a, b in zip(occ, occ[1:])):
            raise ValueError("rule table breakpoints must be strictly increasing")

    @classmethod
    def from_kmh(cls, rows) -> "RuleTable":
        return cls(tuple((float(o), float(v) * KMH) for o, v in rows))

    def validate(self, bounds: VslBounds) -> None:
        for _, lim in self.rows:
            if not bounds.v_min - 1e-9 <= lim <= bounds.v_max + 1e-9:
                raise ValueError(f"rule limit {lim / KMH:.1f} km/h outside the VSL range")

    def lookup(self, occupancy: float) -> float:
        lim = self.rows[0][1]
        for lo, v in self.rows:
            if occupancy >= lo:
                lim = v
            else:
                break
        return lim


class Controller:
    kind: ControllerKind

    def decide(self, readings, network: Network) -> np.ndarray:
        raise NotImplementedError


class NoVsl(Controller):
    kind = ControllerKind.NO_VSL

    def __init__(self, bounds: VslBounds):
        self.bounds = bounds

    def decide(self, readings, network: Network) -> np.ndarray:
        return np.full(network.n_controlled, self.bounds.v_max)


class RuleBased(Controller):
    kind = ControllerKind.RULE_BASED

    def __init__(self, table: RuleTable, bounds: VslBounds):
        table.validate(bounds)
        self.table = table
        self.bounds = bounds

    def decide(self, readings, network: Network) -> np.ndarray:
        by_lane = {r.lane_id: r for r in readings}
        out = []
        for lane in network.lanes_in(AreaKind.DSA):
            ma_id = f"{AreaKind.MA.value}_{lane.index}"
            if ma_id not in by_lane:
                raise KeyError(f"no detector reading for {ma_id}")
            out.append(self.table.lookup(by_lane[ma_id].occupancy))
        return np.clip(np.array(out), self.bounds.v_min, self.bounds.v_max)


class PolicyController(Controller):
    """Deterministic evaluation of a trained policy: limits from the means."""

    kind = ControllerKind.POLICY

    def __init__(self, agent, bounds: VslBounds):
        self.agent = agent
        self.bounds = bounds

    @classmethod
    def from_checkpoint(cls, path: str | Path, network: Network, bounds: VslBounds) -> "PolicyController":
        from .ppo import load_checkpoint

        agent, _ = load_checkpoint(path)
        if agent.n_nodes != network.n_nodes or agent.n_actions != network.n_controlled:
            raise ValueError(
                f"checkpoint expects {agent.n_nodes} nodes / {agent.n_actions} actions, "
                f"network has {network.n_nodes} / {network.n_controlled}"
            )
        return cls(agent, bounds)

    def decide(self, readings, network: Network) -> np.ndarray:
        V = node_features(readings, network)
        X, _ = self.agent.encode(V)
        mu, _ = self.agent.policy_forward(X)
        return decode_action(mu[0], self.bounds)


def make_controller(kind: ControllerKind | str, cfg, network: Network, checkpoint: str | Path | None = None) -> Controller:
    kind = ControllerKind(kind)
    if kind is ControllerKind.NO_VSL:
        return NoVsl(cfg.vsl)
    if kind is ControllerKind.RULE_BASED:
        return RuleBased(RuleTable.from_kmh(cfg.rule_table), cfg.vsl)
    if checkpoint is None:
        raise ValueError("the Policy controller needs a checkpoint")
    return PolicyController.from_checkpoint(checkpoint, network, cfg.vsl)


def decide(kind: ControllerKind | str, readings, network: Network, cfg, checkpoint=None) -> np.ndarray:
    return make_controller(kind, cfg, network, checkpoint).decide(readings, network)
