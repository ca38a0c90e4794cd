"""Per-lane node features and the one-round message-passing encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import AdjacencyMatrix, Network

FREE_FLOW_SPEED = 100.0 / 3.6


@dataclass
class EncoderWeights:
    W: np.ndarray  # (d, 2)
    learned: bool = True

    @classmethod
    def init(cls, width: int = 2, n_features: int = 2, seed: int = 0, learned: bool = True) -> "EncoderWeights":
        rng = np.random.default_rng(seed)
        W = rng.normal(0.0, 1.0 / np.sqrt(n_features), size=(width, n_features))
        return cls(W, learned)

    @property
    def width(self) -> int:
        return self.W.shape[0]


def node_features(readings, network: Network, v_free: float = FREE_FLOW_SPEED) -> np.ndarray:
    """Stack (occupancy, speed / v_free) per state lane in node order."""
    by_lane = {r.lane_id: r for r in readings}
    rows = []
    for lane in network.state_lanes:
        r = by_lane.get(lane.id)
        if r is None:
            raise KeyError(f"no detector reading for lane {lane.id}")
        rows.append((r.occupancy, min(max(r.mean_speed / v_free, 0.0), 1.0)))
    return np.array(rows, dtype=float).reshape(len(rows), 2)


def message_pass(V: np.ndarray, E, W) -> np.ndarray:
    """H = E^T V W^T: node i sums the features of every j with e_ji = 1."""
    E = E.entries if isinstance(E, AdjacencyMatrix) else np.asarray(E)
    W = W.W if isinstance(W, EncoderWeights) else np.asarray(W)
    V = np.asarray(V, dtype=float)
    if E.ndim != 2 or E.shape[0] != E.shape[1] or E.shape[0] != V.shape[0]:
        raise ValueError(f"adjacency {E.shape} does not match {V.shape[0]} nodes")
    if W.ndim != 2 or W.shape[1] != V.shape[1]:
        raise ValueError(f"weights {W.shape} do not match feature width {V.shape[1]}")
    return E.T.astype(float) @ V @ W.T


def sigmoid(x):
    # split by sign so large |x| neither overflows nor loses precision
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def aggregate(H: np.ndarray) -> np.ndarray:
    return sigmoid(H)


def encode(readings, network: Network, weights: EncoderWeights | None, mode: str = "graph", adjacency=None) -> np.ndarray:
    """Flattened state vector: raw node features or the graph state."""
    V = node_features(readings, network)
    return encode_features(V, adjacency, weights, mode)


def encode_features(V: np.ndarray, adjacency, weights: EncoderWeights | None, mode: str) -> np.ndarray:
    if mode == "raw":
        return V.reshape(-1).copy()
    if mode != "graph":
        raise ValueError(f"unknown encoder mode {mode!r}")
    if adjacency is None or weights is None:
        raise ValueError("graph mode needs an adjacency matrix and encoder weights")
    return aggregate(message_pass(V, adjacency, weights)).reshape(-1)
