"""Adaptive-KL PPO with Monte-Carlo advantages, written against numpy.

The agent owns three parameter groups: the policy MLP plus a
state-independent log-std (theta), the value MLP (omega) and, in graph mode
with learned weights, the shared encoder matrix W. W receives gradients from
the policy objective only.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TrainerConfig
from .graphstate import EncoderWeights, sigmoid
from .nets import MLP

LOG_2PI = math.log(2.0 * math.pi)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- agent
class Agent:
    def __init__(self, n_nodes: int, n_features: int, n_actions: int, mode: str, adjacency=None,
                 encoder: EncoderWeights | None = None, hidden=(64, 64), init_log_std: float = -1.2, seed: int = 0):
        if mode not in ("raw", "graph"):
            raise ValueError(f"unknown encoder mode {mode!r}")
        if mode == "graph" and (encoder is None or adjacency is None):
            raise ValueError("graph mode needs adjacency and encoder weights")
        self.mode = mode
        self.n_nodes, self.n_features, self.n_actions = int(n_nodes), int(n_features), int(n_actions)
        E = None if adjacency is None else np.asarray(getattr(adjacency, "entries", adjacency), dtype=float)
        self.A = None if E is None else E.T.copy()  # in-edge aggregation operator
        self.encoder = encoder if mode == "graph" else None
        width = self.encoder.width if self.encoder is not None else n_features
        self.state_dim = self.n_nodes * width
        rng = np.random.default_rng(seed)
        self.hidden = tuple(int(h) for h in hidden)
        self.pi = MLP((self.state_dim, *self.hidden, self.n_actions), rng, zero_last=True)
        self.log_std = np.full(self.n_actions, float(init_log_std))
        self.vf = MLP((self.state_dim, *self.hidden, 1), rng, last_scale=0.1)

    @property
    def learns_encoder(self) -> bool:
        return self.encoder is not None and self.encoder.learned

    # -------------------------------------------------------- encoder
    def encode(self, V):
        """Features (B, N, F) -> states (B, D) plus a backprop cache."""
        V = np.asarray(V, dtype=float)
        if V.ndim == 2:
            V = V[None]
        B = V.shape[0]
        if V.shape[1:] != (self.n_nodes, self.n_features):
            raise ValueError(f"features of shape {V.shape[1:]} do not match ({self.n_nodes}, {self.n_features})")
        if self.encoder is None:
            return V.reshape(B, -1), None
        AV = np.einsum("ij,bjf->bif", self.A, V)
        S = sigmoid(AV @ self.encoder.W.T)
        return S.reshape(B, -1), (AV, S)

    def encoder_grad(self, cache, dX) -> np.ndarray:
        AV, S = cache
        dS = dX.reshape(S.shape)
        dH = dS * S * (1.0 - S)
        return np.einsum("bnd,bnf->df", dH, AV)

    # -------------------------------------------------------- heads
    def policy_forward(self, X):
        """Means in (0,1) and the log-std vector for a batch of states."""
        z, _ = self.pi.forward(X)
        return sigmoid(z), self.log_std.copy()

    def value(self, X) -> np.ndarray:
        return self.vf(X)[:, 0]

    def act(self, V, rng: np.random.Generator | None = None, deterministic: bool = False):
        X, _ = self.encode(V)
        mu, log_std = self.policy_forward(X)
        mu = mu[0]
        if deterministic:
            return mu.copy(), float(gaussian_logp(mu[None], mu[None], log_std)[0])
        return sample_action(mu, log_std, rng)

    # -------------------------------------------------------- flat views
    def groups(self) -> dict[str, list[np.ndarray]]:
        g = {"policy": [*self.pi.params, self.log_std], "value": list(self.vf.params)}
        if self.encoder is not None:
            g["encoder"] = [self.encoder.W]
        return g

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"pi.{k}", p) for k, p in enumerate(self.pi.params)]
        out.append(("log_std", self.log_std))
        out += [(f"vf.{k}", p) for k, p in enumerate(self.vf.params)]
        if self.encoder is not None:
            out.append(("encoder.W", self.encoder.W))
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_arrays()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in self.named_arrays():
            arr[...] = snap[k]


# ---------------------------------------------------------------- distributions
def gaussian_logp(a, mu, log_std) -> np.ndarray:
    a, mu = np.atleast_2d(a), np.atleast_2d(mu)
    z = (a - mu) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=1) - np.sum(log_std) - 0.5 * mu.shape[1] * LOG_2PI


def sample_action(mu, log_std, rng: np.random.Generator):
    """Gaussian sample around ``mu``. Returns (raw sample, clamped u, log-prob).

    The log-prob is the density of the raw sample; the environment clamps u
    into [0, 1], so every raw value below 0 (above 1) acts like u = 0 (u = 1).
    """
    mu = np.asarray(mu, dtype=float)
    raw = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
    return raw, np.clip(raw, 0.0, 1.0), float(gaussian_logp(raw[None], mu[None], log_std)[0])


def gaussian_kl(mu_old, log_std_old, mu_new, log_std_new) -> np.ndarray:
    """Per-sample KL(old || new) for diagonal Gaussians."""
    var_old = np.exp(2 * log_std_old)
    var_new = np.exp(2 * log_std_new)
    t = log_std_new - log_std_old + (var_old + (mu_old - mu_new) ** 2) / (2 * var_new) - 0.5
    return np.sum(t, axis=-1)


# ---------------------------------------------------------------- batch
@dataclass
class RolloutBatch:
    features: np.ndarray  # (T, N, F)
    actions: np.ndarray  # raw Gaussian samples (T, Nc)
    rewards: np.ndarray
    logp_old: np.ndarray
    episode_ends: list[int]  # exclusive end index of each episode
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None
    mu_old: np.ndarray | None = None
    log_std_old: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)


def discounted_returns(rewards, episode_ends, gamma: float) -> np.ndarray:
    """G_t = r_t + gamma G_{t+1}, restarted at each episode boundary."""
    r = np.asarray(rewards, dtype=float)
    G = np.zeros_like(r)
    start = 0
    for end in episode_ends:
        acc = 0.0
        for t in range(end - 1, start - 1, -1):
            acc = r[t] + gamma * acc
            G[t] = acc
        start = end
    return G


def compute_advantages(batch: RolloutBatch, gamma: float, value_fn: Callable[[np.ndarray], np.ndarray]) -> RolloutBatch:
    batch.returns = discounted_returns(batch.rewards, batch.episode_ends, gamma)
    batch.advantages = batch.returns - np.asarray(value_fn(batch.features), dtype=float)
    return batch


# ---------------------------------------------------------------- objectives
@dataclass
class PolicyGrads:
    J: float
    kl: float
    pi: list[np.ndarray]
    log_std: np.ndarray
    W: np.ndarray | None


def ppo_objective(agent: Agent, batch: RolloutBatch, kl_coeff: float, advantages=None) -> PolicyGrads:
    """J = sum_t ratio_t A_t - lambda * mean_t KL(old || new), with gradients."""
    adv = batch.advantages if advantages is None else advantages
    X, enc_cache = agent.encode(batch.features)
    z, acts = agent.pi.forward(X)
    mu = sigmoid(z)
    ls = agent.log_std
    a = batch.actions
    logp = gaussian_logp(a, mu, ls)
    ratio = np.exp(logp - batch.logp_old)
    kl_each = gaussian_kl(batch.mu_old, batch.log_std_old, mu, ls)
    T = len(adv)
    J = float(np.sum(ratio * adv) - kl_coeff * kl_each.mean())

    inv_var = np.exp(-2 * ls)
    w = (ratio * adv)[:, None]
    d_mu = w * (a - mu) * inv_var
    d_ls = np.sum(w * ((a - mu) ** 2 * inv_var - 1.0), axis=0)
    # KL(old || new) terms
    d_mu -= kl_coeff / T * (mu - batch.mu_old) * inv_var
    var_old = np.exp(2 * batch.log_std_old)
    d_ls -= kl_coeff / T * np.sum(1.0 - (var_old + (batch.mu_old - mu) ** 2) * inv_var, axis=0)

    dz = d_mu * mu * (1.0 - mu)
    g_pi, dX = agent.pi.backward(acts, dz)
    g_W = agent.encoder_grad(enc_cache, dX) if agent.learns_encoder else None
    return PolicyGrads(J, float(kl_each.mean()), g_pi, d_ls, g_W)


def value_loss(agent: Agent, batch: RolloutBatch):
    """L = sum_t (G_t - V(s_t))^2 and its gradient w.r.t. the value MLP."""
    X, _ = agent.encode(batch.features)
    v, acts = agent.vf.forward(X)
    err = v[:, 0] - batch.returns
    L = float(np.sum(err * err))
    grads, _ = agent.vf.backward(acts, (2.0 * err)[:, None])
    return L, grads


def adapt_kl_coeff(lam: float, kl: float, cfg: TrainerConfig) -> float:
    if kl > cfg.beta_high * cfg.kl_target:
        return lam * cfg.alpha
    if kl < cfg.beta_low * cfg.kl_target:
        return lam / cfg.alpha
    return lam


# ---------------------------------------------------------------- toy env
class BanditEnv:
    """One state, one action, reward 1 - |u - target|; every episode is one step."""

    n_nodes = 1
    n_features = 2
    n_actions = 1
    mode = "raw"
    adjacency = None
    weights = None

    def __init__(self, target: float = 0.8):
        self.target = target

    def reset(self, seed: int = 0):
        return self.observe().reshape(-1)

    def observe(self) -> np.ndarray:
        return np.array([[1.0, 0.0]])

    def env_step(self, u):
        u = float(np.clip(np.asarray(u, dtype=float).reshape(-1)[0], 0.0, 1.0))
        V = self.observe()
        return V.reshape(-1), 1.0 - abs(u - self.target), True, {"features": V}


# ---------------------------------------------------------------- training
@dataclass
class TrainResult:
    agent: Agent
    log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    kl_coeff: float = 0.0


LOG_FIELDS = ("iteration", "mean_reward", "mean_kl", "lambda", "policy_loss", "value_loss", "wall_s")


def make_agent(env, cfg: TrainerConfig) -> Agent:
    n_features = getattr(env, "n_features", 2)
    n_nodes = env.n_nodes if hasattr(env, "n_nodes") else env.net.n_nodes
    enc = env.weights if env.mode == "graph" else None
    if enc is not None:
        enc = EncoderWeights(enc.W.copy(), enc.learned)
    return Agent(n_nodes, n_features, env.n_actions, env.mode, env.adjacency, enc,
                 cfg.hidden, cfg.init_log_std, cfg.seed)


def collect(agent: Agent, env, seeds, horizon: int | None, rng: np.random.Generator):
    feats, acts, rews, logps, ends, ep_means = [], [], [], [], [], []
    for seed in seeds:
        env.reset(int(seed))
        V = env.observe()
        rs = []
        done, t = False, 0
        while not done and (horizon is None or t < horizon):
            raw, u, lp = agent.act(V, rng)
            _, r, done, info = env.env_step(u)
            feats.append(V)
            acts.append(raw)
            logps.append(lp)
            rs.append(r)
            V = info["features"]
            t += 1
        rews += rs
        ends.append(len(rews))
        ep_means.append(float(np.mean(rs)))
    batch = RolloutBatch(np.array(feats), np.array(acts), np.array(rews), np.array(logps), ends)
    return batch, ep_means


def _clip(grads, max_norm):
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads


def _check_finite(agent: Agent, iteration: int) -> None:
    for name, arr in agent.named_arrays():
        if not np.all(np.isfinite(arr)):
            raise TrainingDiverged(f"non-finite values in {name} after iteration {iteration}")


def episode_seeds(cfg: TrainerConfig, iteration: int) -> list[int]:
    pool = cfg.seed_pool or cfg.episodes
    base = 1000 + 100 * cfg.seed
    return [base + (iteration * cfg.episodes + e) % pool for e in range(cfg.episodes)]


def train(env_factory: Callable[[], object], cfg: TrainerConfig, out_dir: str | Path | None = None,
          config_hash: str = "", progress: Callable[[dict], None] | None = None) -> TrainResult:
    env = env_factory()
    agent = make_agent(env, cfg)
    rng = np.random.default_rng(cfg.seed)
    lam = cfg.kl_coeff
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(agent)
    log_fh = None
    writer = None
    if out is not None:
        log_fh = (out / "train_log.csv").open("w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    t0 = time.perf_counter()
    try:
        for it in range(cfg.iterations):
            batch, ep_means = collect(agent, env, episode_seeds(cfg, it), cfg.horizon, rng)
            compute_advantages(batch, cfg.gamma, lambda F: agent.value(agent.encode(F)[0]))
            X, _ = agent.encode(batch.features)
            batch.mu_old, batch.log_std_old = agent.policy_forward(X)
            adv = batch.advantages
            if cfg.normalize_advantages and len(adv) > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)

            J0 = None
            for _ in range(cfg.policy_epochs):
                g = ppo_objective(agent, batch, lam, adv)
                J0 = g.J if J0 is None else J0
                params = [*agent.pi.params, agent.log_std]
                grads = [*g.pi, g.log_std]
                if g.W is not None:
                    params.append(agent.encoder.W)
                    grads.append(g.W)
                for p, d in zip(params, _clip(grads, cfg.max_grad_norm)):
                    p += cfg.lr_policy * d  # ascent
            kl = float(gaussian_kl(batch.mu_old, batch.log_std_old, *agent.policy_forward(agent.encode(batch.features)[0])).mean())
            if J0 is None:
                J0 = float(np.sum(adv))

            L = value_loss(agent, batch)[0]
            for _ in range(cfg.value_epochs):
                L, gv = value_loss(agent, batch)
                for p, d in zip(agent.vf.params, _clip(gv, cfg.max_grad_norm)):
                    p -= cfg.lr_value * d
            if cfg.value_epochs:
                L = value_loss(agent, batch)[0]
            _check_finite(agent, it)
            lam_used = lam
            if cfg.policy_epochs:
                lam = adapt_kl_coeff(lam, kl, cfg)

            row = {"iteration": it, "mean_reward": float(np.mean(ep_means)), "mean_kl": kl, "lambda": lam_used,
                   "policy_loss": -J0, "value_loss": L, "wall_s": time.perf_counter() - t0}
            result.log.append(row)
            if writer is not None:
                writer.writerow([row["iteration"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])
                log_fh.flush()
                result.checkpoint = save_checkpoint(agent, out / "checkpoint.json", it, config_hash, lam)
            if progress is not None:
                progress(row)
    finally:
        if log_fh is not None:
            log_fh.close()
    result.kl_coeff = lam
    return result


# ---------------------------------------------------------------- checkpoints
def save_checkpoint(agent: Agent, path: str | Path, iteration: int = 0, config_hash: str = "", kl_coeff: float = 0.0) -> Path:
    """JSON header plus a little-endian float64 sidecar (``<stem>.bin``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bin_path = path.with_suffix(".bin")
    arrays = agent.named_arrays()
    flat = np.concatenate([a.reshape(-1) for _, a in arrays]).astype("<f8")
    bin_path.write_bytes(flat.tobytes())
    header = {
        "format": "dvsl-checkpoint",
        "version": 1,
        "iteration": int(iteration),
        "config_hash": config_hash,
        "mode": agent.mode,
        "n_nodes": agent.n_nodes,
        "n_features": agent.n_features,
        "n_actions": agent.n_actions,
        "hidden": list(agent.hidden),
        "encoder_width": agent.encoder.width if agent.encoder is not None else None,
        "encoder_learned": bool(agent.encoder.learned) if agent.encoder is not None else None,
        "adjacency": agent.A.T.astype(int).tolist() if agent.A is not None else None,
        "kl_coeff": kl_coeff,
        "data_file": bin_path.name,
        "dtype": "<f8",
        "arrays": [{"name": k, "shape": list(a.shape)} for k, a in arrays],
    }
    path.write_text(json.dumps(header, indent=2) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[Agent, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header = json.loads(path.read_text())
    if header.get("format") != "dvsl-checkpoint":
        raise ValueError(f"{path} is not a checkpoint header")
    flat = np.frombuffer((path.parent / header["data_file"]).read_bytes(), dtype="<f8")
    enc = None
    if header["mode"] == "graph":
        enc = EncoderWeights(np.zeros((header["encoder_width"], header["n_features"])), header["encoder_learned"])
    agent = Agent(header["n_nodes"], header["n_features"], header["n_actions"], header["mode"],
                  header["adjacency"], enc, header["hidden"], 0.0)
    named = dict(agent.named_arrays())
    k = 0
    for spec in header["arrays"]:
        arr = named.get(spec["name"])
        if arr is None or list(arr.shape) != spec["shape"]:
            raise ValueError(f"checkpoint array {spec['name']} does not fit this network")
        n = arr.size
        arr[...] = flat[k:k + n].reshape(arr.shape)
        k += n
    if k != flat.size:
        raise ValueError("checkpoint data size does not match its header")
    return agent, header
