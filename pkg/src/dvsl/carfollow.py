"""Car-following kernels (Krauss, IDM) and time-to-collision.

All functions broadcast over numpy arrays so the simulator can call them on
every vehicle at once; scalars work too.
"""

from __future__ import annotations

import numpy as np

from .config import CarFollowParams


def krauss_safe_speed(gap, leader_speed, follower_speed, b=4.5, tau=1.0):
    """Largest speed from which the follower can still avoid hitting a leader
    that brakes at ``b``.

    v_safe = v_l + (g - v_l * tau) / ((v_l + v_f) / (2 b) + tau)
    """
    gap = np.asarray(gap, dtype=float)
    v_l = np.asarray(leader_speed, dtype=float)
    v_f = np.asarray(follower_speed, dtype=float)
    out = v_l + (gap - v_l * tau) / ((v_l + v_f) / (2.0 * b) + tau)
    # inf gap (no leader) must stay inf rather than nan
    out = np.where(np.isinf(gap), np.inf, out)
    return out if out.ndim else float(out)


def krauss_next_speed(gap, leader_speed, v, v_desired, p: CarFollowParams, dt=1.0, noise=None):
    """Commanded Krauss speed: min(v_safe, v + a dt, v_desired), floored at 0.

    ``gap`` here is the bumper-to-bumper distance; the minimum standstill gap
    ``p.s0`` is removed before the safe-speed term.
    """
    g = np.maximum(np.asarray(gap, dtype=float) - p.s0, 0.0)
    vs = krauss_safe_speed(g, leader_speed, v, p.b, p.tau)
    out = np.minimum(np.minimum(vs, np.asarray(v, dtype=float) + p.a_max * dt), v_desired)
    if noise is not None and p.sigma > 0:
        out = out - p.sigma * p.a_max * dt * noise
    out = np.maximum(out, 0.0)
    return out if np.ndim(out) else float(out)


def idm_accel(gap, v, dv, v_desired, p: CarFollowParams):
    """IDM acceleration, clamped to ``[-b_emergency, a_max]``.

    ``gap`` is the bumper-to-bumper distance (``inf`` for no leader) and
    ``dv = v - v_leader`` the approach rate.
    """
    gap = np.asarray(gap, dtype=float)
    v = np.asarray(v, dtype=float)
    dv = np.asarray(dv, dtype=float)
    s_star = p.s0 + v * p.T + v * dv / (2.0 * np.sqrt(p.a_max * p.b))
    s_star = np.maximum(s_star, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        interaction = np.where(np.isinf(gap), 0.0, (s_star / np.maximum(gap, 1e-6)) ** 2)
    free = (v / np.asarray(v_desired, dtype=float)) ** p.delta
    a = p.a_max * (1.0 - free - interaction)
    a = np.clip(a, -p.b_emergency, p.a_max)
    return a if a.ndim else float(a)


def ttc(gap, follower_speed, leader_speed):
    """Time to collision for a closing pair, ``None``/``nan`` otherwise.

    ``gap`` is leader rear minus follower front. Overlapping pairs (negative
    gap) report 0.
    """
    if np.ndim(gap) == 0 and np.ndim(follower_speed) == 0 and np.ndim(leader_speed) == 0:
        closing = follower_speed - leader_speed
        if closing <= 0:
            return None
        return max(gap, 0.0) / closing
    gap = np.asarray(gap, dtype=float)
    closing = np.asarray(follower_speed, dtype=float) - np.asarray(leader_speed, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(closing > 0, np.maximum(gap, 0.0) / closing, np.nan)
    return out
