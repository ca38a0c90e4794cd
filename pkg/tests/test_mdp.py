import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dvsl.config import KMH, EpisodeConfig, SafetyConfig, VslBounds, reduced_scenario
from dvsl.control import NoVsl
from dvsl.harness import run_episode
from dvsl.mdp import (
    DvslEnv, EpisodeDone, decode_action, horizon_reward, safety_term, sim_reward_sample, speed_term,
)
from dvsl.net import build_network
from dvsl.sim import Simulator
from oracles import brute_force_npc, fuzzed_sim

SAFE = SafetyConfig()
BOUNDS = VslBounds()


def short_cfg(warmup=600.0, end=900.0, horizon=30.0, scale=None):
    cfg = reduced_scenario()
    cfg.episode = EpisodeConfig(warmup, end, horizon)
    if scale is not None:
        cfg.demand.scale = scale
    return cfg


# ---------------------------------------------------------------- action
def test_decode_examples():
    assert np.allclose(decode_action(np.zeros(5), BOUNDS), 40 * KMH)
    assert np.all(decode_action(np.ones(5), BOUNDS) == BOUNDS.v_max)
    assert decode_action([0.5], BOUNDS)[0] == pytest.approx(70 * KMH)
    assert np.allclose(decode_action([-3.0, 7.0], BOUNDS), [BOUNDS.v_min, BOUNDS.v_max])


@given(st.floats(-1, 2), st.floats(-1, 2))
def test_decode_monotone_and_bounded(a, b):
    va, vb = decode_action([a, b], BOUNDS)
    assert BOUNDS.v_min - 1e-12 <= va <= BOUNDS.v_max + 1e-12
    if a <= b:
        assert va <= vb + 1e-12


# ---------------------------------------------------------------- reward terms
def test_speed_term_examples():
    assert speed_term([SAFE.v_max] * 6, SAFE) == pytest.approx(1.0, abs=1e-12)
    assert speed_term([SAFE.v_max] * 5 + [SAFE.v_c_min - 0.1], SAFE) == 0.0
    assert speed_term([(SAFE.v_max + SAFE.v_c_min) / 2] * 6, SAFE) == pytest.approx(0.5)
    assert speed_term([np.nan] * 6, SAFE) == 1.0
    with pytest.raises(ValueError):
        speed_term([], SAFE)


def test_safety_term_examples():
    assert safety_term([], 10, SAFE) == (0, 1.0)
    npc, norm = safety_term([1.0, 2.0, 2.9, 3.0, 8.0], 10, SAFE)
    assert npc == 3 and norm == pytest.approx(0.7)
    assert safety_term([], 0, SAFE) == (0, 1.0)


def test_horizon_reward_examples():
    assert horizon_reward([(1, 1)] * 4).r == 1.0
    assert horizon_reward([(0.5, 0.8)]).r == pytest.approx(0.65)
    with pytest.raises(ValueError):
        horizon_reward([])


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=20))
def test_horizon_reward_bounded(samples):
    assert 0.0 <= horizon_reward(samples).r <= 1.0


# ---------------------------------------------------------------- TTC oracle
def test_safety_term_matches_brute_force_on_fuzzed_states():
    rng = np.random.default_rng(11)
    cfg = short_cfg(scale=0.0)
    net = build_network(cfg)
    for _ in range(100):
        sim = fuzzed_sim(rng, cfg, net)
        npc, _ = safety_term(sim.closing_ttc(), sim.active_count, SAFE)
        assert npc == brute_force_npc(sim, SAFE.ttc_threshold_s)


def test_safety_term_matches_brute_force_in_traffic():
    cfg = short_cfg(scale=1.0)
    sim = Simulator(build_network(cfg), cfg, seed=4, record_events=False)
    sim.run_until(2400)
    for _ in range(5):
        sim.run_until(sim.clock + 20)
        npc, _ = safety_term(sim.closing_ttc(), sim.active_count, SAFE)
        assert npc == brute_force_npc(sim, SAFE.ttc_threshold_s)


# ---------------------------------------------------------------- environment
@pytest.fixture(scope="module")
def env():
    return DvslEnv(short_cfg())


def test_episode_has_expected_length(env):
    env.reset(3)
    steps, done = 0, False
    while not done:
        _, r, done, info = env.env_step(np.full(5, 0.5))
        assert 0.0 <= r <= 1.0
        steps += 1
    assert steps == env.cfg.episode.n_steps == 10
    assert info["t"] == env.cfg.episode.episode_end_s
    with pytest.raises(EpisodeDone):
        env.env_step(np.full(5, 0.5))


def test_reduced_scenario_episode_is_twenty_steps():
    assert reduced_scenario().episode.n_steps == 20


def test_action_arity(env):
    env.reset(3)
    with pytest.raises(ValueError):
        env.env_step(np.full(4, 0.5))


def test_reset_determinism(env):
    a = env.reset(5)
    b = env.reset(5)
    assert np.array_equal(a, b)
    states = [env.reset(s) for s in range(10)]
    assert len({x.tobytes() for x in states}) > 1


def test_state_dims(env):
    assert env.state_dim == 44 and env.n_actions == 5
    assert env.reset(1).shape == (44,)
    raw = DvslEnv(short_cfg(), mode="raw")
    assert raw.reset(1).shape == (44,)


def test_neutral_action_equals_no_vsl():
    cfg = short_cfg(warmup=600.0, end=900.0)
    env = DvslEnv(cfg, record_events=True)
    env.reset(8)
    done = False
    while not done:
        _, _, done, _ = env.env_step(np.ones(5))
    ref = run_episode(NoVsl(cfg.vsl), cfg, 8)
    assert env.sim.events == ref.events


def test_reward_csv_header_once(tmp_path):
    cfg = short_cfg(warmup=600.0, end=660.0)
    path = tmp_path / "rewards.csv"
    env = DvslEnv(cfg, reward_csv=path)
    for seed in (1, 2):
        env.reset(seed)
        done = False
        while not done:
            _, _, done, _ = env.env_step(np.full(5, 0.25))
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "v_ma_term", "npc_term", "reward", *(f"action_{i}" for i in range(5))]
    assert len(rows) == 1 + 2 * 2
    assert float(rows[1][4]) == pytest.approx(0.25)


@settings(max_examples=10)
@given(seed=st.integers(0, 1000), scale=st.floats(0.1, 1.5))
def test_sim_reward_sample_in_unit_square(seed, scale):
    cfg = short_cfg(scale=scale)
    sim = Simulator(build_network(cfg), cfg, seed=seed, record_events=False)
    sim.run_until(300)
    v, n = sim_reward_sample(sim)
    assert 0.0 <= v <= 1.0 and 0.0 <= n <= 1.0
