"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criteria 9 to 11 share a session fixture that trains graph-mode and raw-mode
policies once on the reduced scenario shipped in ``configs/reduced.json``.
"""

import csv
import time
from pathlib import Path

import numpy as np
import pytest

from dvsl.cli import main as cli_main
from dvsl.config import EpisodeConfig, full_scenario, load_config
from dvsl.control import ControllerKind
from dvsl.graphstate import encode, message_pass
from dvsl.harness import comparison_rows, run_compare
from dvsl.mdp import DvslEnv, safety_term
from dvsl.net import build_network
from dvsl.ppo import BanditEnv, train
from dvsl.sim import Simulator
from gradcheck import check_encoder, check_policy, check_value, random_problem
from oracles import brute_force_npc, fuzzed_sim, naive_message_pass

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def reduced():
    return load_config(CONFIGS / "reduced.json")


# ---------------------------------------------------------------- 1
def test_c01_safety_oracle(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    cfg = full_scenario()
    cfg.demand.scale = 0.0
    net = build_network(cfg)
    mismatches = 0
    for _ in range(1000):
        sim = fuzzed_sim(rng, cfg, net, n_max=50)
        npc, _ = safety_term(sim.closing_ttc(), sim.active_count, cfg.safety)
        mismatches += npc != brute_force_npc(sim, cfg.safety.ttc_threshold_s)
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 30
    acceptance_report(1, ok, f"safety oracle: {mismatches} mismatches / 1000 states, {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 2
def test_c02_encoder_oracle(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        n, d = int(rng.integers(1, 51)), int(rng.integers(1, 9))
        E = (rng.random((n, n)) < rng.random()).astype(int)
        V = rng.normal(size=(n, 2))
        W = rng.normal(size=(d, 2))
        worst = max(worst, float(np.max(np.abs(message_pass(V, E, W) - naive_message_pass(V, E, W)))))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and dt < 5
    acceptance_report(2, ok, f"encoder oracle: max abs error {worst:.2e}, {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 3
def test_c03_gradient_checks(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = {"policy": 0.0, "value": 0.0, "W": 0.0}
    for k in range(50):
        agent, batch, lam = random_problem(rng, mode="graph" if k % 2 == 0 else "raw")
        assert agent.pi.n_params() <= 200 and agent.vf.n_params() <= 200
        worst["policy"] = max(worst["policy"], check_policy(agent, batch, lam))
        worst["value"] = max(worst["value"], check_value(agent, batch))
        if agent.learns_encoder:
            worst["W"] = max(worst["W"], check_encoder(agent, batch, lam))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance_report(3, ok, f"gradient checks (max rel error): {detail}, {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 4
def test_c04_reward_bounds(acceptance_report):
    """10,000 env steps with random actions under random demand. Steps are
    1 s long with a 1 s sampling period so the run fits a test budget."""
    rng = np.random.default_rng(4)
    steps = violations = 0
    lo, hi = 1.0, 0.0
    for ep in range(10):
        cfg = full_scenario()
        cfg.control_update_s = 1.0
        warm = float(rng.choice([300.0, 900.0, 1800.0, 2700.0]))
        cfg.episode = EpisodeConfig(warm, warm + 1000.0, 1.0)
        cfg.demand.scale = float(rng.uniform(0.1, 1.6))
        env = DvslEnv(cfg, mode="raw", cache_warmup=False)
        env.reset(int(rng.integers(1 << 20)))
        done = False
        while not done:
            _, r, done, _ = env.env_step(rng.uniform(-0.2, 1.2, size=5))
            steps += 1
            violations += not (0.0 <= r <= 1.0)
            lo, hi = min(lo, r), max(hi, r)
    ok = violations == 0 and steps == 10_000
    acceptance_report(4, ok, f"reward bounds: {violations} violations in {steps} steps, r in [{lo:.3f}, {hi:.3f}]")
    assert ok


# ---------------------------------------------------------------- 5
def test_c05_conservation_and_gaps(acceptance_report):
    t0 = time.perf_counter()
    cfg = full_scenario()
    sim = Simulator(build_network(cfg), cfg, seed=5, record_events=False)
    broken = 0
    min_gap = np.inf
    peak = 0
    while sim.clock < 18_000:
        sim.step()
        broken += sim.spawned_total != sim.active_count + sim.arrived_total
        gaps = sim.leader_gaps()
        if gaps.size:
            min_gap = min(min_gap, float(gaps.min()))
        peak = max(peak, sim.active_count)
    dt = time.perf_counter() - t0
    ok = broken == 0 and min_gap >= 0.0 and dt < 120
    acceptance_report(5, ok, f"conservation: {broken} broken steps, min gap {min_gap:.3f} m, "
                             f"peak {peak} vehicles, {sim.spawned_total} spawned, {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 6
def test_c06_eval_determinism(acceptance_report, tmp_path):
    cfg_path = CONFIGS / "reduced.json"
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli_main(["eval", "--config", str(cfg_path), "--seeds", "1..8", "--controller", "NoVsl",
                         "--out", str(out), "--no-logs"]) == 0
        outs.append((out / "summary_NoVsl.csv").read_bytes())
    ok = outs[0] == outs[1] and outs[0].count(b"\n") == 10
    acceptance_report(6, ok, f"determinism: summary CSVs identical={outs[0] == outs[1]} ({len(outs[0])} bytes)")
    assert ok


# ---------------------------------------------------------------- 7
def test_c07_dimensions(acceptance_report):
    cfg = full_scenario()
    net = build_network(cfg)
    sim = Simulator(net, cfg, seed=0, record_events=False)
    raw = encode(sim.read_detectors(), net, None, "raw")
    env = DvslEnv(cfg)
    dims = (net.n_nodes, raw.shape[0], env.n_actions, env.state_dim)
    ok = dims == (22, 44, 5, 44)
    acceptance_report(7, ok, f"dimensions: nodes {dims[0]}, raw state {dims[1]}, actions {dims[2]}, graph state {dims[3]}")
    assert ok


# ---------------------------------------------------------------- 8
def test_c08_bandit_convergence(acceptance_report):
    t0 = time.perf_counter()
    cfg = reduced().trainer
    cfg.iterations, cfg.episodes, cfg.hidden, cfg.lr_policy = 200, 4, (8,), 0.01
    res = train(lambda: BanditEnv(0.8), cfg)
    agent = res.agent
    mu = float(agent.policy_forward(agent.encode(BanditEnv().observe())[0])[0][0, 0])
    dt = time.perf_counter() - t0
    ok = abs(mu - 0.8) <= 0.05 and dt < 60
    acceptance_report(8, ok, f"bandit: mean {mu:.4f} after {cfg.iterations} iterations (target 0.8), {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 9 to 11
@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    cfg = reduced()
    out = {}
    for mode in ("graph", "raw"):
        run_cfg = reduced()
        run_cfg.encoder.mode = mode
        d = tmp_path_factory.mktemp(f"train_{mode}")
        t0 = time.perf_counter()
        res = train(lambda: DvslEnv(run_cfg), run_cfg.trainer, d, run_cfg.digest())
        out[mode] = (res, d, time.perf_counter() - t0)
    return cfg, out


def test_c09_learning_signal(acceptance_report, trained):
    cfg, runs = trained
    res, _, dt = runs["graph"]
    rewards = [row["mean_reward"] for row in res.log]
    first, last = np.mean(rewards[:5]), np.mean(rewards[-5:])
    rel = last / first - 1.0
    tc = cfg.trainer
    ok = rel >= 0.05 and dt < 15 * 60 and tc.iterations == 40 and tc.episodes == 2
    acceptance_report(9, ok, f"learning signal: first5 {first:.4f}, last5 {last:.4f}, gain {100 * rel:+.2f}%, "
                             f"{dt:.0f} s training")
    assert ok


def test_c10_directional_result(acceptance_report, trained, tmp_path):
    cfg, runs = trained
    ckpt = runs["graph"][0].checkpoint
    t0 = time.perf_counter()
    _, means, _ = run_compare([ControllerKind.NO_VSL], list(range(1, 9)), cfg, tmp_path, {"graph-policy": ckpt},
                              keep_logs=False)
    base, pol = means
    dt = time.perf_counter() - t0 + runs["graph"][2]
    ok = pol.AWT < base.AWT and pol.NPC < base.NPC and dt < 30 * 60
    acceptance_report(10, ok, f"directional: AWT {base.AWT:.2f} -> {pol.AWT:.2f} s, "
                              f"NPC {base.NPC:.1f} -> {pol.NPC:.1f}, {dt:.0f} s incl. training")
    assert ok


def test_c11_ablation_hook(acceptance_report, trained, tmp_path):
    cfg, runs = trained
    (g, gdir, _), (r, rdir, _) = runs["graph"], runs["raw"]
    heads = [next(csv.reader((d / "train_log.csv").open())) for d in (gdir, rdir)]
    comparable = heads[0] == heads[1] and len(g.log) == len(r.log) == cfg.trainer.iterations
    _, means, path = run_compare(["NoVsl"], [1, 2], cfg, tmp_path,
                                 {"graph-policy": g.checkpoint, "raw-policy": r.checkpoint}, keep_logs=False)
    rows = comparison_rows(means)
    ok = comparable and [row[0] for row in rows] == ["NoVsl", "graph-policy", "raw-policy"] and path.exists()
    acceptance_report(11, ok, f"ablation: logs comparable={comparable}, table rows {[row[0] for row in rows]}")
    assert ok
