import csv

import pytest

from dvsl.config import EpisodeConfig, reduced_scenario
from dvsl.control import NoVsl
from dvsl.harness import (
    MetricsRecord, compute_metrics, delta_pct, format_table, parse_seeds, read_detector_csv, read_event_log,
    run_compare, run_episode, run_eval, write_detector_csv, write_event_log,
)


def tiny_cfg():
    cfg = reduced_scenario()
    cfg.episode = EpisodeConfig(300.0, 420.0, 30.0)
    return cfg


def ev(t, kind, vid=None, **kw):
    d = {"t": float(t), "event": kind, **kw}
    if vid is not None:
        d["id"] = vid
    return d


# A stands 10 s, B 20 s, C never
TRACE = [
    ev(0, "spawn", 1), ev(0, "spawn", 2), ev(0, "spawn", 3),
    ev(10, "halt", 1), ev(20, "resume", 1),
    ev(30, "halt", 2), ev(50, "resume", 2),
    ev(60, "sample", npc=2, active=3), ev(80, "arrive", 1), ev(85, "arrive", 2), ev(90, "arrive", 3),
    ev(100, "sample", npc=1, active=0),
]


def test_awt_hand_counted_trace():
    m = compute_metrics(TRACE, [], (0, 100))
    assert m.TST == 30.0 and m.AWT == pytest.approx(10.0) and m.NPC == 3.0


def test_free_flow_zero_waiting():
    trace = [ev(0, "spawn", 1), ev(50, "arrive", 1), ev(100, "sample", npc=0, active=0)]
    m = compute_metrics(trace, [], (0, 100))
    assert m.TST == 0.0 and m.AWT == 0.0


def test_bt_extrapolation():
    rows = [(30.0 * k, "MA_0", 50, 0.1, 20.0) for k in range(1, 11)]
    rows += [(30.0 * k, "AA_0", 99, 0.1, 20.0) for k in range(1, 11)]
    m = compute_metrics(TRACE + [ev(300, "sample", npc=0, active=0)], rows, (0, 300))
    assert m.BT == pytest.approx(6000.0)


def test_window_outside_log():
    with pytest.raises(ValueError):
        compute_metrics(TRACE, [], (0, 500))
    with pytest.raises(ValueError):
        compute_metrics(TRACE, [], (50, 50))


@pytest.fixture(scope="module")
def episode_log():
    cfg = tiny_cfg()
    sim = run_episode(NoVsl(cfg.vsl), cfg, seed=2)
    return sim.events, sim.detector_rows


def test_split_window_additivity(episode_log):
    events, rows = episode_log
    whole = compute_metrics(events, rows, (300, 420))
    a = compute_metrics(events, rows, (300, 360))
    b = compute_metrics(events, rows, (360, 420))
    assert a.TST + b.TST == whole.TST
    assert a.NPC + b.NPC == whole.NPC
    assert (a.BT + b.BT) / 2 == pytest.approx(whole.BT)


def test_log_files_round_trip(tmp_path, episode_log):
    events, rows = episode_log
    assert read_event_log(write_event_log(events, tmp_path / "e.jsonl")) == events
    back = read_detector_csv(write_detector_csv(rows, tmp_path / "d.csv"))
    assert [r[:3] for r in back] == [tuple(r[:3]) for r in rows]
    assert compute_metrics(events, back, (300, 420)) == compute_metrics(events, rows, (300, 420))


def test_parse_seeds():
    assert parse_seeds("1..8") == list(range(1, 9))
    assert parse_seeds("1,2, 5") == [1, 2, 5]
    assert parse_seeds("1..3,7") == [1, 2, 3, 7]
    for bad in ("", "5..1", "x"):
        with pytest.raises(ValueError):
            parse_seeds(bad)


def test_eval_records_and_determinism(tmp_path):
    cfg = tiny_cfg()
    seeds = parse_seeds("1..8")
    a = run_eval("NoVsl", seeds, cfg, tmp_path / "a", keep_logs=False)
    b = run_eval("NoVsl", seeds, cfg, tmp_path / "b", keep_logs=False)
    lines = list(csv.reader(a.summary_csv.open()))
    assert lines[0] == ["controller", "seed", "TST", "AWT", "BT", "NPC"]
    assert len(lines) == 1 + 8 + 1 and lines[-1][1] == "mean"
    assert a.summary_csv.read_bytes() == b.summary_csv.read_bytes()


def test_eval_missing_checkpoint_fails_first(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_eval("Policy", [1], tiny_cfg(), tmp_path, checkpoint=tmp_path / "nope.json")
    assert not (tmp_path / "logs").exists()


def test_compare_self_deltas_zero(tmp_path):
    results, means, path = run_compare(["NoVsl", "RuleBased"], [1, 2], tiny_cfg(), tmp_path, keep_logs=False)
    rows = list(csv.DictReader(path.open()))
    assert [r["controller"] for r in rows] == ["NoVsl", "RuleBased"]
    assert all(float(rows[0][f"delta_{m}_pct"]) == 0.0 for m in ("TST", "AWT", "BT", "NPC"))
    assert "RuleBased" in format_table(means)


def test_delta_pct():
    assert delta_pct(90, 100) == pytest.approx(-10.0)
    assert delta_pct(0, 0) == 0.0
    r = MetricsRecord(1, "x", 1, 2, 3, 4)
    assert r.AWT == 2
