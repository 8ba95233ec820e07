import re

import numpy as np
import pytest
from hypothesis import given, strategies as st

from forcevla.analytics import (MISSING, EvalRun, LoadCurve, RouterTrace, TableError,
                                TraceError, TraceRecord, aggregate_eval, curve_from_csv,
                                curve_to_csv, curve_to_svg, emit_curves, episodes_from_csv,
                                episodes_to_csv, interval_bounds, percentile_load, write_table)
from forcevla.sim import EpisodeLog

from oracles import interval_load_bruteforce


def records_from(tokens, n_experts, episode=0, per_step=1):
    """Build trace records from (selected, top1_prob) pairs; the rest of the mass is spread."""
    out = []
    for i, (sel, p) in enumerate(tokens):
        rest = (1.0 - p) / (n_experts - 1) if n_experts > 1 else 0.0
        probs = [rest] * n_experts
        probs[sel] = p
        out.append(TraceRecord(episode, i // per_step, i % per_step, "vl", sel, tuple(probs)))
    return out


def random_tokens(rng, n, n_experts):
    return [(int(rng.integers(n_experts)), float(rng.uniform(1.0 / n_experts, 1.0)))
            for _ in range(n)]


# -- load curve -------------------------------------------------------------------------
def test_interval_bounds_formula():
    b = interval_bounds(7)
    assert len(b) == 100
    assert b[0] == (0, 0) and b[14] == (0, 1) and b[15] == (1, 1) and b[99] == (6, 7)
    assert interval_bounds(100)[37] == (37, 38)


def test_constant_trace():
    curve = percentile_load([records_from([(2, 0.9)] * 200, 4)], 4)
    assert curve.values.shape == (100, 4)
    np.testing.assert_allclose(curve.values[:, 2], 0.9, rtol=0, atol=1e-15)
    assert not curve.values[:, [0, 1, 3]].any()


def test_hundred_tokens_is_raw_attribution():
    rng = np.random.default_rng(0)
    toks = random_tokens(rng, 100, 3)
    curve = percentile_load([records_from(toks, 3)], 3)
    for j, (sel, p) in enumerate(toks):
        expected = np.zeros(3)
        expected[sel] = p
        np.testing.assert_array_equal(curve.values[j], expected)


def test_seven_token_episode_matches_bruteforce():
    toks = [(0, 0.55), (1, 0.8), (1, 0.61), (2, 0.9), (0, 0.4), (2, 0.7), (1, 0.95)]
    curve = percentile_load([records_from(toks, 3)], 3)
    oracle = np.array(interval_load_bruteforce([toks], 3))
    assert np.abs(curve.values - oracle).max() <= 1e-12


@given(st.lists(st.integers(1, 250), min_size=1, max_size=5), st.integers(1, 5),
       st.integers(0, 2**31 - 1))
def test_matches_bruteforce_random(lengths, n_experts, seed):
    rng = np.random.default_rng(seed)
    eps = [random_tokens(rng, n, n_experts) for n in lengths]
    curve = percentile_load([records_from(t, n_experts, i) for i, t in enumerate(eps)], n_experts)
    oracle = np.array(interval_load_bruteforce(eps, n_experts))
    assert np.abs(curve.values - oracle).max() <= 1e-12


@given(st.lists(st.integers(1, 150), min_size=2, max_size=5), st.integers(0, 2**31 - 1))
def test_episode_order_invariant_and_bounded(lengths, seed):
    rng = np.random.default_rng(seed)
    eps = [records_from(random_tokens(rng, n, 3), 3, i) for i, n in enumerate(lengths)]
    a = percentile_load(eps, 3).values
    perm = rng.permutation(len(eps))
    b = percentile_load([eps[i] for i in perm], 3).values
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)
    assert (a >= 0).all() and (a.sum(axis=1) <= 1 + 1e-9).all()


def test_row_sum_equals_mean_top1():
    rng = np.random.default_rng(3)
    toks = random_tokens(rng, 400, 4)
    curve = percentile_load([records_from(toks, 4)], 4)
    for j, (lo, hi) in enumerate(interval_bounds(400)):
        assert curve.values[j].sum() == pytest.approx(np.mean([p for _, p in toks[lo:hi]]),
                                                       abs=1e-12)


def test_full_attribution_alternative():
    recs = records_from([(0, 0.7)] * 50, 2)
    curve = percentile_load([recs], 2, attribution="full")
    np.testing.assert_allclose(curve.values, [[0.7, 0.3]] * 100, atol=1e-15)


def test_zero_episodes_error():
    with pytest.raises(TraceError):
        percentile_load([], 3)


def test_load_curve_needs_100_rows():
    with pytest.raises(TraceError):
        LoadCurve(np.zeros((99, 3)))


# -- emission -----------------------------------------------------------------------------
def test_curve_csv_and_svg(tmp_path):
    rng = np.random.default_rng(1)
    curve = percentile_load([records_from(random_tokens(rng, 123, 4), 4)], 4, task="insertion")
    text = curve_to_csv(curve)
    lines = text.splitlines()
    assert len(lines) == 101
    assert lines[0] == "percentile,expert_0,expert_1,expert_2,expert_3"
    np.testing.assert_array_equal(curve_from_csv(text).values, curve.values)
    svg = curve_to_svg(curve)
    assert len(re.findall(r"<polyline\b", svg)) == 4
    assert "0%" in svg and "100%" in svg and "1.00" in svg and "0.00" in svg
    paths = emit_curves(curve, tmp_path, png=True)
    assert paths["png"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    again = emit_curves(curve, tmp_path / "b", png=True)
    for k in ("csv", "svg", "png"):
        assert paths[k].read_bytes() == again[k].read_bytes()


# -- router trace file --------------------------------------------------------------------------
def test_trace_roundtrip_and_header():
    rng = np.random.default_rng(2)
    tr = RouterTrace(3, records_from(random_tokens(rng, 20, 3), 3, per_step=4))
    text = tr.to_csv()
    assert text.splitlines()[0] == "episode,timestep,token,role,selected,p0,p1,p2"
    back = RouterTrace.from_csv(text)
    assert back.records == tr.records
    assert back.to_csv() == text


def test_trace_validation():
    bad = RouterTrace(2, [TraceRecord(0, 0, 0, "vl", 0, (0.6, 0.5))])
    with pytest.raises(TraceError):
        bad.validate()
    with pytest.raises(TraceError):
        RouterTrace(2, [TraceRecord(0, 0, 0, "vl", 2, (0.5, 0.5))]).validate()
    RouterTrace(2, [TraceRecord(0, 0, 0, "vl", 1, (0.25, 0.75))]).validate()


def test_by_episode_orders_and_filters_roles():
    recs = [TraceRecord(1, 2, 0, "vl", 0, (1.0,)), TraceRecord(1, 0, 1, "force", 0, (1.0,)),
            TraceRecord(0, 0, 0, "vl", 0, (1.0,)), TraceRecord(1, 0, 0, "vl", 0, (1.0,))]
    groups = RouterTrace(1, recs).by_episode()
    assert list(groups) == [0, 1]
    assert [(r.timestep, r.token) for r in groups[1]] == [(0, 0), (0, 1), (2, 0)]
    assert len(RouterTrace(1, recs).by_episode(roles=["force"])[1]) == 1


# -- success tables ------------------------------------------------------------------------------
def test_single_run_percent():
    assert EvalRun("FVLMoE", "nominal", 0, 7, 10).percent == 70.0


def test_three_seed_mean_and_order(tmp_path):
    runs = [EvalRun("A", "occlusion", s, k, 10) for s, k in ((2, 8), (0, 6), (1, 7))]
    runs.append(EvalRun("B", "nominal", 0, 5, 10))
    table = aggregate_eval(runs, variants=["B", "A"], modes=["nominal", "occlusion"])
    assert table.mean("A", "occlusion") == pytest.approx(70.0)
    assert table.cell("A", "occlusion").per_seed == [(0, 60.0), (1, 70.0), (2, 80.0)]
    assert table.missing == [("B", "occlusion"), ("A", "nominal")]
    csv_text = table.to_csv({"occlusion": "Visual Occlusion"})
    assert csv_text.splitlines() == ["model,nominal,Visual Occlusion",
                                     f"B,50.0,{MISSING}", f"A,{MISSING},70.0"]
    paths = write_table(table, tmp_path)
    assert paths["per_seed"].read_text().splitlines()[1:4] == [
        "B,nominal,0,5,10,50.0", f"B,occlusion,{MISSING},,,", f"A,nominal,{MISSING},,,"]


def test_duplicate_seed_rejected():
    with pytest.raises(TableError):
        aggregate_eval([EvalRun("A", "m", 0, 1, 2), EvalRun("A", "m", 0, 2, 2)])


def test_episode_log_csv_roundtrip():
    logs = [EpisodeLog(0, 123, "occlusion", True, 42, "", 0.00012, 0.0185),
            EpisodeLog(1, 456, "occlusion", False, 400, "timeout", -0.003, 0.001)]
    text = episodes_to_csv(logs)
    assert episodes_from_csv(text) == logs
    run = EvalRun.from_logs("A", "occlusion", 0, logs)
    assert (run.successes, run.trials) == (1, 2)
