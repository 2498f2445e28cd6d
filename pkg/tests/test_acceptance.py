"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line."""

import dataclasses
import json
import time
from unittest import mock

import numpy as np
import pytest

from wdmoe import allocator, cli, selection
from wdmoe.channel import DeviceProfile, RadioConfig, sample_channel
from wdmoe.checks import random_toy_allocation, random_toy_selection, run_checks
from wdmoe.config import parse_config
from wdmoe.latency import ModelDims
from wdmoe.oracle import exhaustive_selection, grid_search_allocation, selection_wlr
from wdmoe.simulator import (
    BASELINE,
    FULL,
    NO_BANDWIDTH,
    NO_SELECTION,
    Scenario,
    default_scenario,
    default_trace,
    run_policies,
    sweep_bandwidth,
)
from wdmoe.trace import load_trace, synth_trace, write_trace

TOY = ModelDims(num_blocks=4)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def test_criterion_1_allocator_matches_grid_oracle(report):
    rng = np.random.default_rng(1)
    radio = RadioConfig()
    worst, start = -np.inf, time.perf_counter()
    for t in range(50):
        devices, channels, sel = random_toy_allocation(rng, 2 + t % 2, radio, TOY)
        alloc, _ = allocator.allocate(sel, devices, channels, TOY, radio)
        got = allocator.objective(alloc, sel, devices, channels, TOY, radio)
        best = grid_search_allocation(sel, devices, channels, TOY, radio).best_value
        worst = max(worst, got / best - 1.0)
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-4 and elapsed < 60, f"worst relative gap {worst:+.2e} over 50 instances in {elapsed:.1f} s")


def test_criterion_2_objective_is_convex(report):
    rng = np.random.default_rng(2)
    radio = RadioConfig()
    devices, channels, sel = random_toy_allocation(rng, 3, radio, TOY)
    scale = allocator.objective(allocator.uniform_allocation(3, radio), sel, devices, channels, TOY, radio)
    start = time.perf_counter()
    worst = allocator.convexity_probe(sel, devices, channels, TOY, radio, rng, 10_000)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 * scale and elapsed < 10
    report(2, ok, f"worst midpoint violation {worst / scale:.1e} of scale over 10^4 pairs in {elapsed:.2f} s")


def _random_scenario(s):
    rng = np.random.default_rng(1000 + s)
    devices = tuple(
        DeviceProfile(k, float(rng.uniform(10, 300)), compute_flops=float(rng.choice([2e12, 5e12, 1e13, 2e13])))
        for k in range(8)
    )
    scen = Scenario(radio=RadioConfig(), devices=devices, dims=ModelDims(), seed=s, batches=int(rng.integers(5, 11)))
    return scen, synth_trace(s, 32, 64, 8, 1.0)


def test_criterion_3_policy_ordering(report):
    bad = []
    for s in range(20):
        scen, trace = _random_scenario(s)
        r = run_policies(scen, trace, (BASELINE, FULL, NO_SELECTION, NO_BANDWIDTH))
        lat = {p: v.total_latency_s for p, v in r.items()}
        eps = 1e-12 * lat[BASELINE]
        if not (lat[FULL] <= lat[NO_SELECTION] + eps <= lat[BASELINE] + 2 * eps and lat[FULL] <= lat[NO_BANDWIDTH] + eps):
            bad.append(s)
    report(3, not bad, f"ordering violated in {len(bad)} of 20 scenarios {bad}")


def test_criterion_4_default_scenario_gains(report):
    r = run_policies(default_scenario(batches=100), default_trace(), (BASELINE, NO_SELECTION, NO_BANDWIDTH))
    base = r[BASELINE].total_latency_s
    bw_gain = 1 - r[NO_SELECTION].total_latency_s / base
    sel_gain = 1 - r[NO_BANDWIDTH].total_latency_s / base
    report(
        4,
        bw_gain >= 0.15 and sel_gain > 0,
        f"bandwidth allocation alone {bw_gain:.2%}, expert selection alone {sel_gain:.2%}",
    )


def test_criterion_5_bandwidth_sweep(report):
    b = np.linspace(20e6, 200e6, 10)
    curves = sweep_bandwidth(default_scenario(batches=30), default_trace(), b, (BASELINE, FULL))
    base = [v for _, v in curves[BASELINE]]
    full = [v for _, v in curves[FULL]]
    mono = all(y <= x for c in (base, full) for x, y in zip(c, c[1:]))
    below = all(f <= g for f, g in zip(full, base))
    report(5, mono and below, f"monotone {mono}, full below baseline at every point {below}")


def test_criterion_6_selection_vs_exhaustive(report):
    rng = np.random.default_rng(6)
    policy = selection.SelectionPolicyConfig()
    worst, empty = np.inf, 0
    for _ in range(100):
        trace, lat = random_toy_selection(rng)
        sel = selection.wdmoe_select(trace, lat, policy)
        empty += int((~sel.mask.any(axis=2)).sum())
        got = selection_wlr(trace.weights[0], sel.mask[0], lat)
        worst = min(worst, got / exhaustive_selection(trace.weights[0], lat).best_value)
    report(6, worst >= 0.25 and empty == 0, f"worst WLR ratio {worst:.4f} (floor 0.25), empty rows {empty}")


def test_criterion_7_testbed_bound(report):
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(500):
        u = int(rng.integers(2, 9))
        j = int(rng.integers(1, 65))
        tr = synth_trace(int(rng.integers(2**31)), 1, j, u, float(rng.uniform(0.0, 3.0)))
        hist = selection.LatencyHistory(u)
        for k in range(u):
            selection.update_history(hist, k, float(rng.uniform(1e-4, 2e-2)), int(rng.integers(1, 20)))
        top = selection.top_k_select(tr, 2).mask[0]
        got = selection.testbed_select(tr, hist, 0)
        b = selection.bottleneck_drop_bound(hist, top.sum(axis=0))
        removed = top & ~got
        top1 = np.argmax(np.where(top, tr.weights[0], -1.0), axis=1)
        violations += bool(
            removed.sum() > b.max_drops
            or np.any(removed[:, np.arange(u) != b.bottleneck])
            or np.any(removed[np.arange(j), top1])
            or (not b.triggered and removed.any())
            or not got.any(axis=1).all()
        )
    report(7, violations == 0, f"{violations} violations over 500 random instances")


SABOTAGE = {
    "truncate": lambda: mock.patch.object(allocator, "MAX_ITERATIONS", 2),
    "no-projection": lambda: mock.patch.object(allocator, "project_simplex", lambda v, total=1.0: np.asarray(v, float)),
    "wrong-quartile": lambda: mock.patch.object(selection, "third_quartile", lambda v: float(np.median(v))),
}


def test_criterion_8_reproducible_and_self_checking(report, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"batches": 3, "dims": {"num_blocks": 8}, "trace": {"synth": {"seed": 0, "tokens": 32}}}))
    for d in ("a", "b"):
        assert cli.main(["--out-dir", str(tmp_path / d), "simulate", "--config", str(cfg)]) == 0
    same = (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()

    trace = synth_trace(5, 3, 17, 8, 1.5)
    write_trace(trace, tmp_path / "t.bin")
    back = load_trace(tmp_path / "t.bin")
    round_trip = back.weights.dtype == trace.weights.dtype and np.array_equal(back.weights, trace.weights)

    parsed = parse_config(cfg.read_text())
    clean = all(r.passed for r in run_checks(parsed))
    caught = []
    for name, patch in SABOTAGE.items():
        with patch():
            if not all(r.passed for r in run_checks(parsed)):
                caught.append(name)
    ok = same and round_trip and clean and len(caught) == len(SABOTAGE)
    report(
        8,
        ok,
        f"summary byte-identical {same}, trace round-trip exact {round_trip}, "
        f"verify clean {clean}, sabotage caught {caught}",
    )
