"""Oracle-backed self checks run by ``wdmoe verify``."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import allocator, selection
from .channel import DeviceProfile, RadioConfig, sample_channel
from .latency import ModelDims
from .oracle import exhaustive_selection, grid_search_allocation, selection_wlr
from .trace import GatingTrace, synth_trace

__all__ = ["CheckResult", "run_checks", "random_toy_allocation", "testbed_hand_case"]

ORACLE_SLACK = 1e-4
FEASIBILITY_TOL = 1e-9
CONVEXITY_TOL = 1e-9


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_toy_allocation(rng: np.random.Generator, num_devices: int, radio: RadioConfig, dims: ModelDims):
    """Random P3 instance: distances in [10, 300] m, Top-2 over 16 tokens and 4 blocks."""
    devices = [
        DeviceProfile(k, float(rng.uniform(10.0, 300.0)), compute_flops=float(rng.choice([2e12, 5e12, 1e13, 2e13])))
        for k in range(num_devices)
    ]
    channels = [sample_channel(d, radio, rng) for d in devices]
    trace = synth_trace(int(rng.integers(2**31)), dims.num_blocks, 16, num_devices, 1.0)
    return devices, channels, selection.top_k_select(trace, min(2, num_devices))


def _check_allocation(cfg, rng) -> CheckResult:
    radio = cfg.radio_config()
    dims = dataclasses.replace(cfg.model_dims(), num_blocks=4)
    worst_gap, worst_feas, unconverged = -np.inf, 0.0, 0
    for t in range(cfg.verify.allocation_instances):
        devices, channels, sel = random_toy_allocation(rng, 2 + t % 2, radio, dims)
        alloc, report = allocator.allocate(sel, devices, channels, dims, radio)
        shares = alloc.shares
        feas = abs(shares.sum() - radio.total_bandwidth_hz) / radio.total_bandwidth_hz
        if np.any(shares < 0):
            feas = np.inf
        worst_feas = max(worst_feas, feas)
        oracle = grid_search_allocation(sel, devices, channels, dims, radio)
        obj = allocator.objective(alloc, sel, devices, channels, dims, radio)
        worst_gap = max(worst_gap, obj / oracle.best_value - 1.0)
        unconverged += not report.converged
    ok = worst_gap <= ORACLE_SLACK and worst_feas <= FEASIBILITY_TOL and unconverged == 0
    detail = f"worst gap vs grid {worst_gap:+.2e}, simplex error {worst_feas:.1e}, unconverged {unconverged}"
    return CheckResult("allocate vs grid search", ok, detail)


def _check_convexity(cfg, rng) -> CheckResult:
    radio = cfg.radio_config()
    dims = dataclasses.replace(cfg.model_dims(), num_blocks=4)
    devices, channels, sel = random_toy_allocation(rng, 3, radio, dims)
    scale = allocator.objective(allocator.uniform_allocation(3, radio), sel, devices, channels, dims, radio)
    worst = allocator.convexity_probe(sel, devices, channels, dims, radio, rng, cfg.verify.convexity_trials)
    return CheckResult(
        "midpoint convexity", worst <= CONVEXITY_TOL * scale, f"worst violation {worst / scale:.1e} of scale"
    )


def random_toy_selection(rng: np.random.Generator):
    u = int(rng.integers(2, 5))
    j = int(rng.integers(1, 5))
    trace = synth_trace(int(rng.integers(2**31)), 1, j, u, float(rng.uniform(0.5, 3.0)))
    return trace, rng.uniform(1e-4, 1e-3, u)


def _check_selection(cfg, rng) -> CheckResult:
    worst, empty = np.inf, 0
    policy = selection.SelectionPolicyConfig(**cfg.selection.model_dump())
    for _ in range(cfg.verify.selection_instances):
        trace, lat = random_toy_selection(rng)
        sel = selection.wdmoe_select(trace, lat, policy)
        empty += int((~sel.mask.any(axis=2)).sum())
        got = selection_wlr(trace.weights[0], sel.mask[0], lat)
        best = exhaustive_selection(trace.weights[0], lat, policy.top_k).best_value
        worst = min(worst, got / best)
    ok = worst >= cfg.verify.selection_floor and empty == 0
    return CheckResult(
        "selection vs exhaustive", ok, f"worst WLR ratio {worst:.3f} (floor {cfg.verify.selection_floor})"
    )


def testbed_hand_case():
    """Four devices at (1, 1, 1, 10) ms/token, eight Top-2 tokens each.

    Predicted latencies are (8, 8, 8, 80) ms, so Q3 = 26 ms and at most
    floor(54 / 10) = 5 tokens may leave device 3. Device 3 holds the
    low-weight expert of all eight of its tokens, so the bound binds.
    """
    history = selection.LatencyHistory(4)
    for k, t in enumerate((1e-3, 1e-3, 1e-3, 10e-3)):
        selection.update_history(history, k, t, 1)
    pairs = [(0, 3)] * 3 + [(1, 3)] * 3 + [(2, 3)] * 2 + [(0, 1)] * 2 + [(0, 2)] * 3 + [(1, 2)] * 3
    w = np.full((1, len(pairs), 4), 0.0, dtype=np.float32)
    for j, (hi, lo) in enumerate(pairs):
        w[0, j, hi] = 0.9
        w[0, j, lo] = 0.1
    return GatingTrace(w), history


def _check_testbed(cfg, rng) -> CheckResult:
    trace, history = testbed_hand_case()
    bound = selection.bottleneck_drop_bound(history, [8, 8, 8, 8])
    mask = selection.testbed_select(trace, history, 0)
    dropped = int(selection.top_k_select(trace, 2).mask[0].sum() - mask.sum())
    hand_ok = abs(bound.q3_s - 26e-3) < 1e-12 and bound.max_drops == 5 and dropped == 5
    violations = 0
    for _ in range(cfg.verify.testbed_instances):
        u = int(rng.integers(2, 9))
        j = int(rng.integers(1, 33))
        tr = synth_trace(int(rng.integers(2**31)), 1, j, u, float(rng.uniform(0.0, 3.0)))
        hist = selection.LatencyHistory(u)
        for k in range(u):
            selection.update_history(hist, k, float(rng.uniform(1e-4, 2e-2)), int(rng.integers(1, 20)))
        top = selection.top_k_select(tr, 2).mask[0]
        got = selection.testbed_select(tr, hist, 0)
        b = selection.bottleneck_drop_bound(hist, top.sum(axis=0))
        removed = top & ~got
        top1 = np.argmax(np.where(top, tr.weights[0], -1.0), axis=1)
        bad = (
            removed.sum() > b.max_drops
            or np.any(removed[:, np.arange(u) != b.bottleneck])
            or np.any(removed[np.arange(j), top1])
            or (not b.triggered and removed.any())
            or not got.any(axis=1).all()
        )
        violations += bool(bad)
    detail = f"hand case Q3 {bound.q3_s * 1e3:.3f} ms, bound {bound.max_drops}, dropped {dropped}; random violations {violations}"
    return CheckResult("testbed drop bound", hand_ok and violations == 0, detail)


def run_checks(cfg) -> list[CheckResult]:
    rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    return [
        _check_allocation(cfg, rng),
        _check_convexity(cfg, rng),
        _check_selection(cfg, rng),
        _check_testbed(cfg, rng),
    ]
