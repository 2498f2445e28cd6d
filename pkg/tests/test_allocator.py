import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wdmoe.allocator import (
    BandwidthAllocation,
    allocate,
    block_latencies,
    convexity_probe,
    objective,
    per_token_latency,
    project_simplex,
    uniform_allocation,
)
from wdmoe.channel import ChannelState, DeviceProfile, RadioConfig, sample_channel
from wdmoe.checks import random_toy_allocation
from wdmoe.latency import (
    ModelDims,
    attention_waiting_latency,
    device_block_latency,
    token_comm_bits,
    token_latency,
)
from wdmoe.oracle import grid_search_allocation
from wdmoe.selection import SelectionMatrix, top_k_select
from wdmoe.trace import synth_trace

DIMS = ModelDims(num_blocks=4)
RADIO = RadioConfig()


def _instance(seed, u):
    return random_toy_allocation(np.random.default_rng(seed), u, RADIO, DIMS)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=12), st.floats(0.1, 100))
def test_project_simplex(v, total):
    x = project_simplex(v, total)
    assert np.all(x >= 0)
    assert x.sum() == pytest.approx(total, rel=1e-12)
    # idempotent on the simplex
    np.testing.assert_allclose(project_simplex(x, total), x, atol=1e-12 * total)


def test_objective_single_device():
    dev = DeviceProfile(0, 50.0)
    ch = ChannelState(1e-8, 1e-8)
    sel = SelectionMatrix(np.ones((3, 5, 1), dtype=bool))
    t = token_latency(DIMS, RADIO.total_bandwidth_hz, dev, ch, RADIO).total_s
    got = objective(uniform_allocation(1, RADIO), sel, [dev], [ch], DIMS, RADIO)
    assert got == pytest.approx(3 * 5 * t, rel=1e-12)


def test_objective_symmetric_uniform():
    devs = [DeviceProfile(k, 60.0) for k in range(4)]
    chans = [ChannelState(2e-9, 2e-9)] * 4
    mask = np.zeros((4, 8, 4), dtype=bool)
    for j in range(8):
        mask[:, j, j % 4] = True
    sel = SelectionMatrix(mask)
    per = token_latency(DIMS, RADIO.total_bandwidth_hz / 4, devs[0], chans[0], RADIO).total_s
    got = objective(uniform_allocation(4, RADIO), sel, devs, chans, DIMS, RADIO)
    assert got == pytest.approx(4 * 2 * per, rel=1e-12)


@given(st.integers(0, 2**31), st.integers(1, 5))
def test_objective_matches_latency_primitives(seed, u):
    devs, chans, sel = _instance(seed, u)
    shares = np.random.default_rng(seed).dirichlet(np.ones(u)) * RADIO.total_bandwidth_hz
    expected = 0.0
    for i in range(DIMS.num_blocks):
        per_device = [
            device_block_latency(sel, i, k, token_latency(DIMS, shares[k], devs[k], chans[k], RADIO))
            for k in range(u)
        ]
        expected += attention_waiting_latency(per_device)
    got = objective(BandwidthAllocation(shares), sel, devs, chans, DIMS, RADIO)
    assert got == pytest.approx(expected, rel=1e-12)


def test_objective_infinite_when_loaded_device_starved():
    devs, chans, sel = _instance(0, 2)
    assert objective(np.array([RADIO.total_bandwidth_hz, 0.0]), sel, devs, chans, DIMS, RADIO) == np.inf


def test_identical_devices_get_uniform():
    devs = [DeviceProfile(k, 80.0) for k in range(4)]
    chans = [ChannelState(1e-9, 2e-9)] * 4
    mask = np.zeros((2, 8, 4), dtype=bool)
    for j in range(8):
        mask[:, j, j % 4] = True
    alloc, report = allocate(SelectionMatrix(mask), devs, chans, DIMS, RADIO)
    np.testing.assert_allclose(alloc.shares, RADIO.total_bandwidth_hz / 4, rtol=1e-9)
    assert report.converged


def test_idle_device_gets_zero():
    devs, chans, _ = _instance(4, 3)
    tr = synth_trace(1, 4, 16, 3)
    mask = top_k_select(tr, 1).mask.copy()
    mask[..., 0] |= mask[..., 2]
    mask[..., 2] = False
    alloc, report = allocate(SelectionMatrix(mask), devs, chans, DIMS, RADIO)
    assert alloc.shares[2] == 0.0
    assert alloc.shares.sum() == pytest.approx(RADIO.total_bandwidth_hz, rel=1e-12)
    assert report.converged


def test_degenerate_empty_selection():
    devs, chans, _ = _instance(0, 2)
    sel = SelectionMatrix(np.zeros((2, 0, 2), dtype=bool))
    alloc, report = allocate(sel, devs, chans, DIMS, RADIO)
    assert report.degenerate
    assert alloc == uniform_allocation(2, RADIO)


@settings(max_examples=12)
@given(st.integers(0, 2**31), st.sampled_from([2, 3]))
def test_allocate_matches_grid_oracle(seed, u):
    devs, chans, sel = _instance(seed, u)
    alloc, report = allocate(sel, devs, chans, DIMS, RADIO)
    oracle = grid_search_allocation(sel, devs, chans, DIMS, RADIO, resolution=500)
    assert report.objective_s <= oracle.best_value * (1 + 1e-4)


@settings(max_examples=25)
@given(st.integers(0, 2**31), st.integers(1, 8))
def test_allocate_contract(seed, u):
    devs, chans, sel = _instance(seed, u)
    alloc, report = allocate(sel, devs, chans, DIMS, RADIO)
    assert np.all(alloc.shares >= 0)
    assert abs(alloc.shares.sum() - RADIO.total_bandwidth_hz) <= 1e-9 * RADIO.total_bandwidth_hz
    uniform = objective(uniform_allocation(u, RADIO), sel, devs, chans, DIMS, RADIO)
    assert report.objective_s <= uniform
    assert report.objective_s == objective(alloc, sel, devs, chans, DIMS, RADIO)
    if report.converged:
        assert report.kkt_residual <= 1e-5
    assert report.converged


def test_allocate_deterministic():
    devs, chans, sel = _instance(9, 6)
    a, ra = allocate(sel, devs, chans, DIMS, RADIO)
    b, rb = allocate(sel, devs, chans, DIMS, RADIO)
    assert a.shares.tobytes() == b.shares.tobytes()
    assert ra == rb


@settings(max_examples=10)
@given(st.integers(0, 2**31), st.integers(2, 6), st.floats(1.05, 4.0))
def test_more_bandwidth_never_hurts(seed, u, factor):
    devs, chans, sel = _instance(seed, u)
    _, low = allocate(sel, devs, chans, DIMS, RADIO)
    wide = dataclasses.replace(RADIO, total_bandwidth_hz=RADIO.total_bandwidth_hz * factor)
    _, high = allocate(sel, devs, chans, DIMS, wide)
    assert high.objective_s <= low.objective_s


def test_truncated_budget_is_not_converged():
    devs, chans, sel = _instance(2, 3)
    _, full = allocate(sel, devs, chans, DIMS, RADIO)
    _, short = allocate(sel, devs, chans, DIMS, RADIO, max_iter=1)
    assert full.converged
    assert short.objective_s >= full.objective_s
    assert short.kkt_residual > full.kkt_residual


@settings(max_examples=10)
@given(st.integers(0, 2**31), st.integers(2, 8))
def test_convexity_probe(seed, u):
    devs, chans, sel = _instance(seed, u)
    scale = objective(uniform_allocation(u, RADIO), sel, devs, chans, DIMS, RADIO)
    worst = convexity_probe(sel, devs, chans, DIMS, RADIO, np.random.default_rng(seed), 500)
    assert worst <= 1e-9 * scale


def test_convexity_probe_needs_trials():
    devs, chans, sel = _instance(0, 2)
    with pytest.raises(ValueError):
        convexity_probe(sel, devs, chans, DIMS, RADIO, np.random.default_rng(0), 0)


def test_inverse_rate_term_is_convex():
    # h(v) = L / v has h''(v) = 2L / v^3 > 0; check by central differences
    bits = token_comm_bits(DIMS)
    for v in (1e6, 1e8, 1e9):
        step = v * 1e-3
        h = lambda x: bits / x
        fd = (h(v + step) - 2 * h(v) + h(v - step)) / step**2
        assert fd > 0
        assert fd == pytest.approx(2 * bits / v**3, rel=1e-5)


def test_per_token_latency_vector():
    devs, chans, _ = _instance(3, 3)
    alloc = uniform_allocation(3, RADIO)
    got = per_token_latency(alloc, devs, chans, DIMS, RADIO)
    for k in range(3):
        ref = token_latency(DIMS, alloc.shares[k], devs[k], chans[k], RADIO).total_s
        assert got[k] == pytest.approx(ref, rel=1e-13)


def test_block_latencies_sum_to_objective():
    devs, chans, sel = _instance(5, 3)
    alloc, report = allocate(sel, devs, chans, DIMS, RADIO)
    lat = block_latencies(alloc, sel, devs, chans, DIMS, RADIO)
    assert lat.shape == (DIMS.num_blocks,)
    assert lat.sum() == pytest.approx(report.objective_s, rel=1e-12)


def test_faded_channels_accepted():
    dev = DeviceProfile(0, 120.0)
    ch = sample_channel(dev, RADIO, np.random.default_rng(0))
    sel = SelectionMatrix(np.ones((1, 2, 1), dtype=bool))
    alloc, _ = allocate(sel, [dev], [ch], DIMS, RADIO)
    assert alloc.shares.tolist() == [RADIO.total_bandwidth_hz]
