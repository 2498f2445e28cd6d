import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wdmoe.channel import ChannelState, DeviceProfile, RadioConfig, sample_channel
from wdmoe.latency import (
    ModelDims,
    TokenLatency,
    attention_waiting_latency,
    device_block_latency,
    expert_flops,
    token_comm_bits,
    token_latency,
    wlr,
)
from wdmoe.selection import SelectionMatrix

# mpmath (50 digits), d = 100 m, 3.5 GHz, no fading, B = 12.5 MHz, C = 5 TFLOP/s
REF_COMM_S = 0.00063324430519139381368
REF_COMP_S = 0.0000704786432
MIXTRAL_FLOPS = 352_393_216


@pytest.mark.parametrize(
    "bits, m, expected", [(16, 4096, 65536), (8, 1, 8), (32, 128, 4096)]
)
def test_comm_bits(bits, m, expected):
    assert token_comm_bits(ModelDims(embed_dim=m, quant_bits=bits)) == expected


def test_expert_flops_unit():
    assert expert_flops(ModelDims(embed_dim=1, hidden_dim=1, act_flops_per_elem=0)) == 7


def test_expert_flops_mixtral():
    assert expert_flops(ModelDims()) == MIXTRAL_FLOPS


def test_expert_flops_linear_in_eta():
    base = ModelDims(act_flops_per_elem=4)
    assert expert_flops(ModelDims(act_flops_per_elem=5)) - expert_flops(base) == base.hidden_dim


@pytest.mark.parametrize("field, value", [("quant_bits", 12), ("embed_dim", 0), ("num_blocks", -1)])
def test_dims_validation(field, value):
    with pytest.raises(ValueError):
        ModelDims(**{field: value})


def _ref_channel():
    dev = DeviceProfile(0, 100.0, p_down_w=10.0, p_up_w=0.2, compute_flops=5e12)
    return dev, sample_channel(dev, RadioConfig(), fading=False)


def test_token_latency_reference():
    dev, ch = _ref_channel()
    t = token_latency(ModelDims(), 12.5e6, dev, ch, RadioConfig())
    assert t.comm_s == pytest.approx(REF_COMM_S, rel=1e-12)
    assert t.comp_s == pytest.approx(REF_COMP_S, rel=1e-12)
    assert t.total_s == t.comm_s + t.comp_s


def test_token_latency_zero_bandwidth_unreachable():
    dev, ch = _ref_channel()
    assert math.isinf(token_latency(ModelDims(), 0.0, dev, ch, RadioConfig()).comm_s)


def test_token_latency_compute_limit():
    dev = DeviceProfile(0, 100.0, compute_flops=1e300)
    ch = ChannelState(1e-9, 1e-9)
    t = token_latency(ModelDims(), 1e7, dev, ch, RadioConfig())
    assert t.total_s == pytest.approx(t.comm_s, rel=1e-12)


def test_identical_devices_same_latency():
    a = DeviceProfile(0, 70.0)
    b = DeviceProfile(1, 70.0)
    ch = ChannelState(2e-9, 2e-9)
    r = RadioConfig()
    assert token_latency(ModelDims(), 1e7, a, ch, r) == token_latency(ModelDims(), 1e7, b, ch, r)


def test_token_latency_rejects_negative():
    with pytest.raises(ValueError):
        TokenLatency(-1.0, 0.0)


def _selection(mask):
    return SelectionMatrix(np.asarray(mask, dtype=bool)[None])


def test_block_latency_idle_and_linear():
    sel = _selection([[1, 0], [1, 0], [1, 0]])
    assert device_block_latency(sel, 0, 1, 2e-3) == 0.0
    assert device_block_latency(sel, 0, 0, 2e-3) == pytest.approx(6e-3)
    assert device_block_latency(sel, 0, 0, TokenLatency(1e-3, 1e-3)) == pytest.approx(6e-3)


@given(st.integers(0, 2**31), st.integers(1, 12), st.integers(1, 6))
def test_block_latency_matches_enumeration(seed, j, n):
    rng = np.random.default_rng(seed)
    mask = rng.random((j, n)) < 0.5
    mask[np.arange(j), rng.integers(0, n, j)] = True
    sel = _selection(mask)
    t = float(rng.uniform(1e-4, 1e-2))
    for k in range(n):
        count = sum(1 for row in mask if row[k])
        assert device_block_latency(sel, 0, k, t) == pytest.approx(count * t, rel=1e-15)


def test_block_latency_additive_over_disjoint_tokens():
    a = np.array([[1, 0], [0, 1], [1, 1]], dtype=bool)
    b = np.array([[1, 1], [1, 0]], dtype=bool)
    both = _selection(np.vstack([a, b]))
    assert device_block_latency(both, 0, 0, 1e-3) == pytest.approx(
        device_block_latency(_selection(a), 0, 0, 1e-3) + device_block_latency(_selection(b), 0, 0, 1e-3)
    )


def test_attention_waiting():
    assert attention_waiting_latency([5e-3, 3e-3, 9e-3, 1e-3]) == 9e-3
    assert attention_waiting_latency([2.0, 2.0]) == 2.0
    with pytest.raises(ValueError):
        attention_waiting_latency([])


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=10), st.randoms())
def test_attention_waiting_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert attention_waiting_latency(shuffled) == attention_waiting_latency(values) == max(values)


def test_wlr_direct():
    sel = _selection([[1, 0], [1, 0]])
    w = np.array([[[0.6, 0.4], [0.4, 0.6]]])
    assert wlr(sel, w, 0, 0, 1e-3) == pytest.approx(500.0)
    assert wlr(sel, w, 0, 1, 1e-3) == 0.0


@given(st.integers(0, 2**31), st.integers(1, 10), st.integers(2, 6), st.floats(0.1, 10.0))
def test_wlr_recompute_and_scaling(seed, j, n, c):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(n), size=(1, j))
    mask = rng.random((j, n)) < 0.5
    mask[np.arange(j), rng.integers(0, n, j)] = True
    sel = _selection(mask)
    t = rng.uniform(1e-4, 1e-2, n)
    busy = [device_block_latency(sel, 0, k, t[k]) for k in range(n)]
    for k in range(n):
        direct = sum(w[0, jj, k] for jj in range(j) if mask[jj, k])
        expected = direct / busy[k] if mask[:, k].any() else 0.0
        assert wlr(sel, w, 0, k, t[k]) == pytest.approx(expected, rel=1e-12)
        assert wlr(sel, w, 0, k, c * t[k]) == pytest.approx(expected / c, rel=1e-12)
    assert np.argmax(busy) == np.argmax([c * b for b in busy])


def test_wlr_invariant_to_token_order():
    w = np.array([[[0.6, 0.4], [0.3, 0.7], [0.9, 0.1]]])
    mask = np.array([[1, 1], [0, 1], [1, 0]], dtype=bool)
    perm = [2, 0, 1]
    a = wlr(_selection(mask), w, 0, 0, 1e-3)
    b = wlr(_selection(mask[perm]), w[:, perm], 0, 0, 1e-3)
    assert a == pytest.approx(b, rel=1e-15)
