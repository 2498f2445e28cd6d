"""Brute-force reference solutions for small instances.

These share nothing with the solver or the selection heuristics beyond the
channel and latency primitives, so they can be used to check both.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .channel import downlink_rate, uplink_rate
from .latency import expert_flops, token_comm_bits, token_latency

__all__ = [
    "OracleResult",
    "OracleLimitError",
    "MAX_GRID_DEVICES",
    "MAX_GRID_STEPS",
    "evaluate_allocation",
    "grid_search_allocation",
    "selection_wlr",
    "exhaustive_selection",
]

MAX_GRID_DEVICES = 3
MAX_GRID_STEPS = 2000
MAX_TOY_TOKENS = 4
MAX_TOY_DEVICES = 4
REFINE_STEPS = 200
_CHUNK = 1 << 18


class OracleLimitError(ValueError):
    """Instance too large for exhaustive search."""


@dataclass(frozen=True)
class OracleResult:
    best_value: float
    best_point: np.ndarray
    evaluations: int


def _loads(selection) -> np.ndarray:
    # counted straight from the mask rather than through the selection helpers
    mask = np.asarray(selection.mask, dtype=bool)
    emap = np.asarray(selection.expert_device)
    out = np.zeros((mask.shape[0], selection.num_devices))
    for e, k in enumerate(emap):
        out[:, k] += mask[:, :, e].sum(axis=1)
    return out


def _device_table(bw, profile, channel, dims, radio) -> np.ndarray:
    """Per-token latency of one device at each bandwidth in ``bw``."""
    bw = np.asarray(bw, dtype=np.float64)
    bits = token_comm_bits(dims)
    with np.errstate(divide="ignore"):
        comm = bits / downlink_rate(bw, profile, channel, radio) + bits / uplink_rate(bw, profile, channel, radio)
    return comm + expert_flops(dims) / profile.compute_flops


def _combine(loads: np.ndarray, per_token: np.ndarray) -> np.ndarray:
    """Objective for a stack of per-device latency rows, shape ``(P, U)`` -> ``(P,)``."""
    out = np.zeros(per_token.shape[0])
    for row in loads:
        busy = np.nonzero(row > 0)[0]
        if busy.size:
            out += (per_token[:, busy] * row[busy]).max(axis=1)
    return out


def evaluate_allocation(shares, selection, devices, channels, dims, radio) -> float:
    """Scalar re-evaluation through :func:`token_latency`."""
    loads = _loads(selection)
    t = np.array(
        [token_latency(dims, float(b), d, c, radio).total_s for b, d, c in zip(shares, devices, channels)]
    )
    return float(_combine(loads, t[None])[0])


def _simplex_grid(steps: int, u: int):
    """Integer compositions of ``steps`` into ``u`` parts, in lexicographic order."""
    if u == 1:
        return np.array([[steps]])
    if u == 2:
        a = np.arange(steps + 1)
        return np.stack([a, steps - a], axis=1)
    a, b = np.triu_indices(steps + 1)
    # a + (b - a) + (steps - b) = steps
    return np.stack([a, b - a, steps - b], axis=1)


def grid_search_allocation(
    selection, devices, channels, dims, radio, resolution: int = MAX_GRID_STEPS, refine: bool = True
) -> OracleResult:
    """Exhaustive search over the bandwidth simplex at step ``B / resolution``.

    With ``refine`` the best grid cell (plus or minus one step on every free
    coordinate) is searched again on a finer grid.
    """
    devices, channels = list(devices), list(channels)
    u = len(devices)
    if u > MAX_GRID_DEVICES:
        raise OracleLimitError(f"grid search supports at most {MAX_GRID_DEVICES} devices, got {u}")
    if not 1 <= resolution <= MAX_GRID_STEPS:
        raise OracleLimitError(f"resolution must be in [1, {MAX_GRID_STEPS}], got {resolution}")
    total = radio.total_bandwidth_hz
    loads = _loads(selection)

    levels = np.arange(resolution + 1) * (total / resolution)
    table = np.stack([_device_table(levels, d, c, dims, radio) for d, c in zip(devices, channels)], axis=1)
    grid = _simplex_grid(resolution, u)
    best_val, best_idx = np.inf, 0
    for start in range(0, len(grid), _CHUNK):
        g = grid[start : start + _CHUNK]
        vals = _combine(loads, table[g, np.arange(u)])
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best_idx = float(vals[i]), start + i
    best = grid[best_idx] * (total / resolution)
    evaluations = len(grid)

    if refine and u > 1:
        h = total / resolution
        offsets = np.linspace(-h, h, 2 * REFINE_STEPS + 1)
        free = np.stack(np.meshgrid(*([offsets] * (u - 1)), indexing="ij"), axis=-1).reshape(-1, u - 1)
        pts = np.empty((free.shape[0], u))
        pts[:, :-1] = best[:-1] + free
        pts[:, -1] = total - pts[:, :-1].sum(axis=1)
        pts = pts[np.all(pts >= 0, axis=1)]
        lat = np.stack([_device_table(pts[:, k], devices[k], channels[k], dims, radio) for k in range(u)], axis=1)
        vals = _combine(loads, lat)
        evaluations += len(pts)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best = float(vals[i]), pts[i]
    return OracleResult(best_val, np.asarray(best, dtype=np.float64), evaluations)


def selection_wlr(weights, mask, per_token_latencies, expert_device=None) -> float:
    """Summed WLR of one block: assigned weight over busy time per device."""
    w = np.asarray(weights, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    t = np.asarray(per_token_latencies, dtype=np.float64)
    emap = np.arange(w.shape[1]) if expert_device is None else np.asarray(expert_device)
    total = 0.0
    for k in range(t.size):
        cols = emap == k
        load = int(mask[:, cols].sum())
        if load:
            total += float(w[:, cols][mask[:, cols]].sum()) / (load * t[k])
    return total


def exhaustive_selection(trace_block, per_token_latencies, top_k: int = 2, expert_device=None) -> OracleResult:
    """Enumerate every selection whose rows are non-empty subsets of Top-K.

    ``trace_block`` is one block's ``(J, n)`` weights. Returns the mask that
    maximises summed WLR; ties keep the first candidate in enumeration order.
    """
    w = np.asarray(trace_block, dtype=np.float64)
    t = np.asarray(per_token_latencies, dtype=np.float64)
    j, n = w.shape
    if j > MAX_TOY_TOKENS or t.size > MAX_TOY_DEVICES:
        raise OracleLimitError(
            f"exhaustive selection is limited to J <= {MAX_TOY_TOKENS}, U <= {MAX_TOY_DEVICES}"
        )
    if not 1 <= top_k <= n:
        raise ValueError(f"top_k must lie in [1, {n}]")

    row_options = []
    for row in w:
        top = sorted(range(n), key=lambda e: (-row[e], e))[:top_k]
        subsets = [c for r in range(1, top_k + 1) for c in itertools.combinations(top, r)]
        row_options.append(subsets)

    best_val, best_mask, count = -np.inf, None, 0
    for choice in itertools.product(*row_options):
        mask = np.zeros((j, n), dtype=bool)
        for r, experts in enumerate(choice):
            mask[r, list(experts)] = True
        val = selection_wlr(w, mask, t, expert_device)
        count += 1
        if val > best_val:
            best_val, best_mask = val, mask
    return OracleResult(best_val, best_mask, count)
