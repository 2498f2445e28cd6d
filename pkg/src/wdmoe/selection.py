"""Expert selection: Top-K, similarity-threshold dropping and the testbed rule.

Selections are boolean ``[I][J][n]`` masks over experts. Each expert lives on
one device (``expert_device``, identity by default), and per-device loads are
obtained by summing the mask over that device's experts.

Ties are always resolved toward the lower index: Top-K keeps the
lower-indexed expert among equal weights, and dropping removes the
higher-indexed one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .trace import GatingTrace

__all__ = [
    "SelectionMatrix",
    "SelectionPolicyConfig",
    "LatencyHistory",
    "cosine_similarity",
    "top_k_select",
    "wdmoe_select",
    "wdmoe_walk",
    "SelectionWalk",
    "testbed_select",
    "update_history",
    "third_quartile",
    "bottleneck_drop_bound",
    "DropBound",
]


def _identity_map(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class SelectionMatrix:
    mask: np.ndarray
    expert_device: np.ndarray | None = None
    num_devices: int | None = None

    def __post_init__(self) -> None:
        mask = np.array(self.mask, dtype=bool, copy=True)
        if mask.ndim != 3:
            raise ValueError(f"selection mask must be [I][J][n], got shape {mask.shape}")
        n = mask.shape[2]
        emap = _identity_map(n) if self.expert_device is None else np.asarray(self.expert_device, dtype=np.int64)
        if emap.shape != (n,):
            raise ValueError(f"expert_device must have length {n}")
        num_devices = int(emap.max()) + 1 if self.num_devices is None else int(self.num_devices)
        if emap.min() < 0 or emap.max() >= num_devices:
            raise ValueError("expert_device entries must index a device")
        empty = ~mask.any(axis=2)
        if np.any(empty):
            i, j = np.argwhere(empty)[0]
            raise ValueError(f"token {j} in block {i} has no selected expert")
        mask.setflags(write=False)
        emap.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "expert_device", emap)
        object.__setattr__(self, "num_devices", num_devices)

    @property
    def num_blocks(self) -> int:
        return self.mask.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.mask.shape[1]

    @property
    def num_experts(self) -> int:
        return self.mask.shape[2]

    @property
    def active_pairs(self) -> int:
        return int(self.mask.sum())

    def _to_devices(self, per_expert: np.ndarray) -> np.ndarray:
        out = np.zeros(per_expert.shape[:-1] + (self.num_devices,), dtype=per_expert.dtype)
        np.add.at(out, (..., self.expert_device), per_expert)
        return out

    def device_loads(self) -> np.ndarray:
        """Tokens routed to each device per block, shape ``(I, U)``."""
        return self._to_devices(self.mask.sum(axis=1))

    def device_weight_sums(self, weights) -> np.ndarray:
        """Sum of selected gating weight per device per block, shape ``(I, U)``."""
        w = weights.weights if isinstance(weights, GatingTrace) else np.asarray(weights)
        w = np.asarray(w, dtype=np.float64)
        if w.shape != self.mask.shape:
            raise ValueError(f"weights shape {w.shape} does not match selection {self.mask.shape}")
        return self._to_devices(np.where(self.mask, w, 0.0).sum(axis=1))

    def effective_weights(self, weights) -> np.ndarray:
        """Gating weights with dropped or unselected experts zeroed."""
        w = weights.weights if isinstance(weights, GatingTrace) else np.asarray(weights)
        return np.where(self.mask, np.asarray(w, dtype=np.float64), 0.0)

    def with_mask(self, mask: np.ndarray) -> "SelectionMatrix":
        return SelectionMatrix(mask, self.expert_device, self.num_devices)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SelectionMatrix):
            return NotImplemented
        return (
            self.num_devices == other.num_devices
            and np.array_equal(self.expert_device, other.expert_device)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(frozen=True)
class SelectionPolicyConfig:
    """Knobs of the similarity-threshold policy.

    ``theta_max`` caps the threshold schedule (cosine similarity never
    exceeds 1, so larger thresholds add nothing). ``wlr_window_blocks=None``
    sums WLR over every block.
    """

    top_k: int = 2
    theta_init: float = 0.5
    theta_step: float = 0.1
    theta_max: float = 1.0
    wlr_growth: float = 1.01
    wlr_window_blocks: int | None = None

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if not -1.0 <= self.theta_init <= 1.0:
            raise ValueError("theta_init must lie in [-1, 1]")
        if not self.theta_step > 0:
            raise ValueError("theta_step must be positive")
        if self.theta_max < self.theta_init:
            raise ValueError("theta_max must not be below theta_init")
        if self.wlr_window_blocks is not None and self.wlr_window_blocks < 1:
            raise ValueError("wlr_window_blocks must be positive")

    def thresholds(self) -> list[float]:
        out = []
        t = 0
        while True:
            theta = self.theta_init + t * self.theta_step
            if theta >= self.theta_max - 1e-12:
                out.append(self.theta_max)
                return out
            out.append(theta)
            t += 1


@dataclass
class LatencyHistory:
    """Running mean of observed latency per token, per device.

    ``count`` is the number of tokens observed, so a block that served many
    tokens weighs more than one that served a few.
    """

    num_devices: int
    mean_s: np.ndarray = field(init=False)
    count: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.mean_s = np.zeros(self.num_devices)
        self.count = np.zeros(self.num_devices, dtype=np.int64)

    def has_samples(self, devices) -> bool:
        return bool(np.all(self.count[np.asarray(devices, dtype=np.int64)] > 0))


def update_history(
    history: LatencyHistory, device: int, observed_latency_s: float, tokens_processed: int
) -> LatencyHistory:
    if tokens_processed < 1:
        raise ValueError("tokens_processed must be at least 1")
    history.count[device] += tokens_processed
    history.mean_s[device] += (
        observed_latency_s - tokens_processed * history.mean_s[device]
    ) / history.count[device]
    return history


def cosine_similarity(w, t) -> float:
    w = np.asarray(w, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if w.shape != t.shape:
        raise ValueError(f"length mismatch: {w.shape} vs {t.shape}")
    nw, nt = np.linalg.norm(w), np.linalg.norm(t)
    if nw == 0 or nt == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(w @ t / (nw * nt), -1.0, 1.0))


def _rank(weights: np.ndarray) -> np.ndarray:
    # descending weight, ascending index on ties
    return np.argsort(-weights, axis=-1, kind="stable")


def top_k_select(
    trace: GatingTrace, k: int = 2, expert_device=None, num_devices: int | None = None
) -> SelectionMatrix:
    n = trace.num_experts
    if not 1 <= k <= n:
        raise ValueError(f"K must lie in [1, {n}], got {k}")
    order = _rank(trace.weights)[..., :k]
    mask = np.zeros(trace.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return SelectionMatrix(mask, expert_device, num_devices)


def _lowest_selected(weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Index of the lowest-weight selected expert per row (highest index on ties)."""
    masked = np.where(mask, weights, np.inf)
    n = weights.shape[-1]
    return n - 1 - np.argmin(masked[..., ::-1], axis=-1)


def _device_wlr(sel: SelectionMatrix, weights: np.ndarray, device_latency: np.ndarray) -> np.ndarray:
    loads = sel.device_loads()
    busy = loads * device_latency
    mass = sel.device_weight_sums(weights)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(loads > 0, mass / busy, 0.0)


def _as_block_latency(per_token_latencies, num_blocks: int, num_devices: int) -> np.ndarray:
    lat = np.asarray(per_token_latencies, dtype=np.float64)
    if lat.ndim == 1:
        lat = np.broadcast_to(lat, (num_blocks, lat.shape[0]))
    if lat.shape != (num_blocks, num_devices):
        raise ValueError(
            f"per-token latencies must have shape ({num_devices},) or "
            f"({num_blocks}, {num_devices}), got {lat.shape}"
        )
    if np.any(~(lat > 0)):
        raise ValueError("per-token latencies must be positive")
    return lat


def _similarity(weights: np.ndarray, mask: np.ndarray, expert_latency: np.ndarray) -> np.ndarray:
    """Cosine similarity between each token's selected weights and latencies."""
    w = np.where(mask, weights, 0.0)
    t = np.where(mask, expert_latency[:, None, :], 0.0)
    num = (w * t).sum(axis=-1)
    den = np.sqrt((w * w).sum(axis=-1)) * np.sqrt((t * t).sum(axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(den > 0, num / den, 1.0)
    return np.clip(s, -1.0, 1.0)


def _drop_pass(weights, mask, expert_latency, theta) -> np.ndarray:
    s = _similarity(weights, mask, expert_latency)
    drop = (s <= theta) & (mask.sum(axis=-1) >= 2)
    if not drop.any():
        return mask
    victim = _lowest_selected(weights, mask)
    out = mask.copy()
    i, j = np.nonzero(drop)
    out[i, j, victim[i, j]] = False
    return out


@dataclass(frozen=True)
class SelectionWalk:
    """Outcome of the threshold walk, kept for diagnostics."""

    selection: SelectionMatrix
    fired: bool
    passes: int
    wlr_initial: float
    wlr_before_final: float
    wlr_final: float


def wdmoe_walk(
    trace: GatingTrace,
    per_token_latencies,
    config: SelectionPolicyConfig | None = None,
    expert_device=None,
    num_devices: int | None = None,
) -> SelectionWalk:
    """Run the threshold walk of :func:`wdmoe_select` and report how it ended."""
    config = config or SelectionPolicyConfig()
    sel = top_k_select(trace, min(config.top_k, trace.num_experts), expert_device, num_devices)
    w = trace.weights.astype(np.float64)
    dev_lat = _as_block_latency(per_token_latencies, trace.num_blocks, sel.num_devices)
    exp_lat = dev_lat[:, sel.expert_device]
    window = slice(0, config.wlr_window_blocks)

    def wlr_sum(mask: np.ndarray) -> float:
        return float(_device_wlr(sel.with_mask(mask), w, dev_lat)[window].sum())

    mask = sel.mask
    base = wlr_sum(mask)
    limit = config.wlr_growth * base
    schedule = config.thresholds()
    step = 0
    fired = False
    while step < len(schedule):
        if wlr_sum(mask) > limit:
            fired = True
            break
        mask = _drop_pass(w, mask, exp_lat, schedule[step])
        step += 1
    else:
        fired = wlr_sum(mask) > limit
    before = wlr_sum(mask)
    passes = step
    if fired:
        mask = _drop_pass(w, mask, exp_lat, schedule[min(step, len(schedule) - 1)])
        passes += 1
    return SelectionWalk(sel.with_mask(mask), fired, passes, base, before, wlr_sum(mask))


def wdmoe_select(
    trace: GatingTrace,
    per_token_latencies,
    config: SelectionPolicyConfig | None = None,
    expert_device=None,
    num_devices: int | None = None,
) -> SelectionMatrix:
    """Similarity-threshold expert dropping on top of Top-K.

    ``per_token_latencies`` holds each device's per-token latency under an
    even bandwidth split, shape ``(U,)`` or ``(I, U)``. The threshold walks
    ``config.thresholds()``; at each step every token whose weight/latency
    similarity is at most the threshold loses its lowest-weight expert. The
    walk stops as soon as the summed WLR over the block window exceeds
    ``wlr_growth`` times its Top-K value, after which one more pass at the
    next threshold is applied. Latencies stay fixed for the whole walk.
    """
    return wdmoe_walk(trace, per_token_latencies, config, expert_device, num_devices).selection


def third_quartile(values) -> float:
    """Linear-interpolation 0.75 quantile."""
    return float(np.quantile(np.asarray(values, dtype=np.float64), 0.75, method="linear"))


@dataclass(frozen=True)
class DropBound:
    predicted_s: np.ndarray
    bottleneck: int
    q3_s: float
    triggered: bool
    max_drops: int


def bottleneck_drop_bound(history: LatencyHistory, device_loads) -> DropBound:
    """Predicted per-device block latency and the offload bound for the slowest device."""
    loads = np.asarray(device_loads)
    predicted = history.mean_s * loads
    k_hat = int(np.argmax(predicted))
    q3 = third_quartile(predicted)
    peak = float(predicted[k_hat])
    triggered = peak > 1.5 * q3
    drops = int(math.floor((peak - q3) / history.mean_s[k_hat])) if triggered else 0
    return DropBound(predicted, k_hat, q3, triggered, max(drops, 0))


def testbed_select(
    trace: GatingTrace,
    history: LatencyHistory,
    block: int,
    expert_device=None,
    top_k: int = 2,
) -> np.ndarray:
    """Bottleneck offloading for one block; returns its ``(J, n)`` mask.

    Starts from Top-K. If the device with the largest predicted latency
    exceeds 1.5x the third quartile of predicted latencies, up to the bound
    from :func:`bottleneck_drop_bound` tokens leave that device. A token is a
    candidate when the bottleneck holds its lowest-weight selected expert
    and that weight is below a fifth of the bottleneck's total assigned
    weight; the smallest-weight candidates go first.
    """
    if history.count.sum() == 0:
        raise ValueError("latency history is empty")
    block_trace = GatingTrace(trace.weights[block : block + 1])
    sel = top_k_select(block_trace, top_k, expert_device, history.num_devices)
    w = block_trace.weights.astype(np.float64)[0]
    mask = sel.mask[0].copy()
    loads = sel.device_loads()[0]
    active = np.nonzero(loads)[0]
    if not history.has_samples(active):
        missing = [int(k) for k in active if history.count[k] == 0]
        raise ValueError(f"no latency samples for active devices {missing}")

    bound = bottleneck_drop_bound(history, loads)
    if not bound.triggered or bound.max_drops == 0:
        return mask

    on_bottleneck = sel.expert_device == bound.bottleneck
    mass = float(np.where(mask[:, on_bottleneck], w[:, on_bottleneck], 0.0).sum())
    victim = _lowest_selected(w, mask)
    rows = np.arange(mask.shape[0])
    victim_w = w[rows, victim]
    candidate = (
        (mask.sum(axis=1) >= 2)
        & (sel.expert_device[victim] == bound.bottleneck)
        & (victim_w < mass / 5.0)
    )
    cand = np.nonzero(candidate)[0]
    if cand.size > bound.max_drops:
        order = np.lexsort((cand, victim_w[cand]))
        cand = cand[order[: bound.max_drops]]
    mask[cand, victim[cand]] = False
    return mask
