"""End-to-end batch simulation of the policy pipelines."""

from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .allocator import (
    allocate,
    block_latencies,
    per_token_latency,
    uniform_allocation,
)
from .channel import ChannelState, DeviceProfile, RadioConfig, sample_channel
from .latency import ModelDims
from .selection import (
    LatencyHistory,
    SelectionMatrix,
    SelectionPolicyConfig,
    testbed_select,
    top_k_select,
    update_history,
    wdmoe_select,
)
from .trace import GatingTrace, synth_trace

__all__ = [
    "POLICIES",
    "FADING_MODES",
    "ConfigError",
    "Scenario",
    "LatencyReport",
    "default_devices",
    "default_scenario",
    "default_trace",
    "draw_channels",
    "run",
    "run_policies",
    "sweep_bandwidth",
    "expert_pair_ratio",
]

BASELINE = "baseline_top2_uniform"
FULL = "wdmoe_full"
NO_SELECTION = "wdmoe_no_selection"
NO_BANDWIDTH = "wdmoe_no_bandwidth"
TESTBED = "testbed"
POLICIES = (BASELINE, FULL, NO_SELECTION, NO_BANDWIDTH, TESTBED)
FADING_MODES = ("per_batch", "frozen", "none")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    radio: RadioConfig
    devices: tuple[DeviceProfile, ...]
    dims: ModelDims
    policy: str = FULL
    seed: int = 0
    batches: int = 100
    fading_mode: str = "per_batch"
    selection: SelectionPolicyConfig = field(default_factory=SelectionPolicyConfig)
    expert_device: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "devices", tuple(self.devices))
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.fading_mode not in FADING_MODES:
            raise ConfigError(f"unknown fading mode {self.fading_mode!r}")
        if self.batches < 1:
            raise ConfigError("batches must be at least 1")
        if not self.devices:
            raise ConfigError("scenario needs at least one device")
        u = len(self.devices)
        n = self.dims.num_experts
        if self.expert_device is None:
            if n != u:
                raise ConfigError(f"{n} experts need an expert_device map onto {u} devices")
        else:
            emap = tuple(int(k) for k in self.expert_device)
            if len(emap) != n or min(emap) < 0 or max(emap) >= u:
                raise ConfigError(f"expert_device must map {n} experts onto devices 0..{u - 1}")
            object.__setattr__(self, "expert_device", emap)

    @property
    def num_devices(self) -> int:
        return len(self.devices)

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def with_bandwidth(self, total_bandwidth_hz: float) -> "Scenario":
        return self.replace(radio=dataclasses.replace(self.radio, total_bandwidth_hz=total_bandwidth_hz))


@dataclass
class LatencyReport:
    """Batch-averaged metrics of one policy run.

    ``total_latency_s`` is the mean over batches of the summed block
    latencies; ``per_block_latency_s`` holds the per-block means, so the two
    agree up to rounding. ``allocations`` keeps one bandwidth split per batch.
    """

    policy: str
    per_block_latency_s: list[float]
    total_latency_s: float
    total_latency_ci95_s: float
    wlr_total: float
    active_pairs: float
    allocations: list[list[float]]
    batches: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LatencyReport":
        return cls(**{f.name: data[f.name] for f in dataclasses.fields(cls)})


def default_devices(
    distances_m=(10.0, 20.0, 40.0, 60.0, 100.0, 150.0, 220.0, 300.0),
    compute_flops=(2e13, 5e12, 1e13, 2e12, 5e12, 1e13, 2e12, 5e12),
) -> tuple[DeviceProfile, ...]:
    """Eight heterogeneous devices: mixed distances and GPU classes."""
    return tuple(
        DeviceProfile(k, float(d), p_down_w=10.0, p_up_w=0.2, compute_flops=float(c))
        for k, (d, c) in enumerate(zip(distances_m, compute_flops))
    )


DEFAULT_TOKENS = 256
DEFAULT_PEAKEDNESS = 1.0


def default_trace(seed: int = 0, dims: ModelDims | None = None) -> GatingTrace:
    """Synthetic trace sized for the default scenario (a few prompts per batch)."""
    dims = dims or ModelDims()
    return synth_trace(seed, dims.num_blocks, DEFAULT_TOKENS, dims.num_experts, DEFAULT_PEAKEDNESS)


def default_scenario(policy: str = FULL, seed: int = 0, batches: int = 100, **dims) -> Scenario:
    return Scenario(
        radio=RadioConfig(),
        devices=default_devices(),
        dims=ModelDims(**dims),
        policy=policy,
        seed=seed,
        batches=batches,
    )


def draw_channels(scenario: Scenario, batch: int) -> list[ChannelState]:
    """Channel gains for one batch; depends only on (seed, batch, fading mode)."""
    if scenario.fading_mode == "none":
        return [sample_channel(d, scenario.radio, fading=False) for d in scenario.devices]
    key = batch if scenario.fading_mode == "per_batch" else 0
    rng = np.random.default_rng([scenario.seed, key])
    return [sample_channel(d, scenario.radio, rng) for d in scenario.devices]


def _check_trace(scenario: Scenario, trace: GatingTrace) -> None:
    dims = scenario.dims
    if trace.num_experts != dims.num_experts:
        raise ConfigError(f"trace has {trace.num_experts} experts, model has {dims.num_experts}")
    if trace.num_blocks != dims.num_blocks:
        raise ConfigError(f"trace has {trace.num_blocks} blocks, model has {dims.num_blocks}")


def _testbed_selection(scenario: Scenario, trace: GatingTrace, t_uniform: np.ndarray) -> SelectionMatrix:
    """Block-by-block bottleneck offloading with a history fed by observations.

    The history starts from one probe token per device and is updated with
    each block's observed per-device latency.
    """
    u = scenario.num_devices
    history = LatencyHistory(u)
    for k in range(u):
        update_history(history, k, float(t_uniform[k]), 1)
    masks = []
    for i in range(trace.num_blocks):
        k = min(scenario.selection.top_k, trace.num_experts)
        mask = testbed_select(trace, history, i, scenario.expert_device, k)
        masks.append(mask)
        loads = SelectionMatrix(mask[None], scenario.expert_device, u).device_loads()[0]
        for k in np.nonzero(loads)[0]:
            update_history(history, int(k), float(loads[k] * t_uniform[k]), int(loads[k]))
    return SelectionMatrix(np.stack(masks), scenario.expert_device, u)


@dataclass
class _BatchResult:
    block_latency: np.ndarray
    wlr_total: float
    active_pairs: int
    shares: np.ndarray
    selection: SelectionMatrix


def _wlr_total(sel: SelectionMatrix, trace: GatingTrace, per_token: np.ndarray) -> float:
    loads = sel.device_loads()
    mass = sel.device_weight_sums(trace)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(loads > 0, mass / (loads * per_token), 0.0)
    return float(ratio.sum())


def select_experts(scenario: Scenario, trace: GatingTrace, channels) -> SelectionMatrix:
    """The policy's expert selection, computed from even-split latencies."""
    u = scenario.num_devices
    uniform = uniform_allocation(u, scenario.radio)
    t_uniform = per_token_latency(uniform, scenario.devices, channels, scenario.dims, scenario.radio)
    policy = scenario.policy
    cfg = scenario.selection
    if policy in (BASELINE, NO_SELECTION):
        return top_k_select(trace, min(cfg.top_k, trace.num_experts), scenario.expert_device, u)
    if policy in (FULL, NO_BANDWIDTH):
        return wdmoe_select(trace, t_uniform, cfg, scenario.expert_device, u)
    return _testbed_selection(scenario, trace, t_uniform)


def _run_batch(scenario: Scenario, trace: GatingTrace, batch: int) -> _BatchResult:
    channels = draw_channels(scenario, batch)
    sel = select_experts(scenario, trace, channels)
    args = (scenario.devices, channels, scenario.dims, scenario.radio)
    if scenario.policy in (FULL, NO_SELECTION):
        alloc, _ = allocate(sel, *args)
    else:
        alloc = uniform_allocation(scenario.num_devices, scenario.radio)
    per_token = per_token_latency(alloc, *args)
    return _BatchResult(
        block_latency=block_latencies(alloc, sel, *args),
        wlr_total=_wlr_total(sel, trace, per_token),
        active_pairs=sel.active_pairs,
        shares=alloc.shares,
        selection=sel,
    )


def _threads() -> int:
    raw = os.environ.get("WDMOE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"WDMOE_THREADS must be an integer, got {raw!r}") from None


def _run_batches(scenario: Scenario, trace: GatingTrace) -> list[_BatchResult]:
    _check_trace(scenario, trace)
    batches = range(scenario.batches)
    workers = min(_threads(), scenario.batches)
    if workers == 1:
        return [_run_batch(scenario, trace, b) for b in batches]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda b: _run_batch(scenario, trace, b), batches))


def _report(policy: str, results: list[_BatchResult]) -> LatencyReport:
    blocks = np.stack([r.block_latency for r in results])
    totals = blocks.sum(axis=1)
    n = len(results)
    ci = 1.96 * float(totals.std(ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    return LatencyReport(
        policy=policy,
        per_block_latency_s=[float(x) for x in blocks.mean(axis=0)],
        total_latency_s=float(totals.mean()),
        total_latency_ci95_s=ci,
        wlr_total=float(np.mean([r.wlr_total for r in results])),
        active_pairs=float(np.mean([r.active_pairs for r in results])),
        allocations=[[float(x) for x in r.shares] for r in results],
        batches=n,
    )


def run(scenario: Scenario, trace: GatingTrace) -> LatencyReport:
    """Run ``scenario.policy`` over every batch and average the metrics.

    Batches replay the same trace under their own channel draw, so every
    policy sees identical inputs for a given seed.
    """
    return _report(scenario.policy, _run_batches(scenario, trace))


def run_policies(scenario: Scenario, trace: GatingTrace, policies) -> dict[str, LatencyReport]:
    return {p: run(scenario.replace(policy=p), trace) for p in policies}


def sweep_bandwidth(
    scenario: Scenario, trace: GatingTrace, b_values, policies=(BASELINE, FULL)
) -> dict[str, list[tuple[float, float]]]:
    """Mean batch latency of each policy at each total bandwidth."""
    b_values = [float(b) for b in b_values]
    if any(b <= 0 for b in b_values):
        raise ValueError("bandwidth values must be positive")
    if any(b2 <= b1 for b1, b2 in zip(b_values, b_values[1:])):
        raise ValueError("bandwidth values must be strictly ascending")
    curves: dict[str, list[tuple[float, float]]] = {p: [] for p in policies}
    for b in b_values:
        at_b = scenario.with_bandwidth(b)
        for p in policies:
            curves[p].append((b, run(at_b.replace(policy=p), trace).total_latency_s))
    return curves


def expert_pair_ratio(selection: SelectionMatrix, block: int) -> float:
    """Largest share of two-expert tokens that picked the same expert pair."""
    mask = selection.mask[block]
    pairs = mask[mask.sum(axis=1) == 2]
    if pairs.shape[0] == 0:
        return 0.0
    idx = np.nonzero(pairs)[1].reshape(-1, 2)
    n = mask.shape[1]
    counts = np.bincount(idx[:, 0] * n + idx[:, 1], minlength=n * n)
    return float(counts.max() / pairs.shape[0])
