"""Per-token and per-block latency, attention waiting time and WLR."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .channel import ChannelState, DeviceProfile, RadioConfig, downlink_rate, uplink_rate

__all__ = [
    "ModelDims",
    "TokenLatency",
    "token_comm_bits",
    "expert_flops",
    "token_latency",
    "device_block_latency",
    "attention_waiting_latency",
    "wlr",
]


@dataclass(frozen=True)
class ModelDims:
    """Shape of the distributed MoE model. Defaults follow Mixtral-8x7B."""

    embed_dim: int = 4096
    hidden_dim: int = 14336
    quant_bits: int = 16
    act_flops_per_elem: int = 4
    num_blocks: int = 32
    num_experts: int = 8

    def __post_init__(self) -> None:
        for name in ("embed_dim", "hidden_dim", "num_blocks", "num_experts"):
            value = getattr(self, name)
            if not (isinstance(value, int) and value > 0):
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.quant_bits not in (8, 16, 32):
            raise ValueError(f"quant_bits must be 8, 16 or 32, got {self.quant_bits!r}")
        if not (isinstance(self.act_flops_per_elem, int) and self.act_flops_per_elem >= 0):
            raise ValueError("act_flops_per_elem must be a nonnegative integer")


@dataclass(frozen=True)
class TokenLatency:
    comm_s: float
    comp_s: float
    total_s: float = field(init=False)

    def __post_init__(self) -> None:
        if self.comm_s < 0 or self.comp_s < 0:
            raise ValueError(f"latencies must be nonnegative: {self.comm_s}, {self.comp_s}")
        object.__setattr__(self, "total_s", self.comm_s + self.comp_s)


def token_comm_bits(dims: ModelDims) -> int:
    return dims.quant_bits * dims.embed_dim


def expert_flops(dims: ModelDims) -> int:
    m, mh = dims.embed_dim, dims.hidden_dim
    return 4 * m * mh + 2 * mh * m + dims.act_flops_per_elem * mh + mh


def token_latency(
    dims: ModelDims,
    bandwidth_hz: float,
    profile: DeviceProfile,
    channel: ChannelState,
    radio: RadioConfig,
) -> TokenLatency:
    """Round-trip latency of one token on one device.

    A device with zero bandwidth is unreachable and gets ``comm_s = inf``.
    """
    comp = expert_flops(dims) / profile.compute_flops
    if bandwidth_hz <= 0:
        return TokenLatency(comm_s=math.inf, comp_s=comp)
    bits = token_comm_bits(dims)
    r_down = downlink_rate(bandwidth_hz, profile, channel, radio)
    r_up = uplink_rate(bandwidth_hz, profile, channel, radio)
    return TokenLatency(comm_s=bits / r_down + bits / r_up, comp_s=comp)


def _seconds(per_token) -> float:
    return per_token.total_s if isinstance(per_token, TokenLatency) else float(per_token)


def device_block_latency(selection, block: int, device: int, per_token) -> float:
    """Serial time for ``device`` to handle every token routed to it in ``block``."""
    count = int(selection.device_loads()[block, device])
    if count == 0:
        return 0.0
    return count * _seconds(per_token)


def attention_waiting_latency(per_device) -> float:
    values = [float(v) for v in per_device]
    if not values:
        raise ValueError("attention waiting latency needs at least one device")
    return max(values)


def wlr(selection, weights, block: int, device: int, per_token) -> float:
    """Assigned gating weight over busy time; an idle device scores 0."""
    busy = device_block_latency(selection, block, device, per_token)
    if busy == 0.0:
        return 0.0
    mass = float(selection.device_weight_sums(weights)[block, device])
    return mass / busy
