"""Radio channel: path loss, Rayleigh fading and Shannon rates.

Frequencies are in GHz for the path-loss formula only; everything else is SI
(Hz, W, m). Noise PSD is configured in dBm/Hz and converted on use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RadioConfig",
    "DeviceProfile",
    "ChannelState",
    "path_loss_db",
    "mean_amplitude",
    "rayleigh_amplitudes",
    "sample_channel",
    "shannon_rate",
    "downlink_rate",
    "uplink_rate",
]


@dataclass(frozen=True)
class RadioConfig:
    carrier_ghz: float = 3.5
    noise_psd_dbm_hz: float = -174.0
    total_bandwidth_hz: float = 100e6

    def __post_init__(self) -> None:
        if not self.carrier_ghz > 0:
            raise ValueError(f"carrier_ghz must be positive, got {self.carrier_ghz}")
        if not self.total_bandwidth_hz > 0:
            raise ValueError(
                f"total_bandwidth_hz must be positive, got {self.total_bandwidth_hz}"
            )

    @property
    def noise_psd_w_hz(self) -> float:
        return 10.0 ** ((self.noise_psd_dbm_hz - 30.0) / 10.0)


@dataclass(frozen=True)
class DeviceProfile:
    id: int
    distance_m: float
    p_down_w: float = 10.0
    p_up_w: float = 0.2
    compute_flops: float = 5e12

    def __post_init__(self) -> None:
        for name in ("distance_m", "p_down_w", "p_up_w", "compute_flops"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"device {self.id}: {name} must be positive, got {value}")


@dataclass(frozen=True)
class ChannelState:
    g_down: float
    g_up: float

    def __post_init__(self) -> None:
        if not (self.g_down > 0 and self.g_up > 0):
            raise ValueError(f"channel gains must be positive: {self}")


def path_loss_db(distance_m: float, carrier_ghz: float) -> float:
    if not distance_m > 0:
        raise ValueError(f"distance must be positive, got {distance_m}")
    if not carrier_ghz > 0:
        raise ValueError(f"carrier frequency must be positive, got {carrier_ghz}")
    return 32.4 + 20.0 * math.log10(carrier_ghz) + 20.0 * math.log10(distance_m)


def mean_amplitude(distance_m: float, carrier_ghz: float) -> float:
    """Mean fading amplitude ``10**(-PL/20)`` for the given geometry."""
    return 10.0 ** (-path_loss_db(distance_m, carrier_ghz) / 20.0)


def rayleigh_amplitudes(mean: float, size, rng: np.random.Generator) -> np.ndarray:
    """Rayleigh amplitudes whose distribution mean is ``mean``.

    A Rayleigh variable with scale ``s`` has mean ``s * sqrt(pi / 2)``.
    """
    scale = mean / math.sqrt(math.pi / 2.0)
    return rng.rayleigh(scale, size)


def sample_channel(
    profile: DeviceProfile,
    radio: RadioConfig,
    rng: np.random.Generator | None = None,
    fading: bool = True,
) -> ChannelState:
    """Draw downlink and uplink power gains for one device.

    The downlink amplitude is drawn first, then the uplink one, so a seeded
    generator gives a reproducible pair. With ``fading=False`` both gains are
    the squared mean amplitude and ``rng`` is not touched.
    """
    mu = mean_amplitude(profile.distance_m, radio.carrier_ghz)
    if not fading:
        return ChannelState(g_down=mu * mu, g_up=mu * mu)
    if rng is None:
        raise ValueError("a seeded generator is required when fading is enabled")
    h_down, h_up = rayleigh_amplitudes(mu, 2, rng)
    return ChannelState(g_down=float(h_down * h_down), g_up=float(h_up * h_up))


def shannon_rate(bandwidth_hz, power_w, gain, noise_psd_w_hz):
    """``B * log2(1 + P g / (N0 B))`` with the B -> 0 limit taken as 0.

    Accepts scalars or numpy arrays (broadcast elementwise).
    """
    bw = np.asarray(bandwidth_hz, dtype=float)
    if np.any(bw < 0):
        raise ValueError("bandwidth must be nonnegative")
    snr_hz = np.asarray(power_w, dtype=float) * np.asarray(gain, dtype=float) / noise_psd_w_hz
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = bw * np.log1p(snr_hz / bw) / math.log(2.0)
    rate = np.where(bw > 0, rate, 0.0)
    if rate.ndim == 0:
        return float(rate)
    return rate


def downlink_rate(bandwidth_hz, profile: DeviceProfile, channel: ChannelState, radio: RadioConfig):
    return shannon_rate(bandwidth_hz, profile.p_down_w, channel.g_down, radio.noise_psd_w_hz)


def uplink_rate(bandwidth_hz, profile: DeviceProfile, channel: ChannelState, radio: RadioConfig):
    return shannon_rate(bandwidth_hz, profile.p_up_w, channel.g_up, radio.noise_psd_w_hz)
