"""Bandwidth split that minimises the summed attention waiting latency.

For a fixed selection the objective is

    F(B) = sum_i max_k  n_ik * g_k(B_k),
    g_k(B) = L / R_down_k(B) + L / R_up_k(B) + L_comp / C_k,

over ``{B >= 0, sum(B) = B_total}``, where ``n_ik`` is the number of tokens
device ``k`` serves in block ``i``. Each ``g_k`` is convex and decreasing, so
F is convex but non-smooth.

The solver runs a short projected-subgradient phase from the even split,
then minimises a log-sum-exp smoothing of F with equality-constrained Newton
steps while the smoothing temperature is driven to ~0. Optimality is
certified with a Lagrangian lower bound whose multipliers are chosen by a
small LP at the returned point; the relative gap is reported as
``kkt_residual``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .channel import ChannelState, DeviceProfile, RadioConfig, shannon_rate
from .latency import ModelDims, expert_flops, token_comm_bits

__all__ = [
    "BandwidthAllocation",
    "SolverReport",
    "project_simplex",
    "per_token_latency",
    "block_latencies",
    "objective",
    "allocate",
    "uniform_allocation",
    "convexity_probe",
]

MAX_ITERATIONS = 600
SUBGRADIENT_STEPS = 60
NEWTON_STEPS_PER_STAGE = 60
TEMPERATURES = tuple(10.0 ** -e for e in range(1, 12))
_FLOOR = 1e-9
_LN2 = math.log(2.0)


@dataclass(frozen=True, eq=False)
class BandwidthAllocation:
    shares: np.ndarray

    def __post_init__(self) -> None:
        shares = np.array(self.shares, dtype=np.float64, copy=True)
        shares.setflags(write=False)
        object.__setattr__(self, "shares", shares)

    @property
    def total(self) -> float:
        return float(self.shares.sum())

    def tolist(self) -> list[float]:
        return [float(x) for x in self.shares]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BandwidthAllocation):
            return NotImplemented
        return np.array_equal(self.shares, other.shares)


@dataclass(frozen=True)
class SolverReport:
    objective_s: float
    iterations: int
    converged: bool
    kkt_residual: float
    degenerate: bool = False


def project_simplex(v, total: float = 1.0) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{x >= 0, sum(x) = total}``."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def uniform_allocation(num_devices: int, radio: RadioConfig) -> BandwidthAllocation:
    return BandwidthAllocation(np.full(num_devices, radio.total_bandwidth_hz / num_devices))


class _Instance:
    """Per-device constants of one P3 instance."""

    def __init__(self, selection, devices, channels, dims: ModelDims, radio: RadioConfig):
        devices = list(devices)
        channels = list(channels)
        if len(devices) != len(channels):
            raise ValueError("need one channel state per device")
        if selection.num_devices != len(devices):
            raise ValueError(
                f"selection maps onto {selection.num_devices} devices, got {len(devices)} profiles"
            )
        n0 = radio.noise_psd_w_hz
        self.total = radio.total_bandwidth_hz
        self.bits = float(token_comm_bits(dims))
        self.p_down = np.array([d.p_down_w for d in devices])
        self.p_up = np.array([d.p_up_w for d in devices])
        self.g_down = np.array([c.g_down for c in channels])
        self.g_up = np.array([c.g_up for c in channels])
        self.n0 = n0
        self.snr_down = self.p_down * self.g_down / n0
        self.snr_up = self.p_up * self.g_up / n0
        self.comp = expert_flops(dims) / np.array([d.compute_flops for d in devices])
        self.loads = selection.device_loads().astype(np.float64)

    @property
    def num_devices(self) -> int:
        return self.comp.size

    def per_token(self, bw: np.ndarray) -> np.ndarray:
        bw = np.asarray(bw, dtype=np.float64)
        r_down = shannon_rate(bw, self.p_down, self.g_down, self.n0)
        r_up = shannon_rate(bw, self.p_up, self.g_up, self.n0)
        with np.errstate(divide="ignore"):
            return self.bits / r_down + self.bits / r_up + self.comp

    def block_latencies(self, bw: np.ndarray) -> np.ndarray:
        per = self.per_token(bw)
        with np.errstate(invalid="ignore"):
            terms = np.where(self.loads > 0, self.loads * per[..., None, :], 0.0)
        return terms.max(axis=-1)

    def objective(self, bw: np.ndarray) -> float:
        return float(self.block_latencies(bw).sum())


def _latency_and_derivatives(inst: _Instance, idx: np.ndarray, x: np.ndarray):
    """``g_k`` and its first two derivatives with respect to the share ``x_k``."""
    bw = inst.total * x
    g = inst.comp[idx].copy()
    g1 = np.zeros_like(x)
    g2 = np.zeros_like(x)
    for snr in (inst.snr_down[idx], inst.snr_up[idx]):
        lg = np.log1p(snr / bw)
        rate = bw * lg / _LN2
        d1 = (lg - snr / (bw + snr)) / _LN2
        d2 = -snr * snr / (_LN2 * bw * (bw + snr) ** 2)
        g += inst.bits / rate
        g1 += -inst.bits * d1 / rate**2
        g2 += inst.bits * (2.0 * d1 * d1 / rate**3 - d2 / rate**2)
    return g, g1 * inst.total, g2 * inst.total**2


class _Smoothed:
    """Normalised P3 restricted to loaded devices, with log-sum-exp smoothing."""

    def __init__(self, inst: _Instance, idx: np.ndarray, scale: float):
        self.inst = inst
        self.idx = idx
        loads = inst.loads[:, idx]
        keep = loads.sum(axis=1) > 0
        self.loads = loads[keep] / scale
        self.active = self.loads > 0
        self.scale = scale

    def terms(self, x):
        g, g1, g2 = _latency_and_derivatives(self.inst, self.idx, x)
        return self.loads * g, self.loads * g1, self.loads * g2

    def value(self, x) -> float:
        f, _, _ = self.terms(x)
        return float(f.max(axis=1).sum())

    def subgradient(self, x) -> np.ndarray:
        f, f1, _ = self.terms(x)
        top = np.argmax(np.where(self.active, f, -np.inf), axis=1)
        grad = np.zeros_like(x)
        np.add.at(grad, top, f1[np.arange(f.shape[0]), top])
        return grad

    def softmax(self, f, tau):
        z = np.where(self.active, f / tau, -np.inf)
        zmax = z.max(axis=1, keepdims=True)
        e = np.exp(z - zmax)
        s = e.sum(axis=1, keepdims=True)
        return e / s, float(tau * (zmax[:, 0] + np.log(s[:, 0])).sum())

    def smooth(self, x, tau, order: int = 2):
        f, f1, f2 = self.terms(x)
        p, val = self.softmax(f, tau)
        if order == 0:
            return val
        pf1 = p * f1
        grad = pf1.sum(axis=0)
        hess = np.diag((p * f2).sum(axis=0) + (p * f1 * f1).sum(axis=0) / tau) - pf1.T @ pf1 / tau
        return val, grad, hess

    def lower_bound(self, x) -> float:
        """Best Lagrangian lower bound on the optimum certified at ``x``.

        For multipliers ``mu_i`` on the simplex of block ``i``'s max terms,
        ``min_y sum_ik mu_ik f_ik(y)`` bounds the optimum from below, and its
        linearisation at ``x`` bounds that. Maximising the result over ``mu``
        is a small LP; the bound meets ``value(x)`` exactly at an optimum.
        """
        f, f1, _ = self.terms(x)
        rows, cols = np.nonzero(self.active)
        nv = rows.size
        nb, m = f.shape
        # variables: mu (one per active term), then the scalar s
        c = np.concatenate([-(f - f1 * x)[rows, cols], [-1.0]])
        a_ub = np.zeros((m, nv + 1))
        a_ub[cols, np.arange(nv)] = -f1[rows, cols]
        a_ub[:, nv] = 1.0
        a_eq = np.zeros((nb, nv + 1))
        a_eq[rows, np.arange(nv)] = 1.0
        res = linprog(
            c,
            A_ub=a_ub,
            b_ub=np.zeros(m),
            A_eq=a_eq,
            b_eq=np.ones(nb),
            bounds=[(0, None)] * nv + [(None, None)],
            method="highs",
        )
        if res.status != 0:
            return -math.inf
        return float(-res.fun)


def _project_floored(v: np.ndarray, floor: float) -> np.ndarray:
    m = v.size
    return project_simplex(v - floor, 1.0 - m * floor) + floor


def _newton_stage(prob: _Smoothed, x: np.ndarray, tau: float, budget: int):
    steps = 0
    m = x.size
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, m] = 1.0
    kkt[m, :m] = 1.0
    while steps < budget:
        val, grad, hess = prob.smooth(x, tau)
        reg = 1e-14 * max(float(np.abs(np.diag(hess)).max()), 1.0)
        kkt[:m, :m] = hess + reg * np.eye(m)
        rhs = np.concatenate([-grad, [0.0]])
        try:
            d = np.linalg.solve(kkt, rhs)[:m]
        except np.linalg.LinAlgError:
            d = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:m]
        d -= d.mean()
        decrement = -float(grad @ d)
        steps += 1
        if not decrement > 1e-15 * max(abs(val), 1.0):
            break
        neg = d < 0
        s = min(1.0, 0.99 * float(np.min(-(x[neg] - _FLOOR) / d[neg]))) if neg.any() else 1.0
        while s > 1e-12:
            trial = x + s * d
            if prob.smooth(trial, tau, order=0) <= val - 0.25 * s * decrement:
                break
            s *= 0.5
        else:
            break
        x = x + s * d
    return x, steps


def allocate(
    selection,
    devices,
    channels,
    dims: ModelDims,
    radio: RadioConfig,
    tolerance: float = 1e-5,
    max_iter: int | None = None,
) -> tuple[BandwidthAllocation, SolverReport]:
    """Minimise the summed block latency over the bandwidth simplex.

    Devices that serve no token in any block get exactly zero bandwidth.
    The result is never worse than the even split over all devices.
    ``converged`` means the certified relative optimality gap is within
    ``tolerance``.
    """
    inst = _Instance(selection, devices, channels, dims, radio)
    u = inst.num_devices
    total = inst.total
    uniform = np.full(u, total / u)
    loaded = np.nonzero(inst.loads.sum(axis=0) > 0)[0]
    if loaded.size == 0:
        obj = inst.objective(uniform)
        return BandwidthAllocation(uniform), SolverReport(obj, 0, True, 0.0, degenerate=True)

    budget = MAX_ITERATIONS if max_iter is None else max_iter
    scale = inst.objective(uniform)
    prob = _Smoothed(inst, loaded, scale)

    x = _project_floored(np.full(loaded.size, 1.0 / u), _FLOOR)
    candidates = [x]
    best_val = prob.value(x)
    best = x
    iterations = 0

    # projected subgradient warm start with diminishing steps
    step0 = 0.5 / loaded.size
    for t in range(min(SUBGRADIENT_STEPS, budget)):
        g = prob.subgradient(x)
        norm = float(np.linalg.norm(g))
        iterations += 1
        if norm == 0.0:
            break
        x = _project_floored(x - step0 / math.sqrt(t + 1.0) * g / norm, _FLOOR)
        val = prob.value(x)
        if val < best_val:
            best_val, best = val, x
    candidates.append(best)

    # smoothing continuation, each stage warm-started from the previous one
    x = best
    for tau in TEMPERATURES:
        remaining = budget - iterations
        if remaining <= 0:
            break
        x, used = _newton_stage(prob, x, tau, min(NEWTON_STEPS_PER_STAGE, remaining))
        iterations += used
    candidates.append(_project_floored(x, _FLOOR))

    x = min(candidates, key=prob.value)
    shares = np.zeros(u)
    shares[loaded] = project_simplex(x, 1.0) * total
    if inst.objective(uniform) < inst.objective(shares):
        shares = uniform
    obj = inst.objective(shares)

    if np.array_equal(shares, uniform):
        x_loaded = np.full(loaded.size, 1.0 / u)
    else:
        x_loaded = shares[loaded] / total
    bound = prob.lower_bound(np.maximum(x_loaded, _FLOOR)) * scale
    gap = max(0.0, (obj - bound) / obj) if obj > 0 else 0.0
    report = SolverReport(obj, iterations, bool(gap <= tolerance), gap)
    return BandwidthAllocation(shares), report


def per_token_latency(allocation, devices, channels, dims: ModelDims, radio: RadioConfig) -> np.ndarray:
    """Round-trip per-token latency of every device, shape ``(U,)``."""
    from .selection import SelectionMatrix

    u = len(list(devices))
    dummy = SelectionMatrix(np.ones((1, 1, u), dtype=bool))
    inst = _Instance(dummy, devices, channels, dims, radio)
    shares = allocation.shares if isinstance(allocation, BandwidthAllocation) else allocation
    return inst.per_token(np.asarray(shares, dtype=np.float64))


def block_latencies(allocation, selection, devices, channels, dims, radio) -> np.ndarray:
    inst = _Instance(selection, devices, channels, dims, radio)
    shares = allocation.shares if isinstance(allocation, BandwidthAllocation) else allocation
    return inst.block_latencies(np.asarray(shares, dtype=np.float64))


def objective(allocation, selection, devices, channels, dims, radio) -> float:
    """``sum_i max_k q_ik * t_k(B_k)``; ``inf`` if a loaded device has no bandwidth."""
    return float(block_latencies(allocation, selection, devices, channels, dims, radio).sum())


def convexity_probe(
    selection,
    devices,
    channels,
    dims: ModelDims,
    radio: RadioConfig,
    rng: np.random.Generator,
    trials: int,
) -> float:
    """Worst midpoint-convexity violation over random feasible pairs."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    inst = _Instance(selection, devices, channels, dims, radio)
    u = inst.num_devices
    a = rng.dirichlet(np.ones(u), size=trials) * inst.total
    b = rng.dirichlet(np.ones(u), size=trials) * inst.total
    fa = inst.block_latencies(a).sum(axis=-1)
    fb = inst.block_latencies(b).sum(axis=-1)
    fm = inst.block_latencies(0.5 * (a + b)).sum(axis=-1)
    return float(np.max(fm - 0.5 * (fa + fb)))
