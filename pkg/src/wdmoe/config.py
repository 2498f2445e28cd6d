"""JSON run configuration.

Every field is optional except ``trace``, which must name exactly one
source. Omitted devices fall back to the eight-device default scenario.

Example::

    {
      "policies": ["baseline_top2_uniform", "wdmoe_full"],
      "seed": 0,
      "batches": 100,
      "radio": {"total_bandwidth_hz": 1e8},
      "trace": {"synth": {"seed": 0, "tokens": 256, "peakedness": 1.0}}
    }
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .channel import DeviceProfile, RadioConfig
from .latency import ModelDims
from .selection import SelectionPolicyConfig
from .simulator import (
    DEFAULT_PEAKEDNESS,
    DEFAULT_TOKENS,
    FADING_MODES,
    POLICIES,
    ConfigError,
    Scenario,
    default_devices,
)
from .trace import GatingTrace, load_trace, synth_trace

__all__ = ["RunConfig", "load_config", "parse_config"]

Policy = Literal[POLICIES]  # type: ignore[valid-type]
FadingMode = Literal[FADING_MODES]  # type: ignore[valid-type]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RadioModel(_Strict):
    carrier_ghz: float = Field(3.5, gt=0)
    noise_psd_dbm_hz: float = -174.0
    total_bandwidth_hz: float = Field(100e6, gt=0)


class DeviceModel(_Strict):
    distance_m: float = Field(gt=0)
    p_down_w: float = Field(10.0, gt=0)
    p_up_w: float = Field(0.2, gt=0)
    compute_flops: float = Field(5e12, gt=0)


class DimsModel(_Strict):
    embed_dim: int = Field(4096, gt=0)
    hidden_dim: int = Field(14336, gt=0)
    quant_bits: Literal[8, 16, 32] = 16
    act_flops_per_elem: int = Field(4, ge=0)
    num_blocks: int = Field(32, gt=0)
    num_experts: int = Field(8, gt=0)


class SelectionModel(_Strict):
    top_k: int = Field(2, ge=1)
    theta_init: float = Field(0.5, ge=-1, le=1)
    theta_step: float = Field(0.1, gt=0)
    theta_max: float = 1.0
    wlr_growth: float = 1.01
    wlr_window_blocks: Optional[int] = Field(None, ge=1)


class SynthModel(_Strict):
    seed: int = Field(0, ge=0)
    tokens: int = Field(DEFAULT_TOKENS, gt=0)
    peakedness: float = Field(DEFAULT_PEAKEDNESS, ge=0)


class TraceSource(_Strict):
    path: Optional[str] = None
    synth: Optional[SynthModel] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.synth is None):
            raise ValueError("trace needs exactly one of 'path' or 'synth'")
        return self


class VerifyModel(_Strict):
    allocation_instances: int = Field(10, ge=1)
    selection_instances: int = Field(100, ge=1)
    testbed_instances: int = Field(200, ge=1)
    convexity_trials: int = Field(10_000, ge=1)
    selection_floor: float = Field(0.25, ge=0, le=1)


class RunConfig(_Strict):
    policies: list[Policy] = Field(default_factory=lambda: list(POLICIES), min_length=1)
    seed: int = Field(0, ge=0)
    batches: int = Field(100, ge=1)
    fading_mode: FadingMode = "per_batch"
    radio: RadioModel = Field(default_factory=RadioModel)
    devices: Optional[list[DeviceModel]] = Field(None, min_length=1)
    dims: DimsModel = Field(default_factory=DimsModel)
    selection: SelectionModel = Field(default_factory=SelectionModel)
    expert_device: Optional[list[int]] = None
    trace: TraceSource
    verify: VerifyModel = Field(default_factory=VerifyModel)
    out_dir: Optional[str] = None

    @model_validator(mode="after")
    def _top_k_fits(self):
        if self.selection.top_k > self.dims.num_experts:
            raise ValueError(f"top_k {self.selection.top_k} exceeds {self.dims.num_experts} experts")
        return self

    def device_profiles(self) -> tuple[DeviceProfile, ...]:
        if self.devices is None:
            return default_devices()
        return tuple(DeviceProfile(k, **d.model_dump()) for k, d in enumerate(self.devices))

    def model_dims(self) -> ModelDims:
        return ModelDims(**self.dims.model_dump())

    def radio_config(self) -> RadioConfig:
        return RadioConfig(**self.radio.model_dump())

    def scenario(self, policy: str | None = None) -> Scenario:
        return Scenario(
            radio=self.radio_config(),
            devices=self.device_profiles(),
            dims=self.model_dims(),
            policy=policy or self.policies[0],
            seed=self.seed,
            batches=self.batches,
            fading_mode=self.fading_mode,
            selection=SelectionPolicyConfig(**self.selection.model_dump()),
            expert_device=None if self.expert_device is None else tuple(self.expert_device),
        )

    def load_trace(self, base_dir: Path | None = None) -> GatingTrace:
        """Read or synthesise the trace; relative paths resolve against ``base_dir``."""
        if self.trace.path is not None:
            path = Path(self.trace.path)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return load_trace(path)
        s = self.trace.synth
        return synth_trace(s.seed, self.dims.num_blocks, s.tokens, self.dims.num_experts, s.peakedness)


def _line_of(text: str, loc) -> int:
    """Best-effort line of the key named by a validation error location."""
    pos = 0
    found = 0
    for part in loc:
        if isinstance(part, str):
            hit = text.find(f'"{part}"', pos)
            if hit < 0:
                break
            pos = found = hit
    return text.count("\n", 0, found) + 1


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate; errors carry ``source:line`` prefixes."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            where = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"{source}:{_line_of(text, err['loc'])}: {where}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None
    try:
        cfg.scenario()
    except (ConfigError, ValueError) as exc:
        raise ConfigError(f"{source}:1: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config(text, str(path))
