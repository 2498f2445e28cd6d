"""Latency model, expert selection and bandwidth allocation for wireless distributed MoE inference."""

from .allocator import BandwidthAllocation, SolverReport, allocate, convexity_probe, objective
from .channel import ChannelState, DeviceProfile, RadioConfig, sample_channel, shannon_rate
from .latency import ModelDims, TokenLatency, token_latency
from .selection import (
    LatencyHistory,
    SelectionMatrix,
    SelectionPolicyConfig,
    testbed_select,
    top_k_select,
    wdmoe_select,
)
from .simulator import (
    POLICIES,
    ConfigError,
    LatencyReport,
    Scenario,
    default_scenario,
    default_trace,
    run,
    sweep_bandwidth,
)
from .trace import GatingTrace, load_trace, synth_trace, write_trace

__version__ = "0.1.0"
