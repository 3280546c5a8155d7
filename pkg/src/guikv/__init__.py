"""Spatio-temporal KV-cache compression for multi-screenshot GUI agents."""

from .cache_model import (
    CompressionConfig,
    KeepSet,
    LayerTrace,
    LayoutError,
    PromptLayout,
    Segment,
    SegmentKind,
    build_layout,
)
from .scoring import Method, ScoreSheet, compress_prompt
from .traceio import read_trace, write_trace
from .workload import (
    Trajectory, TrajectoryParams, derive_probes, gen_trajectory, generate, reconstruction_error,
)

__version__ = "0.1.0"

__all__ = [
    "CompressionConfig",
    "KeepSet",
    "LayerTrace",
    "LayoutError",
    "Method",
    "PromptLayout",
    "ScoreSheet",
    "Segment",
    "SegmentKind",
    "Trajectory",
    "TrajectoryParams",
    "derive_probes",
    "generate",
    "build_layout",
    "compress_prompt",
    "gen_trajectory",
    "read_trace",
    "reconstruction_error",
    "write_trace",
]
