"""Focused continual test-time adaptation on a small numpy autodiff engine.

Only the warm-up-selected representation layers of a CNN are adapted online,
and the memory retained for backpropagation is accounted for exactly.
"""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import (ConfigError, FocttaError, GraphError, NumericError, PlanError,  # noqa: E402
                     ProfilingError, UsageError)
from .kernels import BACKEND  # noqa: E402
from .ops import BATCH_STATS, RUNNING_STATS  # noqa: E402
from .engine import Loss, analyze_retention, backward, forward  # noqa: E402
from .nn import (CNNConfig, ModelSplit, build_reference_cnn, load_checkpoint,  # noqa: E402
                 save_checkpoint, snapshot_frozen_reference)
from .memory import MemoryReport, measure_cost, predict_cost  # noqa: E402
from .data import CORRUPTIONS, DomainStream, corruption_stream, generate_source  # noqa: E402
from .warmup import AdaptationPlan, ImportanceVector, select_topk, warmup  # noqa: E402
from .runtime import MODES, AdaptOptions, RunResult, adapt_stream  # noqa: E402
from .config import ExperimentConfig  # noqa: E402

__all__ = [
    "__version__", "BACKEND", "BATCH_STATS", "RUNNING_STATS",
    "FocttaError", "ConfigError", "GraphError", "NumericError", "PlanError", "ProfilingError", "UsageError",
    "Loss", "analyze_retention", "backward", "forward",
    "CNNConfig", "ModelSplit", "build_reference_cnn", "load_checkpoint", "save_checkpoint",
    "snapshot_frozen_reference",
    "MemoryReport", "measure_cost", "predict_cost",
    "CORRUPTIONS", "DomainStream", "corruption_stream", "generate_source",
    "AdaptationPlan", "ImportanceVector", "select_topk", "warmup",
    "MODES", "AdaptOptions", "RunResult", "adapt_stream",
    "ExperimentConfig",
]
