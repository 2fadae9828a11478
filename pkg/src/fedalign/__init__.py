"""Federated CLIP-style alignment with LoRA adapters, prototype-queried
aggregation and a server-side text tower, on toy block encoders."""

from .exceptions import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    EmptySupportError,
    FedAlignError,
    FormatError,
    GenerationError,
    InvariantViolation,
    ParameterError,
    ShapeError,
)
from .simulator import (
    RoundMetrics,
    RunConfig,
    RunResult,
    aggregation_report,
    comm_ledger,
    evaluate_checkpoints,
    run_baseline,
    run_training,
    save_checkpoints,
)
from .estimator import FedAlignClassifier

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DegenerateInputError",
    "EmptySupportError",
    "FedAlignClassifier",
    "FedAlignError",
    "FormatError",
    "GenerationError",
    "InvariantViolation",
    "ParameterError",
    "RoundMetrics",
    "RunConfig",
    "RunResult",
    "ShapeError",
    "aggregation_report",
    "comm_ledger",
    "evaluate_checkpoints",
    "run_baseline",
    "run_training",
    "save_checkpoints",
]
