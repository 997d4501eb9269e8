"""Open-world detection desk lab: superclass-recalibrated unknown scoring on a synthetic world."""

from .continual import BenchmarkConfig, run_benchmark, select_exemplars
from .core import BBox, Detection, SuperclassMap, TaskSpec, load_grouping, validate_superclass_map
from .estimator import OddOneOutDetector
from .owod_eval import EvalReport, average_precision, evaluate
from .pseudo import PseudoConfig, merge_pseudo, simulate_proposals
from .scoring import UnknownVariant, calibrate_threshold, recalibrate, unknown_score
from .synthworld import WorldConfig, generate

__version__ = "0.1.0"

__all__ = [
    "BBox", "BenchmarkConfig", "Detection", "EvalReport", "OddOneOutDetector", "PseudoConfig",
    "SuperclassMap", "TaskSpec", "UnknownVariant", "WorldConfig", "average_precision",
    "calibrate_threshold", "evaluate", "generate", "load_grouping", "merge_pseudo", "recalibrate",
    "run_benchmark", "select_exemplars", "simulate_proposals", "unknown_score", "validate_superclass_map",
]
