"""Track-community structure-from-motion with duplicate-structure
disambiguation and SIM(3) model merging."""

from .config import PipelineConfig
from .errors import TcsfmError
from .geometry import CameraPose, Intrinsics, SimilarityTransform, View
from .pipeline import PipelineResult, run_pipeline
from .sfm import Reconstruction
from .synth import GroundTruth, SceneSpec, evaluate_against_gt, generate_scene

__version__ = "0.1.0"

__all__ = [
    "CameraPose",
    "GroundTruth",
    "Intrinsics",
    "PipelineConfig",
    "PipelineResult",
    "Reconstruction",
    "SceneSpec",
    "SimilarityTransform",
    "TcsfmError",
    "View",
    "evaluate_against_gt",
    "generate_scene",
    "run_pipeline",
    "__version__",
]
