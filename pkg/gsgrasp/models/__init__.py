"""Models package - runtime types and pydantic records."""
from .domain import CameraView, ConvexHull, Localization, PointCloud, RenderOutput, Scene
from .gaussian import GaussianField
from .schemas import (
    ErrorResponse,
    EvalReport,
    GraspDecision,
    GraspFilterConfig,
    GraspProposal,
    SceneManifest,
    TrainConfig,
)

__all__ = [
    # Runtime types
    "CameraView",
    "ConvexHull",
    "GaussianField",
    "Localization",
    "PointCloud",
    "RenderOutput",
    "Scene",
    # Records
    "ErrorResponse",
    "EvalReport",
    "GraspDecision",
    "GraspFilterConfig",
    "GraspProposal",
    "SceneManifest",
    "TrainConfig",
]
