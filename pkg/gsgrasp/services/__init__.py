"""Services package - rendering, training, query and grasp logic."""
from .efd import FeatureDecoder
from .grasp import (
    BoundingBoxFilter,
    ForceClosureFilter,
    GraspFilter,
    GraspSelection,
    select_grasp,
)
from .pipeline import SceneQueryService
from .query import localize
from .rasterizer import rasterize, render_forward

__all__ = [
    "BoundingBoxFilter",
    "FeatureDecoder",
    "ForceClosureFilter",
    "GraspFilter",
    "GraspSelection",
    "SceneQueryService",
    "localize",
    "rasterize",
    "render_forward",
    "select_grasp",
]
