"""
Pydantic models for configuration records and JSON file/HTTP payloads.
Tensor-carrying runtime types live in domain.py.
"""
import math
from typing import Any, ClassVar, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

SCENE_SCHEMA_VERSION = "ggs-scene/1"
CANONICAL_PHRASES = ["object", "things", "stuff", "texture"]


def _check_matrix4(values: List[float]) -> List[float]:
    if len(values) != 16:
        raise ValueError(f"expected 16 row-major floats, got {len(values)}")
    if not all(math.isfinite(v) for v in values):
        raise ValueError("matrix contains non-finite values")
    return values


# =============================================================================
# Scene manifest
# =============================================================================


class Intrinsics(BaseModel):
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float


class ViewRecord(BaseModel):
    """One calibrated RGB-D view with its annotation files."""

    view_id: str = Field(..., description="Unique view identifier")
    rgb: str = Field(..., description="8-bit RGB PNG, relative to the manifest")
    depth: str = Field(..., description="16-bit depth PNG, 0 = invalid")
    instance_map: Optional[str] = Field(default=None, description="16-bit instance id PNG")
    instance_features: Optional[str] = Field(default=None, description="GGIF feature file")
    intrinsics: Intrinsics
    pose: List[float] = Field(..., description="Camera-to-world 4x4, row-major")

    @field_validator("pose")
    @classmethod
    def check_pose(cls, value: List[float]) -> List[float]:
        return _check_matrix4(value)


class SceneManifest(BaseModel):
    """Scene description file, schema ggs-scene/1."""

    schema_version: Literal["ggs-scene/1"] = SCENE_SCHEMA_VERSION
    frame_id: str = Field(default="robot_base", description="World frame label")
    depth_scale: float = Field(
        default=1.0,
        gt=0,
        description="Millimeters per depth PNG unit",
    )
    embeddings: Optional[str] = Field(default=None, description="GGQE embedding file")
    canonical: List[str] = Field(
        default_factory=lambda: list(CANONICAL_PHRASES),
        description="Names of canonical phrase entries in the embedding file",
    )
    relevance_temperature: float = Field(
        default=1.0,
        gt=0,
        description="Logit scale applied to dot products in the relevance score",
    )
    views: List[ViewRecord] = Field(..., min_length=1)
    gt_masks: Dict[str, Dict[str, str]] = Field(
        default_factory=dict,
        description="query name -> view id -> ground-truth mask PNG",
    )

    @model_validator(mode="after")
    def check_unique_view_ids(self) -> "SceneManifest":
        ids = [v.view_id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate view_id in manifest")
        return self


# =============================================================================
# Training
# =============================================================================


class TrainConfig(BaseModel):
    """Optimization settings; also the keys of the key-value config file."""

    iterations: int = Field(default=3000, ge=0)
    seed: int = 0
    fine_tune: bool = False

    # Learning rates per attribute
    position_lr_init: float = Field(default=1.6e-4, ge=0)
    position_lr_final: float = Field(default=1.6e-6, ge=0)
    feature_lr: float = Field(default=2.5e-3, ge=0)
    latent_lr: float = Field(default=2.5e-3, ge=0)
    opacity_lr: float = Field(default=5e-2, ge=0)
    scaling_lr: float = Field(default=5e-3, ge=0)
    rotation_lr: float = Field(default=1e-3, ge=0)
    decoder_lr: float = Field(default=1e-3, ge=0)

    # Loss weights
    lambda_rgb: float = Field(default=1.0, ge=0)
    lambda_depth: float = Field(default=0.5, ge=0)
    lambda_normal: float = Field(default=0.05, ge=0)
    lambda_contr: float = Field(default=0.1, ge=0)
    lambda_distill: float = Field(default=0.1, ge=0)

    # Feature distillation sampling
    pair_budget: int = Field(default=4096, ge=1)
    pixels_per_mask: int = Field(default=8, ge=1)
    normalize_decoder_output: bool = True

    # Schedule
    sh_degree_interval: int = Field(default=1000, ge=1)
    max_sh_degree: int = Field(default=3, ge=0, le=3)
    prune_opacity: bool = False
    prune_threshold: float = Field(default=0.005, gt=0, lt=1)
    log_interval: int = Field(default=100, ge=1)

    @property
    def effective_iterations(self) -> int:
        """Fine-tune runs a tenth of the budget, rounded up."""
        if self.fine_tune:
            return math.ceil(self.iterations / 10)
        return self.iterations


class LossReport(BaseModel):
    """Per-iteration loss terms and weighted total."""

    iteration: int
    view_id: str
    rgb: float = 0.0
    depth: float = 0.0
    normal: float = 0.0
    contrastive: float = 0.0
    distill: float = 0.0
    total: float = 0.0
    valid_pixels: int = Field(default=0, description="Pixels with valid observed depth")

    TERMS: ClassVar[Tuple[str, ...]] = ("rgb", "depth", "normal", "contrastive", "distill")


# =============================================================================
# Grasp filtering
# =============================================================================


class GraspFilterConfig(BaseModel):
    """Force-closure filter parameters."""

    angle_sum_threshold: float = Field(
        default=math.radians(60.0),
        gt=0,
        lt=math.pi,
        description="Maximum sum of contact angles, radians",
    )
    normal_lookup_radius: float = Field(default=0.005, gt=0, description="Meters")
    use_normal_filter: bool = Field(
        default=True,
        description="Disable to select by score among bbox-feasible proposals only",
    )
    bbox_margin: float = Field(default=0.02, ge=0, description="Meters")


class GraspProposal(BaseModel):
    """Externally generated parallel-jaw grasp proposal."""

    pose: List[float] = Field(..., description="Gripper-to-world 4x4, row-major")
    width: float = Field(..., gt=0)
    height: float = 0.0
    depth: float = 0.0
    score: float
    contacts: Optional[List[List[float]]] = Field(
        default=None,
        description="Two 3D contact points, world frame",
    )

    @field_validator("pose")
    @classmethod
    def check_pose(cls, value: List[float]) -> List[float]:
        return _check_matrix4(value)

    @field_validator("contacts")
    @classmethod
    def check_contacts(cls, value: Optional[List[List[float]]]) -> Optional[List[List[float]]]:
        if value is None:
            return value
        if len(value) != 2 or any(len(p) != 3 for p in value):
            raise ValueError("contacts must be 2x3")
        return value

    @model_validator(mode="after")
    def check_contact_span(self) -> "GraspProposal":
        if self.contacts is not None:
            span = math.dist(self.contacts[0], self.contacts[1])
            if span > 1.5 * self.width:
                raise ValueError(f"contacts {span:.4f} m apart exceed 1.5 x width")
        return self


class GraspDecision(GraspProposal):
    """Proposal annotated with the filter outcome."""

    feasible: bool
    angle_sum_rad: Optional[float] = Field(
        default=None,
        description="Sum of contact angles; null when the normal filter is off or no surface was found",
    )
    reason: Optional[str] = Field(
        default=None,
        description="Rejection reason: outside_bbox, no_surface, degenerate_contacts or angle",
    )


# =============================================================================
# Misc JSON records
# =============================================================================


class HullRecord(BaseModel):
    """Convex hull as written by `query` and read by `update`."""

    vertices: List[List[float]]
    bbox_min: Optional[List[float]] = None
    bbox_max: Optional[List[float]] = None


class MotionRecord(BaseModel):
    """Rigid motion applied to a selection, row-major 4x4."""

    matrix: List[float]

    @field_validator("matrix")
    @classmethod
    def check_matrix(cls, value: List[float]) -> List[float]:
        return _check_matrix4(value)


# =============================================================================
# Synthetic scenes
# =============================================================================


class SyntheticObject(BaseModel):
    """Analytic shape placed in a synthetic scene."""

    name: str
    shape: Literal["sphere", "box"]
    center: List[float] = Field(..., min_length=3, max_length=3)
    size: List[float] = Field(
        ...,
        min_length=1,
        max_length=3,
        description="Sphere: [radius]; box: half extents [x, y, z]",
    )
    rotation: List[float] = Field(
        default_factory=lambda: [1.0, 0.0, 0.0, 0.0],
        description="Box orientation quaternion (w, x, y, z)",
    )
    color: List[float] = Field(..., min_length=3, max_length=3)

    @model_validator(mode="after")
    def check_size(self) -> "SyntheticObject":
        expected = 1 if self.shape == "sphere" else 3
        if len(self.size) != expected or any(s <= 0 for s in self.size):
            raise ValueError(f"{self.shape} needs {expected} positive size value(s)")
        return self


class CameraRing(BaseModel):
    """Cameras on a horizontal ring looking at a target, plus optional top-down."""

    count: int = Field(default=8, ge=1)
    radius: float = Field(default=0.6, gt=0)
    height: float = Field(default=0.45)
    target: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.05])
    top_down: bool = True
    top_down_height: float = Field(default=0.7, gt=0)


class SyntheticSceneSpec(BaseModel):
    """Full description of a generated test scene."""

    objects: List[SyntheticObject] = Field(..., min_length=1)
    cameras: CameraRing = Field(default_factory=CameraRing)
    width: int = Field(default=64, ge=4)
    height: int = Field(default=48, ge=4)
    fov_deg: float = Field(default=60.0, gt=0, lt=180)
    ground_plane: bool = True
    ground_color: List[float] = Field(default_factory=lambda: [0.5, 0.5, 0.5])
    depth_noise: float = Field(default=0.0, ge=0, description="Depth noise std, meters")
    rgb_noise: float = Field(default=0.0, ge=0)
    d_clip: int = Field(default=512, ge=4)
    relevance_temperature: float = Field(default=10.0, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def check_camera_count(self) -> "SyntheticSceneSpec":
        total = self.cameras.count + (1 if self.cameras.top_down else 0)
        if total < 2:
            raise ValueError("a synthetic scene needs at least 2 cameras")
        return self


# =============================================================================
# API Models (External)
# =============================================================================


class QueryRequest(BaseModel):
    """Open-vocabulary query over the loaded scene."""

    query: str = Field(..., min_length=1, description="Entry name in the embedding file")
    view_ids: Optional[List[str]] = Field(default=None, description="Subset of views")
    threshold: Optional[float] = Field(default=None, gt=0)


class QueryResponse(BaseModel):
    query: str
    bbox_min: List[float]
    bbox_max: List[float]
    hull_vertices: List[List[float]]
    mask_pixels: Dict[str, int] = Field(..., description="Object pixels per view")
    latency_ms: float


class GraspFilterRequest(BaseModel):
    """Filter proposals, optionally restricted to a queried object's bbox."""

    proposals: List[GraspProposal] = Field(..., min_length=1)
    query: Optional[str] = None
    config: GraspFilterConfig = Field(default_factory=GraspFilterConfig)


class GraspFilterResponse(BaseModel):
    selected: int = Field(..., description="Index of the chosen proposal in the input")
    proposals: List[GraspDecision]


class QueryEvaluation(BaseModel):
    """Segmentation and localization scores of one query."""

    query: str
    iou: Dict[str, float] = Field(default_factory=dict, description="view id -> IoU")
    hits: Dict[str, bool] = Field(default_factory=dict, description="view id -> localization hit, views showing the object")
    latency_s: float = Field(..., description="Seconds per relevance render at the report resolution")


class EvalReport(BaseModel):
    """Output of `eval`."""

    miou: float
    localization_accuracy: float
    mean_latency_s: float
    resolution: Tuple[int, int] = Field(..., description="(height, width) of the timed renders")
    queries: List[QueryEvaluation]
    psnr: Optional[float] = None
    depth_error_m: Optional[float] = None
    normal_error_deg: Optional[float] = None


class ErrorResponse(BaseModel):
    """Standard error response format."""

    error: Dict[str, Any] = Field(..., description="Error details")
