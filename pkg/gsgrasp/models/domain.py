"""
Runtime domain types holding arrays and tensors.
Views and annotations are numpy (loaded from disk); render products are torch.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from gsgrasp.core.exceptions import NotFoundError


# =============================================================================
# Observations
# =============================================================================


@dataclass
class CameraView:
    """
    One calibrated RGB-D observation.

    Pixel (row i, col j) has its center at image coordinates (u=j, v=i).
    `pose` maps camera coordinates (OpenCV: x right, y down, z forward) to world.
    """

    view_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray  # (4, 4) camera-to-world
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32 meters, 0 = invalid

    @property
    def height(self) -> int:
        return int(self.depth.shape[0])

    @property
    def width(self) -> int:
        return int(self.depth.shape[1])

    @property
    def K(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @property
    def camera_center(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    @property
    def world_to_camera(self) -> np.ndarray:
        R = self.pose[:3, :3]
        W = np.eye(4)
        W[:3, :3] = R.T
        W[:3, 3] = -R.T @ self.pose[:3, 3]
        return W

    def with_pose(self, pose: np.ndarray) -> "CameraView":
        """Same intrinsics and images seen from another pose."""
        return CameraView(
            view_id=self.view_id,
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
            pose=np.asarray(pose, dtype=np.float64),
            rgb=self.rgb,
            depth=self.depth,
        )

    def resized(self, height: int, width: int) -> "CameraView":
        """
        The same camera at another resolution, with blank images.
        Intrinsics scale so pixel centers keep covering the same rays.
        """
        sx, sy = width / self.width, height / self.height
        return CameraView(
            view_id=self.view_id,
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            pose=self.pose,
            rgb=np.zeros((height, width, 3), dtype=np.float32),
            depth=np.zeros((height, width), dtype=np.float32),
        )


@dataclass
class ViewAnnotations:
    """Per-pixel instance ids and per-instance embedding vectors for one view."""

    view_id: str
    instance_map: np.ndarray  # (H, W) int, 0 = unannotated
    instance_features: Dict[int, np.ndarray]  # id -> (d_clip,) unit vector

    @property
    def d_clip(self) -> int:
        return len(next(iter(self.instance_features.values())))

    def mask_ids(self) -> List[int]:
        ids = np.unique(self.instance_map)
        return [int(i) for i in ids if i != 0]


@dataclass
class QueryEmbeddings:
    """Query vector and canonical phrase vectors, all unit norm."""

    name: str
    query: np.ndarray  # (d_clip,)
    canonical: np.ndarray  # (n_canon, d_clip)


@dataclass
class Scene:
    """Everything `load_scene` produces."""

    views: List[CameraView]
    annotations: List[Optional[ViewAnnotations]]
    embeddings: Dict[str, np.ndarray]
    canonical_names: List[str]
    frame_id: str = "robot_base"
    relevance_temperature: float = 1.0
    depth_scale: float = 1.0  # millimeters per depth PNG unit
    gt_masks: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def view(self, view_id: str) -> CameraView:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise NotFoundError("view", view_id)

    def query_embeddings(self, name: str) -> QueryEmbeddings:
        if name not in self.embeddings:
            raise NotFoundError("query", name)
        missing = [c for c in self.canonical_names if c not in self.embeddings]
        if missing:
            raise NotFoundError("canonical phrase", missing[0])
        canonical = np.stack([self.embeddings[c] for c in self.canonical_names])
        return QueryEmbeddings(name=name, query=self.embeddings[name], canonical=canonical)

    def query_names(self) -> List[str]:
        canon = set(self.canonical_names)
        return [n for n in self.embeddings if n not in canon]


# =============================================================================
# Rendering
# =============================================================================


@dataclass
class SplatCache:
    """Per-view projection state shared by compositing and its backward pass."""

    mean2d: torch.Tensor  # (N, 2) pixel coordinates (u, v)
    cov2d: torch.Tensor  # (N, 3) upper triangle (a, b, c) of the dilated 2D covariance
    conic: torch.Tensor  # (N, 3) upper triangle of its inverse
    depth: torch.Tensor  # (N,) camera-frame z
    radius: torch.Tensor  # (N,) integer pixel radius, 0 when culled
    tile_rect: torch.Tensor  # (N, 4) tile x0, y0, x1, y1 inclusive
    visible: torch.Tensor  # (N,) bool
    sorted_ids: torch.Tensor  # (M,) primitive ids, grouped by tile, depth-sorted
    tile_offsets: torch.Tensor  # (num_tiles + 1,) start of each tile in sorted_ids
    tiles_x: int
    tiles_y: int
    tile_size: int
    height: int
    width: int
    degenerate_count: int = 0
    # Filled by render_forward so render_backward can replay the graph
    outputs: Dict[str, torch.Tensor] = field(default_factory=dict)
    inputs: Dict[str, torch.Tensor] = field(default_factory=dict)

    def tile_ids(self, tile: int) -> torch.Tensor:
        start, end = int(self.tile_offsets[tile]), int(self.tile_offsets[tile + 1])
        return self.sorted_ids[start:end]


@dataclass
class RenderOutput:
    """Rendered maps for one viewpoint; channels not requested are None."""

    alpha: torch.Tensor  # (H, W)
    color: Optional[torch.Tensor] = None  # (H, W, 3)
    feature: Optional[torch.Tensor] = None  # (H, W, d_latent)
    depth: Optional[torch.Tensor] = None  # (H, W)
    normal: Optional[torch.Tensor] = None  # (H, W, 3) world frame, not renormalized
    cache: Optional[SplatCache] = None


@dataclass
class PairSample:
    """Within-mask pixel pairs and per-mask distillation pixels, (row, col)."""

    pair_u: np.ndarray  # (n, 2)
    pair_v: np.ndarray  # (n, 2)
    pair_ids: np.ndarray  # (n,)
    distill_pixels: np.ndarray  # (k, 2)
    distill_ids: np.ndarray  # (k,)

    @property
    def n(self) -> int:
        return len(self.pair_ids)

    @property
    def k(self) -> int:
        return len(self.distill_ids)


# =============================================================================
# Geometry
# =============================================================================


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) world frame
    colors: Optional[np.ndarray] = None  # (N, 3) in [0, 1]
    normals: Optional[np.ndarray] = None  # (N, 3) unit

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def concatenate(cls, clouds: List["PointCloud"]) -> "PointCloud":
        clouds = [c for c in clouds if len(c) > 0]
        if not clouds:
            return cls(points=np.zeros((0, 3)))
        points = np.concatenate([c.points for c in clouds])
        colors = None
        if all(c.colors is not None for c in clouds):
            colors = np.concatenate([c.colors for c in clouds])
        normals = None
        if all(c.normals is not None for c in clouds):
            normals = np.concatenate([c.normals for c in clouds])
        return cls(points=points, colors=colors, normals=normals)


@dataclass
class ConvexHull:
    """Convex polytope as vertices plus outward half-spaces n·x + d <= 0."""

    vertices: np.ndarray  # (M, 3)
    normals: np.ndarray  # (F, 3) unit outward
    offsets: np.ndarray  # (F,)
    volume: float

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        """Boolean mask of points inside the hull, boundary inclusive."""
        points = np.atleast_2d(points)
        signed = points @ self.normals.T + self.offsets
        return np.all(signed <= tol, axis=1)

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass
class Localization:
    """Result of an open-vocabulary query over one or more views."""

    query: str
    relevance: Dict[str, np.ndarray]  # view id -> (H, W) in (0, 1)
    mask2d: Dict[str, np.ndarray]  # relevance >= threshold
    object_mask: Dict[str, np.ndarray]  # largest connected component of mask2d
    rendered: Dict[str, Dict[str, np.ndarray]]  # view id -> alpha, color, depth, normal maps
    points: np.ndarray  # (N, 3) re-projected object points
    colors: np.ndarray  # (N, 3)
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    hull: ConvexHull
    threshold: float
    latency_s: Dict[str, float] = field(default_factory=dict)
