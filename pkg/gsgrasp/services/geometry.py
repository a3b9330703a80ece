"""
Depth back-projection, Sobel normals, grasp point clouds and convex hulls.
All functions are pure and operate on numpy arrays in float64.
"""
import logging
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull as QhullHull
from scipy.spatial import QhullError

from gsgrasp.core.exceptions import (
    BadIntrinsicsError,
    DegenerateInputError,
    NoValidDepthError,
    NoValidNeighborhoodError,
)
from gsgrasp.models.domain import (
    CameraView,
    ConvexHull,
    Localization,
    PointCloud,
)
from gsgrasp.models.gaussian import GaussianField, sh_to_rgb

logger = logging.getLogger(__name__)

SOBEL_U = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_V = SOBEL_U.T


def check_intrinsics(view: CameraView) -> None:
    if not (view.fx > 0 and view.fy > 0):
        raise BadIntrinsicsError(view.fx, view.fy)


def camera_points(depth: np.ndarray, view: CameraView) -> np.ndarray:
    """(H, W, 3) camera-frame points of every pixel; invalid pixels give z = 0."""
    h, w = depth.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    z = np.asarray(depth, dtype=np.float64)
    x = (cols - view.cx) / view.fx * z
    y = (rows - view.cy) / view.fy * z
    return np.stack([x, y, z], axis=-1)


def valid_depth(depth: np.ndarray) -> np.ndarray:
    return np.isfinite(depth) & (depth > 0)


def backproject(
    depth: np.ndarray,
    view: CameraView,
    mask: Optional[np.ndarray] = None,
    colors: Optional[np.ndarray] = None,
    normals: Optional[np.ndarray] = None,
) -> PointCloud:
    """
    Lift valid (and masked) depth pixels to world points.

    Args:
        depth: (H, W) meters, 0 = invalid
        view: Camera the depth was observed or rendered from
        mask: Optional (H, W) boolean restriction
        colors: Optional (H, W, 3) per-pixel colors carried to the cloud
        normals: Optional (H, W, 3) world normals carried to the cloud

    Raises:
        BadIntrinsicsError: fx or fy not positive
        NoValidDepthError: nothing to project
    """
    check_intrinsics(view)
    valid = valid_depth(depth)
    if mask is not None:
        valid &= mask.astype(bool)
    if not valid.any():
        raise NoValidDepthError(f"view {view.view_id}")

    cam = camera_points(depth, view)[valid]
    R, t = view.pose[:3, :3], view.pose[:3, 3]
    points = cam @ R.T + t
    return PointCloud(
        points=points,
        colors=None if colors is None else np.asarray(colors, dtype=np.float64)[valid],
        normals=None if normals is None else np.asarray(normals, dtype=np.float64)[valid],
    )


def normals_from_depth(depth: np.ndarray, view: CameraView):
    """
    Surface normals from a depth map via Sobel derivatives of the 3D point grid.

    Returns:
        (normals, valid): (H, W, 3) unit world-frame normals facing the camera,
        zero where the 3x3 neighborhood has any invalid depth
    """
    check_intrinsics(view)
    valid_px = valid_depth(depth)
    valid = ndimage.binary_erosion(valid_px, structure=np.ones((3, 3), bool), border_value=0)
    if not valid.any():
        raise NoValidNeighborhoodError()

    pts = camera_points(np.where(valid_px, depth, 0.0), view)
    d_du = np.stack([ndimage.correlate(pts[..., k], SOBEL_U, mode="nearest") for k in range(3)], -1)
    d_dv = np.stack([ndimage.correlate(pts[..., k], SOBEL_V, mode="nearest") for k in range(3)], -1)

    normals = np.cross(d_du, d_dv)
    norm = np.linalg.norm(normals, axis=-1, keepdims=True)
    valid &= norm[..., 0] > 0
    normals = normals / np.where(norm > 0, norm, 1.0)

    # The camera sits at the origin of its frame
    away = np.einsum("hwk,hwk->hw", normals, pts) > 0
    normals[away] *= -1.0

    normals = normals @ view.pose[:3, :3].T
    normals[~valid] = 0.0
    return normals, valid


def object_cloud(
    depth_maps: Dict[str, np.ndarray],
    masks: Dict[str, np.ndarray],
    views: List[CameraView],
    colors: Optional[Dict[str, np.ndarray]] = None,
    normals: Optional[Dict[str, np.ndarray]] = None,
) -> PointCloud:
    """Merge back-projected masked depth from every view that has pixels."""
    clouds = []
    for view in views:
        vid = view.view_id
        if vid not in masks or not masks[vid].any():
            continue
        mask = masks[vid] & valid_depth(depth_maps[vid])
        if not mask.any():
            continue
        clouds.append(backproject(
            depth_maps[vid],
            view,
            mask=mask,
            colors=None if colors is None else colors[vid],
            normals=None if normals is None else normals[vid],
        ))
    return PointCloud.concatenate(clouds)


def field_cloud(field: GaussianField) -> PointCloud:
    """Primitive means with degree-0 colors and shortest-axis normals."""
    arrays = field.to_arrays()
    colors = np.clip(sh_to_rgb(arrays["sh"][:, 0, :]), 0.0, 1.0)
    normals = field.shortest_axes().detach().double().numpy()
    return PointCloud(points=arrays["means"], colors=colors, normals=normals)


def build_grasp_cloud(
    localization: Localization,
    field: Optional[GaussianField],
    views: List[CameraView],
    include_context: bool = True,
) -> PointCloud:
    """Object points from rendered depth plus the field's means as scene context."""
    rendered = localization.rendered
    depth_maps = {vid: maps["depth"] for vid, maps in rendered.items()}
    colors = {vid: maps["color"] for vid, maps in rendered.items()}
    normals = {vid: _unit(maps["normal"]) for vid, maps in rendered.items()}

    obj = object_cloud(depth_maps, localization.object_mask, views, colors=colors, normals=normals)
    clouds = [obj]
    if include_context and field is not None and field.count > 0:
        clouds.append(field_cloud(field))

    cloud = PointCloud.concatenate(clouds)
    logger.info(
        f"Grasp cloud: {len(obj)} object points, {len(cloud) - len(obj)} context points",
        extra={"query": localization.query},
    )
    return cloud


def _unit(vectors: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return vectors / np.where(norm > 0, norm, 1.0)


def convex_hull(points: np.ndarray) -> ConvexHull:
    """
    Convex hull with deduplicated outward half-spaces.

    Raises:
        DegenerateInputError: fewer than 4 points, or coplanar/collinear input
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
        raise DegenerateInputError("need at least 4 points in 3D")
    if not np.all(np.isfinite(pts)):
        raise DegenerateInputError("non-finite coordinates")

    centered = pts - pts.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    if singular[0] == 0 or singular[2] <= 1e-12 * singular[0]:
        raise DegenerateInputError("points are coplanar or collinear")

    try:
        hull = QhullHull(pts)
    except QhullError as exc:
        raise DegenerateInputError(str(exc).splitlines()[0]) from exc
    if hull.volume <= 0:
        raise DegenerateInputError("zero volume")

    # Qhull triangulates facets; merge coplanar triangles into one half-space
    equations = np.unique(np.round(hull.equations, 12), axis=0)
    return ConvexHull(
        vertices=pts[hull.vertices],
        normals=equations[:, :3],
        offsets=equations[:, 3],
        volume=float(hull.volume),
    )


def bbox_hull(bbox_min: np.ndarray, bbox_max: np.ndarray, inflate: float = 1e-3) -> ConvexHull:
    """Box hull around a flat or tiny point set."""
    lo = np.asarray(bbox_min, dtype=np.float64) - inflate
    hi = np.asarray(bbox_max, dtype=np.float64) + inflate
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    return convex_hull(corners)
