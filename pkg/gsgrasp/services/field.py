"""
Field construction from RGB-D views and rigid updates of primitive subsets.
"""
import logging
from typing import List, Optional, Tuple

import numpy as np
import torch
from scipy.spatial import cKDTree

from gsgrasp.config import get_settings
from gsgrasp.core.exceptions import (
    DegenerateInputError,
    NoValidDepthError,
    ValidationError,
)
from gsgrasp.core.transforms import (
    is_rigid,
    quat_multiply,
    random_unit_quaternions,
    random_unit_vectors,
    rotmat_to_quat,
)
from gsgrasp.models.domain import CameraView, ConvexHull
from gsgrasp.models.gaussian import NUM_SH_COEFFS, GaussianField, rgb_to_sh
from gsgrasp.services.geometry import backproject, check_intrinsics

logger = logging.getLogger(__name__)

MIN_INIT_SCALE = 1e-3
MAX_INIT_SCALE = 0.1
INIT_OPACITY = 0.5
DOWNSAMPLE_TOLERANCE = 0.1


# =============================================================================
# Initialization
# =============================================================================


def voxel_downsample(
    points: np.ndarray,
    colors: np.ndarray,
    target_count: int,
    tolerance: float = DOWNSAMPLE_TOLERANCE,
    max_steps: int = 60,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Average points per voxel, binary-searching the voxel size so the result
    lands within `tolerance` of `target_count`. Clouds at or below the target
    are returned unchanged.
    """
    n = len(points)
    if n <= target_count:
        return points, colors

    origin = points.min(axis=0)
    extent = float(np.ptp(points, axis=0).max())
    lo, hi = extent * 1e-6, extent * 1.01

    def assign(size: float) -> Tuple[np.ndarray, int]:
        keys = np.floor((points - origin) / size).astype(np.int64)
        _, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        return inverse, int(inverse.max()) + 1

    best_inverse, best_count = assign(hi)
    for _ in range(max_steps):
        size = np.sqrt(lo * hi)
        inverse, count = assign(size)
        if abs(count - target_count) < abs(best_count - target_count):
            best_inverse, best_count = inverse, count
        if abs(count - target_count) <= tolerance * target_count:
            break
        if count > target_count:
            lo = size
        else:
            hi = size

    weights = np.bincount(best_inverse, minlength=best_count).astype(np.float64)
    merged_pts = np.stack(
        [np.bincount(best_inverse, weights=points[:, k], minlength=best_count) for k in range(3)], -1
    ) / weights[:, None]
    merged_rgb = np.stack(
        [np.bincount(best_inverse, weights=colors[:, k], minlength=best_count) for k in range(3)], -1
    ) / weights[:, None]
    logger.info(f"Voxel downsampling: {n} -> {best_count} points (target {target_count})")
    return merged_pts, merged_rgb


def initial_scales(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the k nearest neighbors, clamped to [1 mm, 10 cm]."""
    n = len(points)
    if n < 2:
        return np.full(n, MAX_INIT_SCALE)
    kk = min(k, n - 1)
    dists, _ = cKDTree(points).query(points, k=kk + 1)
    mean = dists[:, 1:].mean(axis=1)
    return np.clip(mean, MIN_INIT_SCALE, MAX_INIT_SCALE)


def init_from_rgbd(
    views: List[CameraView],
    target_count: int,
    seed: int = 0,
    d_latent: Optional[int] = None,
    frame_id: str = "robot_base",
    dtype: torch.dtype = torch.float32,
) -> GaussianField:
    """
    One primitive per (downsampled) re-projected depth pixel.

    Raises:
        ValidationError: no views or target_count < 1
        BadIntrinsicsError: a view has fx or fy <= 0
        NoValidDepthError: every depth pixel of every view is invalid
    """
    if not views:
        raise ValidationError("At least one view is required")
    if target_count < 1:
        raise ValidationError("target_count must be >= 1", details={"target_count": target_count})
    d_latent = d_latent or get_settings().D_LATENT

    clouds = []
    for view in views:
        check_intrinsics(view)
        try:
            clouds.append(backproject(view.depth, view, colors=view.rgb))
        except NoValidDepthError:
            logger.warning("View has no valid depth, skipped", extra={"view_id": view.view_id})
    if not clouds:
        raise NoValidDepthError("all views")

    points = np.concatenate([c.points for c in clouds])
    colors = np.concatenate([c.colors for c in clouds])
    points, colors = voxel_downsample(points, colors, target_count)
    n = len(points)

    generator = torch.Generator().manual_seed(seed)
    quats = random_unit_quaternions(n, generator)
    latents = random_unit_vectors(n, d_latent, generator)
    scales = np.repeat(initial_scales(points)[:, None], 3, axis=1)

    sh = torch.zeros(n, NUM_SH_COEFFS, 3, dtype=torch.float64)
    sh[:, 0, :] = rgb_to_sh(torch.as_tensor(colors, dtype=torch.float64))

    field = GaussianField(
        means=torch.as_tensor(points, dtype=dtype),
        rotations=quats.to(dtype),
        scales=torch.as_tensor(scales, dtype=dtype),
        opacities=torch.full((n,), INIT_OPACITY, dtype=dtype),
        sh=sh.to(dtype),
        latents=latents.to(dtype),
        frame_id=frame_id,
        active_sh_degree=0,
    )
    logger.info(f"Initialized field with {n} primitives from {len(clouds)} view(s)")
    return field


# =============================================================================
# Updates
# =============================================================================


def select_by_hull(field: GaussianField, hull: ConvexHull, tol: float = 1e-9) -> np.ndarray:
    """Indices of primitives whose mean lies inside the hull (boundary inclusive)."""
    means = field.means.detach().double().numpy()
    return np.nonzero(hull.contains(means, tol=tol))[0]


def transform_subset(
    field: GaussianField,
    selector: ConvexHull,
    motion: np.ndarray,
) -> GaussianField:
    """
    Apply a rigid motion to every primitive inside `selector`.

    Means and rotations move; scales, opacity, SH and latent features do not
    (SH coefficients are not rotated with the object).
    """
    motion = np.asarray(motion, dtype=np.float64)
    if not is_rigid(motion, get_settings().POSE_ORTHONORMAL_TOL):
        raise ValidationError("Motion is not a rigid transform", details={"motion": motion.tolist()})
    if selector.volume <= 0:
        raise DegenerateInputError("selector hull has no volume")

    updated = field.clone()
    if np.array_equal(motion, np.eye(4)):
        return updated

    idx = select_by_hull(field, selector)
    if len(idx) == 0:
        logger.warning(
            "No primitive inside the selection hull",
            extra={"error_code": "EMPTY_SELECTION", "count": 0},
        )
        return updated

    index = torch.as_tensor(idx, dtype=torch.long)
    R = torch.as_tensor(motion[:3, :3])
    t = torch.as_tensor(motion[:3, 3])
    q_motion = torch.as_tensor(rotmat_to_quat(motion[:3, :3]))

    with torch.no_grad():
        means = updated.means.data[index].double()
        updated.means.data[index] = (means @ R.T + t).to(field.dtype)

        rot = updated.raw_parameter("rotation")
        q = rot.data[index].double()
        q = q / q.norm(dim=-1, keepdim=True)
        rot.data[index] = quat_multiply(q_motion.expand_as(q), q).to(field.dtype)

    logger.info(f"Moved {len(idx)} primitive(s)", extra={"count": int(len(idx))})
    return updated


def prune_low_opacity(field: GaussianField, threshold: float) -> GaussianField:
    """Drop primitives with opacity below `threshold`; keeps at least one."""
    with torch.no_grad():
        keep = field.opacities >= threshold
        if not keep.any():
            keep[torch.argmax(field.opacities)] = True
    removed = int((~keep).sum())
    if removed == 0:
        return field
    logger.info(f"Pruned {removed} low-opacity primitive(s)", extra={"count": removed})
    return field.subset(keep)
