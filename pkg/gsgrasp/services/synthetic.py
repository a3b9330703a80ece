"""
Synthetic test scenes: analytic RGB-D of spheres and boxes on a table seen
from a camera ring, with ground-truth instance maps, random unit embeddings
per object and for the table, and ground-truth query masks.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from gsgrasp.models.domain import CameraView, Scene, ViewAnnotations
from gsgrasp.models.schemas import (
    CANONICAL_PHRASES,
    CameraRing,
    SyntheticObject,
    SyntheticSceneSpec,
)
from gsgrasp.repositories.scene import write_scene

logger = logging.getLogger(__name__)

TABLE_HALF_EXTENT = 0.5
AMBIENT = 0.35
LIGHT_DIRECTION = np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0])
# 0.2 mm per PNG unit keeps 13 m of range
SYNTHETIC_DEPTH_SCALE = 0.2
GROUND_NAME = "table"


@dataclass
class SyntheticScene:
    spec: SyntheticSceneSpec
    scene: Scene
    normals: Dict[str, np.ndarray]  # view id -> (H, W, 3) analytic world normals
    object_ids: Dict[str, int]  # object name -> instance id
    ground_id: Optional[int] = None  # instance id of the table, None without a ground plane


# =============================================================================
# Cameras
# =============================================================================


def look_at(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Camera-to-world pose (OpenCV axes) at `eye` looking at `target`, z up."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if np.linalg.norm(np.cross(forward, up)) < 1e-6:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, forward, eye
    return pose


def ring_poses(ring: CameraRing) -> List[np.ndarray]:
    target = np.asarray(ring.target, dtype=np.float64)
    poses = []
    for k in range(ring.count):
        angle = 2.0 * math.pi * k / ring.count
        eye = np.array([
            target[0] + ring.radius * math.cos(angle),
            target[1] + ring.radius * math.sin(angle),
            ring.height,
        ])
        poses.append(look_at(eye, target))
    if ring.top_down:
        poses.append(look_at(np.array([target[0], target[1], ring.top_down_height]), target))
    return poses


def intrinsics(spec: SyntheticSceneSpec) -> Tuple[float, float, float, float]:
    """(fx, fy, cx, cy) for square pixels and a horizontal field of view."""
    f = 0.5 * spec.width / math.tan(math.radians(spec.fov_deg) / 2.0)
    return f, f, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0


# =============================================================================
# Ray casting
# =============================================================================


def intersect_sphere(origin, dirs, center, radius):
    """Nearest positive ray parameter per ray (inf on miss) and hit normals."""
    oc = origin - center
    a = np.einsum("nk,nk->n", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = (-b - sq) / (2.0 * a)
    t_far = (-b + sq) / (2.0 * a)
    t = np.where(t_near > 0, t_near, t_far)
    t = np.where(hit & (t > 0), t, np.inf)
    points = origin + t[:, None] * dirs
    normals = (points - center) / radius
    return t, normals


def intersect_box(origin, dirs, center, half, rotation):
    """Slab test in the box frame; normals of the entry face in world frame."""
    R = Rotation.from_quat([rotation[1], rotation[2], rotation[3], rotation[0]]).as_matrix()
    o = R.T @ (origin - center)
    d = dirs @ R
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    t_lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    t_hi = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    # Parallel rays outside a slab never hit
    outside = (d == 0) & (np.abs(o) > half)
    t_lo = np.where(outside, np.inf, t_lo)
    t_enter = t_lo.max(axis=1)
    t_exit = t_hi.min(axis=1)
    hit = (t_enter <= t_exit) & (t_enter > 0)
    t = np.where(hit, t_enter, np.inf)

    axis = np.argmax(t_lo, axis=1)
    local = np.zeros_like(d)
    rows = np.arange(len(d))
    local[rows, axis] = -np.sign(d[rows, axis])
    return t, local @ R.T


def intersect_ground(origin, dirs, half_extent=TABLE_HALF_EXTENT):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dirs[:, 2]
    points = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    inside = (np.abs(points[:, 0]) <= half_extent) & (np.abs(points[:, 1]) <= half_extent)
    t = np.where((dirs[:, 2] < 0) & (t > 0) & inside, t, np.inf)
    normals = np.broadcast_to(np.array([0.0, 0.0, 1.0]), dirs.shape)
    return t, normals


def cast(
    view_pose: np.ndarray,
    fx: float,
    fy: float,
    cx: float,
    cy: float,
    height: int,
    width: int,
    objects: List[SyntheticObject],
    ground: bool,
):
    """
    Exact first-hit depth, world normals and instance ids per pixel.
    Objects take ids 1..len(objects), the table `ground_instance_id(objects)`.

    Rays are scaled so the camera-frame direction has unit z; the ray
    parameter of a hit is therefore its depth.
    """
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    cam_dirs = np.stack([(cols - cx) / fx, (rows - cy) / fy, np.ones_like(rows)], -1).reshape(-1, 3)
    R, origin = view_pose[:3, :3], view_pose[:3, 3]
    dirs = cam_dirs @ R.T

    n = len(dirs)
    depth = np.full(n, np.inf)
    normals = np.zeros((n, 3))
    ids = np.zeros(n, dtype=np.int64)

    candidates = []
    if ground:
        candidates.append((ground_instance_id(objects), *intersect_ground(origin, dirs)))
    for idx, obj in enumerate(objects, start=1):
        center = np.asarray(obj.center, dtype=np.float64)
        if obj.shape == "sphere":
            t, nrm = intersect_sphere(origin, dirs, center, obj.size[0])
        else:
            t, nrm = intersect_box(origin, dirs, center, np.asarray(obj.size, dtype=np.float64), obj.rotation)
        candidates.append((idx, t, nrm))

    for idx, t, nrm in candidates:
        closer = t < depth
        depth[closer] = t[closer]
        normals[closer] = nrm[closer]
        ids[closer] = idx

    miss = ~np.isfinite(depth)
    depth[miss] = 0.0
    return depth.reshape(height, width), normals.reshape(height, width, 3), ids.reshape(height, width)


def ground_instance_id(objects: List[SyntheticObject]) -> int:
    return len(objects) + 1


def shade(normals: np.ndarray, ids: np.ndarray, objects: List[SyntheticObject], ground_color) -> np.ndarray:
    """Lambertian shading under one directional light plus ambient."""
    palette = np.zeros((len(objects) + 2, 3))
    palette[ground_instance_id(objects)] = ground_color
    for idx, obj in enumerate(objects, start=1):
        palette[idx] = obj.color
    albedo = palette[ids]
    lambert = np.clip(normals @ LIGHT_DIRECTION, 0.0, None)
    rgb = albedo * (AMBIENT + (1.0 - AMBIENT) * lambert)[..., None]
    rgb[ids == 0] = 0.0
    return np.clip(rgb, 0.0, 1.0)


# =============================================================================
# Scenes
# =============================================================================


def default_spec(num_objects: int = 3, seed: int = 0, **overrides) -> SyntheticSceneSpec:
    """Objects resting on the table, spread on a circle around the origin."""
    rng = np.random.default_rng(seed)
    objects = []
    offset = rng.uniform(0, 2 * math.pi)
    for k in range(num_objects):
        angle = offset + 2 * math.pi * k / max(num_objects, 1)
        radius = 0.12 if num_objects > 1 else 0.0
        xy = [radius * math.cos(angle), radius * math.sin(angle)]
        color = rng.uniform(0.15, 0.95, 3).tolist()
        if k % 2 == 0:
            r = float(rng.uniform(0.03, 0.05))
            objects.append(SyntheticObject(name=f"object_{k}", shape="sphere", center=xy + [r], size=[r], color=color))
        else:
            half = rng.uniform(0.02, 0.04, 3).tolist()
            yaw = float(rng.uniform(0, math.pi))
            rotation = [math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)]
            objects.append(SyntheticObject(
                name=f"object_{k}", shape="box", center=xy + [half[2]], size=half, rotation=rotation, color=color,
            ))
    return SyntheticSceneSpec(objects=objects, seed=seed, **overrides)


def _unit_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def render_synthetic(spec: SyntheticSceneSpec) -> SyntheticScene:
    """Build the scene in memory; every random draw comes from `spec.seed`."""
    rng = np.random.default_rng(spec.seed)
    fx, fy, cx, cy = intrinsics(spec)
    names = [obj.name for obj in spec.objects]
    object_ids = {name: i for i, name in enumerate(names, start=1)}
    ground_id = ground_instance_id(spec.objects) if spec.ground_plane else None

    # Last row is the table
    vectors = _unit_rows(rng, len(names) + len(CANONICAL_PHRASES) + 1, spec.d_clip)
    embeddings = {name: vectors[i] for i, name in enumerate(names)}
    for j, phrase in enumerate(CANONICAL_PHRASES):
        embeddings[phrase] = vectors[len(names) + j]
    labels = dict(enumerate(names, start=1))
    if ground_id is not None:
        embeddings[GROUND_NAME] = vectors[-1]
        labels[ground_id] = GROUND_NAME

    views: List[CameraView] = []
    annotations: List[Optional[ViewAnnotations]] = []
    normals: Dict[str, np.ndarray] = {}
    gt_masks: Dict[str, Dict[str, np.ndarray]] = {name: {} for name in names}

    for k, pose in enumerate(ring_poses(spec.cameras)):
        vid = f"view_{k:03d}"
        depth, nrm, ids = cast(pose, fx, fy, cx, cy, spec.height, spec.width, spec.objects, spec.ground_plane)
        rgb = shade(nrm, ids, spec.objects, spec.ground_color)

        if spec.rgb_noise > 0:
            rgb = np.clip(rgb + rng.normal(0.0, spec.rgb_noise, rgb.shape), 0.0, 1.0)
        if spec.depth_noise > 0:
            valid = depth > 0
            depth[valid] = np.maximum(depth[valid] + rng.normal(0.0, spec.depth_noise, int(valid.sum())), 1e-4)

        instance_map = ids
        present = sorted(int(i) for i in np.unique(instance_map) if i > 0)
        features = {i: embeddings[labels[i]].astype(np.float32) for i in present}

        views.append(CameraView(view_id=vid, fx=fx, fy=fy, cx=cx, cy=cy, pose=pose, rgb=rgb, depth=depth))
        annotations.append(ViewAnnotations(view_id=vid, instance_map=instance_map, instance_features=features))
        normals[vid] = nrm
        for name, idx in object_ids.items():
            gt_masks[name][vid] = instance_map == idx

    scene = Scene(
        views=views,
        annotations=annotations,
        embeddings={name: vec.astype(np.float32) for name, vec in embeddings.items()},
        canonical_names=list(CANONICAL_PHRASES),
        relevance_temperature=spec.relevance_temperature,
        depth_scale=SYNTHETIC_DEPTH_SCALE,
        gt_masks=gt_masks,
    )
    logger.info(f"Rendered synthetic scene: {len(names)} object(s), {len(views)} view(s)")
    return SyntheticScene(spec=spec, scene=scene, normals=normals, object_ids=object_ids, ground_id=ground_id)


def generate_synthetic(spec: SyntheticSceneSpec, out_dir: str | Path) -> Path:
    """Render `spec` and write it as an on-disk scene; returns the manifest path."""
    synthetic = render_synthetic(spec)
    manifest = write_scene(synthetic.scene, out_dir)
    (Path(out_dir) / "synthetic_spec.json").write_text(spec.model_dump_json(indent=2), encoding="utf-8")
    return manifest
