"""
Scene dataset repository: the JSON manifest, RGB/depth/instance PNGs and the
binary instance-feature (GGIF) and query-embedding (GGQE) files.

Layout written by `write_scene`:
    manifest.json
    rgb/<view>.png          8-bit RGB
    depth/<view>.png        16-bit, depth_scale millimeters per unit, 0 = invalid
    instances/<view>.png    16-bit instance ids, 0 = unannotated
    features/<view>.ggif    per-instance embedding vectors
    embeddings.ggqe         named query and canonical vectors
    gt/<query>/<view>.png   8-bit ground-truth masks
"""
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pydantic
from PIL import Image, UnidentifiedImageError

from gsgrasp.config import get_settings
from gsgrasp.core.exceptions import (
    InvariantViolationError,
    MissingFileError,
    ParseError,
)
from gsgrasp.core.transforms import is_rigid
from gsgrasp.models.domain import CameraView, Scene, ViewAnnotations
from gsgrasp.models.schemas import Intrinsics, SceneManifest, ViewRecord

logger = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-6
DEPTH_PNG_MAX = np.iinfo(np.uint16).max

GGIF_MAGIC = b"GGIF"
GGQE_MAGIC = b"GGQE"
_HEADER = np.dtype([("magic", "S4"), ("count", "<u4"), ("dim", "<u4")])


# =============================================================================
# PNG images
# =============================================================================


def _open_image(path: Path, field: str) -> np.ndarray:
    if not path.is_file():
        raise MissingFileError(str(path), field)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("RGBA", "P", "LA"):
                img = img.convert("RGB")
            return np.array(img)
    except (UnidentifiedImageError, OSError) as exc:
        raise ParseError(str(path), str(exc), field) from exc


def read_rgb(path: Path, field: str = "rgb") -> np.ndarray:
    """(H, W, 3) float32 in [0, 1]."""
    data = _open_image(path, field)
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=2)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ParseError(str(path), f"expected an RGB image, got shape {data.shape}", field)
    return data.astype(np.float32) / 255.0


def write_rgb(path: Path, rgb: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def read_depth(path: Path, depth_scale: float, field: str = "depth") -> np.ndarray:
    """(H, W) float32 meters from a 16-bit PNG; 0 stays invalid."""
    data = _open_image(path, field)
    if data.ndim != 2:
        raise ParseError(str(path), "depth must be single channel", field)
    return (data.astype(np.float64) * depth_scale / 1000.0).astype(np.float32)


def encode_depth(depth: np.ndarray, depth_scale: float) -> np.ndarray:
    """Meters to uint16 PNG units; invalid or out-of-range pixels become 0."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    units = np.zeros(depth.shape, dtype=np.float64)
    units[valid] = np.round(depth[valid] * 1000.0 / depth_scale)
    overflow = units > DEPTH_PNG_MAX
    if overflow.any():
        logger.warning(f"{int(overflow.sum())} depth pixel(s) beyond the PNG range set invalid")
        units[overflow] = 0
    return units.astype(np.uint16)


def write_depth(path: Path, depth: np.ndarray, depth_scale: float) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(encode_depth(depth, depth_scale)).save(path)


def read_label_map(path: Path, field: str) -> np.ndarray:
    data = _open_image(path, field)
    if data.ndim != 2:
        raise ParseError(str(path), "label map must be single channel", field)
    return data.astype(np.int64)


def write_label_map(path: Path, labels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(labels).astype(np.uint16)).save(path)


def read_mask(path: Path, field: str) -> np.ndarray:
    return read_label_map(path, field) > 0


def write_mask(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


# =============================================================================
# Binary vector files
# =============================================================================


def _read_bytes(path: Path, field: str) -> bytes:
    if not path.is_file():
        raise MissingFileError(str(path), field)
    return path.read_bytes()


def _read_header(data: bytes, magic: bytes, path: Path, field: str) -> Tuple[int, int]:
    if len(data) < _HEADER.itemsize:
        raise ParseError(str(path), "truncated header", field)
    header = np.frombuffer(data, dtype=_HEADER, count=1)[0]
    if header["magic"] != magic:
        raise ParseError(str(path), f"bad magic {header['magic']!r}, expected {magic!r}", field)
    return int(header["count"]), int(header["dim"])


def _check_unit(vectors: np.ndarray, path: Path, field: str) -> None:
    if len(vectors) == 0:
        return
    norms = np.linalg.norm(vectors.astype(np.float64), axis=-1)
    worst = float(np.abs(norms - 1.0).max())
    if worst > UNIT_NORM_TOL:
        raise InvariantViolationError(str(path), field, f"vector norm off by {worst:.2e}")


def read_instance_features(path: Path, field: str = "instance_features") -> Dict[int, np.ndarray]:
    """GGIF: header then per mask u32 id and f32 x dim."""
    data = _read_bytes(path, field)
    count, dim = _read_header(data, GGIF_MAGIC, path, field)
    record = np.dtype([("id", "<u4"), ("feature", "<f4", (dim,))])
    if len(data) != _HEADER.itemsize + count * record.itemsize:
        raise ParseError(str(path), "size does not match header", field)
    records = np.frombuffer(data, dtype=record, count=count, offset=_HEADER.itemsize)
    features = {int(r["id"]): np.array(r["feature"], dtype=np.float32) for r in records}
    _check_unit(records["feature"], path, field)
    return features


def write_instance_features(path: Path, features: Dict[int, np.ndarray]) -> None:
    ids = sorted(features)
    dim = len(features[ids[0]])
    record = np.dtype([("id", "<u4"), ("feature", "<f4", (dim,))])
    records = np.empty(len(ids), dtype=record)
    records["id"] = ids
    records["feature"] = np.stack([features[i] for i in ids])
    header = np.array([(GGIF_MAGIC, len(ids), dim)], dtype=_HEADER)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header.tobytes() + records.tobytes())


def read_embeddings(path: Path, field: str = "embeddings") -> Dict[str, np.ndarray]:
    """GGQE: header then per entry u16 name length, UTF-8 name, f32 x dim."""
    data = _read_bytes(path, field)
    count, dim = _read_header(data, GGQE_MAGIC, path, field)
    offset = _HEADER.itemsize
    entries: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (length,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + length].decode("utf-8")
            offset += length
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).astype(np.float32)
            offset += 4 * dim
            if name in entries:
                raise ParseError(str(path), f"duplicate entry {name!r}", field)
            entries[name] = vec
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ParseError(str(path), f"truncated or corrupt entry: {exc}", field) from exc
    if offset != len(data):
        raise ParseError(str(path), "trailing bytes after last entry", field)
    for name, vec in entries.items():
        _check_unit(vec[None], path, f"{field}[{name}]")
    return entries


def write_embeddings(path: Path, embeddings: Dict[str, np.ndarray]) -> None:
    dim = len(next(iter(embeddings.values())))
    chunks = [np.array([(GGQE_MAGIC, len(embeddings), dim)], dtype=_HEADER).tobytes()]
    for name, vec in embeddings.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(np.asarray(vec, dtype="<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


# =============================================================================
# Manifest
# =============================================================================


def read_manifest(path: Path) -> SceneManifest:
    if not path.is_file():
        raise MissingFileError(str(path), "manifest")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(str(path), str(exc), "manifest") from exc
    try:
        return SceneManifest.model_validate(raw)
    except pydantic.ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(part) for part in first["loc"])
        raise ParseError(str(path), first["msg"], field) from exc


def _load_view(
    root: Path,
    manifest_path: Path,
    record: ViewRecord,
    depth_scale: float,
) -> Tuple[CameraView, Optional[ViewAnnotations]]:
    vid = record.view_id
    where = f"views[{vid}]"
    pose = np.asarray(record.pose, dtype=np.float64).reshape(4, 4)
    if not is_rigid(pose, get_settings().POSE_ORTHONORMAL_TOL):
        raise InvariantViolationError(str(manifest_path), f"{where}.pose", "not a rigid transform")
    k = record.intrinsics
    if not (k.fx > 0 and k.fy > 0):
        raise InvariantViolationError(str(manifest_path), f"{where}.intrinsics", "fx and fy must be positive")

    rgb_path, depth_path = root / record.rgb, root / record.depth
    rgb = read_rgb(rgb_path, f"{where}.rgb")
    depth = read_depth(depth_path, depth_scale, f"{where}.depth")
    if rgb.shape[:2] != depth.shape:
        raise InvariantViolationError(str(depth_path), f"{where}.depth", "resolution differs from rgb")
    beyond = depth >= get_settings().MAX_DEPTH_RANGE
    if beyond.any():
        logger.warning(
            f"{int(beyond.sum())} depth pixel(s) in {depth_path} beyond MAX_DEPTH_RANGE set invalid",
            extra={"view_id": vid, "count": int(beyond.sum())},
        )
        depth = np.where(beyond, 0.0, depth).astype(depth.dtype)

    view = CameraView(view_id=vid, fx=k.fx, fy=k.fy, cx=k.cx, cy=k.cy, pose=pose, rgb=rgb, depth=depth)

    annotations = None
    if record.instance_map is not None:
        map_path = root / record.instance_map
        imap = read_label_map(map_path, f"{where}.instance_map")
        if imap.shape != depth.shape:
            raise InvariantViolationError(str(map_path), f"{where}.instance_map", "resolution differs from depth")
        features: Dict[int, np.ndarray] = {}
        if record.instance_features is not None:
            feat_path = root / record.instance_features
            features = read_instance_features(feat_path, f"{where}.instance_features")
            missing = sorted(set(np.unique(imap[imap != 0]).tolist()) - set(features))
            if missing:
                raise InvariantViolationError(
                    str(feat_path), f"{where}.instance_features", f"no vector for mask id(s) {missing}"
                )
        annotations = ViewAnnotations(view_id=vid, instance_map=imap, instance_features=features)
    return view, annotations


def load_scene(manifest_path: str | Path) -> Scene:
    """
    Load and validate a scene. Views are read in parallel.

    Raises:
        ParseError: malformed manifest or file
        MissingFileError: a referenced file is absent
        InvariantViolationError: non-rigid pose, bad intrinsics, mismatched
            resolutions, non-unit vectors or missing canonical entries
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent

    workers = max(1, min(get_settings().NUM_THREADS, len(manifest.views)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        loaded = list(pool.map(
            lambda rec: _load_view(root, manifest_path, rec, manifest.depth_scale),
            manifest.views,
        ))
    views = [v for v, _ in loaded]
    annotations = [a for _, a in loaded]

    embeddings: Dict[str, np.ndarray] = {}
    if manifest.embeddings is not None:
        emb_path = root / manifest.embeddings
        embeddings = read_embeddings(emb_path)
        missing = [c for c in manifest.canonical if c not in embeddings]
        if missing:
            raise InvariantViolationError(str(emb_path), "canonical", f"missing entries {missing}")

    dims = {a.d_clip for a in annotations if a is not None and a.instance_features}
    dims |= {len(v) for v in embeddings.values()}
    if len(dims) > 1:
        raise InvariantViolationError(str(manifest_path), "d_clip", f"inconsistent vector sizes {sorted(dims)}")

    gt_masks: Dict[str, Dict[str, np.ndarray]] = {}
    for query, per_view in manifest.gt_masks.items():
        gt_masks[query] = {}
        for vid, rel in per_view.items():
            mask = read_mask(root / rel, f"gt_masks.{query}.{vid}")
            view = next((v for v in views if v.view_id == vid), None)
            if view is None:
                raise InvariantViolationError(str(manifest_path), f"gt_masks.{query}", f"unknown view {vid}")
            if mask.shape != view.depth.shape:
                raise InvariantViolationError(str(root / rel), f"gt_masks.{query}.{vid}", "resolution differs")
            gt_masks[query][vid] = mask

    logger.info(f"Loaded scene with {len(views)} view(s) from {manifest_path}")
    return Scene(
        views=views,
        annotations=annotations,
        embeddings=embeddings,
        canonical_names=list(manifest.canonical),
        frame_id=manifest.frame_id,
        relevance_temperature=manifest.relevance_temperature,
        depth_scale=manifest.depth_scale,
        gt_masks=gt_masks,
    )


def write_scene(scene: Scene, out_dir: str | Path) -> Path:
    """Write every file of `scene` under `out_dir`; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    records: List[ViewRecord] = []
    for view, annotations in zip(scene.views, scene.annotations):
        vid = view.view_id
        record = ViewRecord(
            view_id=vid,
            rgb=f"rgb/{vid}.png",
            depth=f"depth/{vid}.png",
            intrinsics=Intrinsics(fx=view.fx, fy=view.fy, cx=view.cx, cy=view.cy),
            pose=[float(x) for x in np.asarray(view.pose).reshape(-1)],
        )
        write_rgb(out / record.rgb, view.rgb)
        write_depth(out / record.depth, view.depth, scene.depth_scale)
        if annotations is not None:
            record.instance_map = f"instances/{vid}.png"
            write_label_map(out / record.instance_map, annotations.instance_map)
            if annotations.instance_features:
                record.instance_features = f"features/{vid}.ggif"
                write_instance_features(out / record.instance_features, annotations.instance_features)
        records.append(record)

    embeddings_file = None
    if scene.embeddings:
        embeddings_file = "embeddings.ggqe"
        write_embeddings(out / embeddings_file, scene.embeddings)

    gt_files: Dict[str, Dict[str, str]] = {}
    for query, per_view in scene.gt_masks.items():
        gt_files[query] = {}
        for vid, mask in per_view.items():
            rel = f"gt/{query}/{vid}.png"
            write_mask(out / rel, mask)
            gt_files[query][vid] = rel

    manifest = SceneManifest(
        frame_id=scene.frame_id,
        depth_scale=scene.depth_scale,
        embeddings=embeddings_file,
        canonical=list(scene.canonical_names),
        relevance_temperature=scene.relevance_temperature,
        views=records,
        gt_masks=gt_files,
    )
    manifest_path = out / "manifest.json"
    manifest_path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Wrote scene with {len(records)} view(s) to {out}")
    return manifest_path
