"""
Exported artifacts and small record files: rendered maps, feature maps
(GGFM), relevance heatmaps, PLY point clouds, loss CSVs, grasp proposal and
hull/motion JSON, and the key-value training config.
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Type, TypeVar

import numpy as np
import pydantic
from plyfile import PlyData, PlyElement
from pydantic import BaseModel, TypeAdapter

from gsgrasp.core.exceptions import MissingFileError, ParseError, ValidationError
from gsgrasp.models.domain import PointCloud
from gsgrasp.models.schemas import (
    GraspDecision,
    GraspProposal,
    LossReport,
    MotionRecord,
    TrainConfig,
)
from gsgrasp.repositories.scene import write_depth, write_rgb

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

GGFM_MAGIC = b"GGFM"
_GGFM_HEADER = np.dtype([("magic", "S4"), ("height", "<u4"), ("width", "<u4"), ("dim", "<u4")])


# =============================================================================
# Rendered maps
# =============================================================================


def write_color(path: Path, color: np.ndarray) -> None:
    write_rgb(path, color)


def write_depth_mm(path: Path, depth: np.ndarray) -> None:
    """16-bit PNG in millimeters, 0 = no coverage."""
    write_depth(path, depth, depth_scale=1.0)


def write_normal(path: Path, normal: np.ndarray) -> None:
    """Unit normals mapped to colors by (n + 1) / 2."""
    write_rgb(path, (np.asarray(normal) + 1.0) / 2.0)


def write_feature_map(path: Path, feature: np.ndarray) -> None:
    """GGFM: 16-byte header (magic, H, W, d) then f32 row-major values."""
    feature = np.asarray(feature, dtype="<f4")
    if feature.ndim == 2:
        feature = feature[..., None]
    h, w, d = feature.shape
    header = np.array([(GGFM_MAGIC, h, w, d)], dtype=_GGFM_HEADER)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header.tobytes() + np.ascontiguousarray(feature).tobytes())


def read_feature_map(path: Path) -> np.ndarray:
    if not path.is_file():
        raise MissingFileError(str(path), "feature_map")
    data = path.read_bytes()
    if len(data) < _GGFM_HEADER.itemsize:
        raise ParseError(str(path), "truncated header", "feature_map")
    header = np.frombuffer(data, dtype=_GGFM_HEADER, count=1)[0]
    if header["magic"] != GGFM_MAGIC:
        raise ParseError(str(path), f"bad magic {header['magic']!r}", "feature_map")
    h, w, d = int(header["height"]), int(header["width"]), int(header["dim"])
    if len(data) != _GGFM_HEADER.itemsize + 4 * h * w * d:
        raise ParseError(str(path), "size does not match header", "feature_map")
    values = np.frombuffer(data, dtype="<f4", offset=_GGFM_HEADER.itemsize)
    return values.reshape(h, w, d).astype(np.float32)


def relevance_colormap(scores: np.ndarray) -> np.ndarray:
    """
    Blue (0) through green (0.5) to red (1):
    R = s, G = 1 - |2s - 1|, B = 1 - s.
    """
    s = np.clip(np.asarray(scores, dtype=np.float64), 0.0, 1.0)
    return np.stack([s, 1.0 - np.abs(2.0 * s - 1.0), 1.0 - s], axis=-1)


def write_relevance(path: Path, scores: np.ndarray) -> Path:
    """Heatmap PNG plus a raw GGFM sidecar (d = 1) next to it; returns the sidecar."""
    write_rgb(path, relevance_colormap(scores))
    sidecar = path.with_suffix(".ggfm")
    write_feature_map(sidecar, np.asarray(scores)[..., None])
    return sidecar


# =============================================================================
# Point clouds
# =============================================================================


def write_ply(path: Path, cloud: PointCloud) -> None:
    """ASCII PLY with x y z [red green blue] [nx ny nz]."""
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if cloud.normals is not None:
        fields += [("nx", "f4"), ("ny", "f4"), ("nz", "f4")]

    vertices = np.empty(len(cloud), dtype=fields)
    for k, axis in enumerate("xyz"):
        vertices[axis] = cloud.points[:, k]
    if cloud.colors is not None:
        rgb = np.round(np.clip(cloud.colors, 0.0, 1.0) * 255).astype(np.uint8)
        for k, channel in enumerate(("red", "green", "blue")):
            vertices[channel] = rgb[:, k]
    if cloud.normals is not None:
        for k, axis in enumerate(("nx", "ny", "nz")):
            vertices[axis] = cloud.normals[:, k]

    path.parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(vertices, "vertex")], text=True).write(str(path))


def read_ply(path: Path) -> PointCloud:
    if not path.is_file():
        raise MissingFileError(str(path), "cloud")
    try:
        vertex = PlyData.read(str(path))["vertex"]
    except Exception as exc:
        raise ParseError(str(path), str(exc), "cloud") from exc
    names = {p.name for p in vertex.properties}

    def stack(keys: Sequence[str]) -> np.ndarray:
        return np.stack([np.asarray(vertex[k], dtype=np.float64) for k in keys], axis=-1)

    colors = stack(("red", "green", "blue")) / 255.0 if {"red", "green", "blue"} <= names else None
    normals = stack(("nx", "ny", "nz")) if {"nx", "ny", "nz"} <= names else None
    return PointCloud(points=stack(("x", "y", "z")), colors=colors, normals=normals)


# =============================================================================
# Records
# =============================================================================


def write_loss_csv(path: Path, reports: Sequence[LossReport]) -> None:
    columns = ["iteration", "view_id", *LossReport.TERMS, "total"]
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for report in reports:
            row = report.model_dump()
            writer.writerow([row[c] for c in columns])


def write_json(path: Path, payload: Any) -> None:
    """Pydantic models, lists of models or plain JSON data."""
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    elif isinstance(payload, list) and payload and isinstance(payload[0], BaseModel):
        payload = [p.model_dump(mode="json") for p in payload]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")


def _read_json(path: Path, field: str) -> Any:
    if not path.is_file():
        raise MissingFileError(str(path), field)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(str(path), str(exc), field) from exc


def _validation_to_parse(path: Path, exc: pydantic.ValidationError) -> ParseError:
    first = exc.errors()[0]
    return ParseError(str(path), first["msg"], ".".join(str(p) for p in first["loc"]))


def read_model(path: Path, model: Type[M], field: str) -> M:
    raw = _read_json(path, field)
    try:
        return model.model_validate(raw)
    except pydantic.ValidationError as exc:
        raise _validation_to_parse(path, exc) from exc


def read_proposals(path: Path) -> List[GraspProposal]:
    raw = _read_json(path, "proposals")
    try:
        return TypeAdapter(List[GraspProposal]).validate_python(raw)
    except pydantic.ValidationError as exc:
        raise _validation_to_parse(path, exc) from exc


def write_decisions(path: Path, decisions: Sequence[GraspDecision]) -> None:
    write_json(path, list(decisions))


def read_motion(path: Path) -> np.ndarray:
    """A 4x4 rigid motion given as {"matrix": [16]}, a flat list or nested rows."""
    raw = _read_json(path, "motion")
    if isinstance(raw, list):
        try:
            raw = {"matrix": np.asarray(raw, dtype=np.float64).reshape(-1).tolist()}
        except ValueError as exc:
            raise ParseError(str(path), str(exc), "matrix") from exc
    try:
        record = MotionRecord.model_validate(raw)
    except pydantic.ValidationError as exc:
        raise _validation_to_parse(path, exc) from exc
    return np.asarray(record.matrix, dtype=np.float64).reshape(4, 4)


def parse_key_values(text: str, source: str = "<config>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(source, f"line {number}: expected key = value", f"line {number}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def read_train_config(path: Path, **overrides: Any) -> TrainConfig:
    """
    TrainConfig from a `key = value` file; unknown keys are rejected.
    Keyword overrides (for example from CLI flags) win over the file.
    """
    if not path.is_file():
        raise MissingFileError(str(path), "train_config")
    values: Dict[str, Any] = parse_key_values(path.read_text(encoding="utf-8"), str(path))
    unknown = sorted(set(values) - set(TrainConfig.model_fields))
    if unknown:
        raise ValidationError(f"Unknown training key(s): {', '.join(unknown)}", details={"file": str(path)})
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.model_validate(values)
    except pydantic.ValidationError as exc:
        raise _validation_to_parse(path, exc) from exc
