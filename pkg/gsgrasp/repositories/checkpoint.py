"""
Checkpoint repository: the GGF1 field file and the decoder weights.

GGF1 is little-endian: magic, u32 count, u32 d_latent, then per primitive
f32x3 mean, f32x4 quaternion (w, x, y, z), f32x3 scale, f32 opacity,
f32x48 SH (coefficient-major) and f32 x d_latent feature.
"""
import logging
import pickle
from pathlib import Path

import numpy as np
import torch

from gsgrasp.core.exceptions import (
    InvariantViolationError,
    MissingFileError,
    ParseError,
)
from gsgrasp.models.gaussian import NUM_SH_COEFFS, GaussianField
from gsgrasp.services.efd import FeatureDecoder

logger = logging.getLogger(__name__)

GGF1_MAGIC = b"GGF1"
_HEADER = np.dtype([("magic", "S4"), ("count", "<u4"), ("dim", "<u4")])


def primitive_dtype(d_latent: int) -> np.dtype:
    return np.dtype([
        ("mean", "<f4", (3,)),
        ("quat", "<f4", (4,)),
        ("scale", "<f4", (3,)),
        ("opacity", "<f4"),
        ("sh", "<f4", (NUM_SH_COEFFS * 3,)),
        ("feature", "<f4", (d_latent,)),
    ])


def save_field(field: GaussianField, path: str | Path) -> None:
    path = Path(path)
    arrays = field.to_arrays()
    records = np.empty(field.count, dtype=primitive_dtype(field.d_latent))
    records["mean"] = arrays["means"]
    records["quat"] = arrays["rotations"]
    records["scale"] = arrays["scales"]
    records["opacity"] = arrays["opacities"]
    records["sh"] = arrays["sh"].reshape(field.count, -1)
    records["feature"] = arrays["latents"]
    header = np.array([(GGF1_MAGIC, field.count, field.d_latent)], dtype=_HEADER)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header.tobytes() + records.tobytes())
    logger.info(f"Saved {field.count} primitive(s) to {path}")


def load_field(
    path: str | Path,
    frame_id: str = "robot_base",
    dtype: torch.dtype = torch.float32,
) -> GaussianField:
    """
    Raises:
        MissingFileError: no such file
        ParseError: bad magic or size
        InvariantViolationError: non-finite values, zero quaternions,
            non-positive scales or opacity outside (0, 1]
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(str(path), "checkpoint")
    data = path.read_bytes()
    if len(data) < _HEADER.itemsize:
        raise ParseError(str(path), "truncated header", "checkpoint")
    header = np.frombuffer(data, dtype=_HEADER, count=1)[0]
    if header["magic"] != GGF1_MAGIC:
        raise ParseError(str(path), f"bad magic {header['magic']!r}", "checkpoint")
    count, d_latent = int(header["count"]), int(header["dim"])
    record = primitive_dtype(d_latent)
    if len(data) != _HEADER.itemsize + count * record.itemsize:
        raise ParseError(str(path), "size does not match header", "checkpoint")
    records = np.frombuffer(data, dtype=record, count=count, offset=_HEADER.itemsize)

    for name in record.names:
        if not np.all(np.isfinite(records[name])):
            raise InvariantViolationError(str(path), name, "non-finite values")
    if np.any(np.linalg.norm(records["quat"], axis=1) == 0):
        raise InvariantViolationError(str(path), "quat", "zero quaternion")
    if np.any(records["scale"] <= 0):
        raise InvariantViolationError(str(path), "scale", "scales must be positive")
    if np.any((records["opacity"] <= 0) | (records["opacity"] > 1)):
        raise InvariantViolationError(str(path), "opacity", "opacity outside (0, 1]")

    return GaussianField.from_arrays(
        {
            "means": records["mean"],
            "rotations": records["quat"],
            "scales": records["scale"],
            "opacities": records["opacity"],
            "sh": records["sh"].reshape(count, NUM_SH_COEFFS, 3),
            "latents": records["feature"],
        },
        frame_id=frame_id,
        dtype=dtype,
    )


def save_decoder(decoder: FeatureDecoder, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "d_latent": decoder.d_latent,
            "hidden": decoder.hidden,
            "d_clip": decoder.d_clip,
            "state_dict": decoder.state_dict(),
        },
        path,
    )


def load_decoder(path: str | Path, dtype: torch.dtype = torch.float32) -> FeatureDecoder:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(str(path), "decoder")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        decoder = FeatureDecoder(payload["d_latent"], payload["hidden"], payload["d_clip"])
        decoder.load_state_dict(payload["state_dict"])
    except (RuntimeError, KeyError, TypeError, pickle.UnpicklingError) as exc:
        raise ParseError(str(path), str(exc), "decoder") from exc
    return decoder.to(dtype).eval()
