"""
Open-vocabulary localization: relevance scoring of rendered features against
a query embedding, threshold masking, and the 3D extent of the match.
"""
import logging
import time
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from scipy import ndimage

from gsgrasp.config import get_settings
from gsgrasp.core.exceptions import (
    DegenerateInputError,
    EmptyQueryResultError,
    ShapeMismatchError,
    ValidationError,
)
from gsgrasp.core.telemetry import get_tracer
from gsgrasp.models.domain import CameraView, Localization, QueryEmbeddings
from gsgrasp.models.gaussian import GaussianField
from gsgrasp.services.efd import FeatureDecoder, decode_normalized
from gsgrasp.services.geometry import bbox_hull, convex_hull, object_cloud
from gsgrasp.services.rasterizer import RasterSettings, render_forward, to_numpy

logger = logging.getLogger(__name__)

QUERY_CHANNELS = ("color", "feature", "depth", "normal")


def relevance_from_dots(
    query_dot: Union[np.ndarray, torch.Tensor],
    canonical_dots: Union[np.ndarray, torch.Tensor],
    temperature: float = 1.0,
) -> np.ndarray:
    """
    min_i exp(t*q) / (exp(t*q) + exp(t*c_i)) for query dots q (...,) and
    canonical dots c (..., n_canon). Evaluated as a sigmoid in float64.
    """
    q = torch.as_tensor(query_dot, dtype=torch.float64)
    c = torch.as_tensor(canonical_dots, dtype=torch.float64)
    if c.shape[:-1] != q.shape:
        raise ShapeMismatchError("canonical_dots", tuple(q.shape) + (-1,), tuple(c.shape))
    scores = torch.sigmoid(temperature * (q[..., None] - c))
    return scores.min(dim=-1).values.numpy()


def relevance(
    feature_map: torch.Tensor,
    decoder: FeatureDecoder,
    embeddings: QueryEmbeddings,
    temperature: float = 1.0,
) -> np.ndarray:
    """
    Per-pixel relevance of a rendered (H, W, d_latent) feature map.

    Returns:
        (H, W) float64 scores in (0, 1)
    """
    if len(embeddings.canonical) == 0:
        raise ValidationError("At least one canonical embedding is required")
    h, w, d = feature_map.shape
    with torch.no_grad():
        latents = torch.as_tensor(feature_map).reshape(-1, d).to(next(decoder.parameters()).dtype)
        decoded = decode_normalized(decoder, latents).double()
        query = torch.as_tensor(embeddings.query, dtype=torch.float64)
        canonical = torch.as_tensor(embeddings.canonical, dtype=torch.float64)
        if query.shape[-1] != decoded.shape[-1] or canonical.shape[-1] != decoded.shape[-1]:
            raise ShapeMismatchError("embeddings", (decoded.shape[-1],), (query.shape[-1],))
        scores = relevance_from_dots(decoded @ query, decoded @ canonical.T, temperature)
    return scores.reshape(h, w)


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected component of a boolean mask; ties keep the lower label."""
    labels, count = ndimage.label(mask)
    if count == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def relevance_maps(
    field: GaussianField,
    views: List[CameraView],
    decoder: FeatureDecoder,
    embeddings: QueryEmbeddings,
    temperature: float = 1.0,
    raster: Optional[RasterSettings] = None,
) -> Tuple[Dict[str, np.ndarray], Dict[str, Dict[str, np.ndarray]], Dict[str, float]]:
    """
    Render and score every view.

    Returns:
        (relevance, rendered maps without the feature channel, seconds per view)
    """
    tracer = get_tracer()
    scores: Dict[str, np.ndarray] = {}
    rendered: Dict[str, Dict[str, np.ndarray]] = {}
    latency: Dict[str, float] = {}
    for view in views:
        with tracer.start_as_current_span("query.view") as span:
            span.set_attribute("view_id", view.view_id)
            started = time.perf_counter()
            with torch.no_grad():
                out = render_forward(field, view, channels=QUERY_CHANNELS, raster=raster)
                scores[view.view_id] = relevance(out.feature, decoder, embeddings, temperature)
            latency[view.view_id] = time.perf_counter() - started
        maps = to_numpy(out)
        maps.pop("feature", None)
        rendered[view.view_id] = maps
    return scores, rendered, latency


def localize(
    field: GaussianField,
    views: List[CameraView],
    decoder: FeatureDecoder,
    embeddings: QueryEmbeddings,
    threshold: Optional[float] = None,
    temperature: float = 1.0,
    min_alpha: Optional[float] = None,
    raster: Optional[RasterSettings] = None,
) -> Localization:
    """
    Render every view, score relevance, and lift the matched region to 3D.

    The object mask per view is the largest connected component of the
    thresholded relevance restricted to pixels with accumulated opacity of at
    least `min_alpha`. Object points from all views are merged before the
    hull is built; flat or tiny point sets fall back to an inflated box.

    Raises:
        ValidationError: no views
        EmptyQueryResultError: nothing passes the threshold in any view
    """
    if not views:
        raise ValidationError("At least one view is required")
    settings = get_settings()
    threshold = settings.RELEVANCE_THRESHOLD if threshold is None else threshold
    min_alpha = settings.QUERY_MIN_ALPHA if min_alpha is None else min_alpha

    scores, rendered, latency = relevance_maps(field, views, decoder, embeddings, temperature, raster)
    mask2d = {vid: rel >= threshold for vid, rel in scores.items()}
    object_mask = {
        vid: largest_component(mask2d[vid] & (rendered[vid]["alpha"] >= min_alpha))
        for vid in scores
    }

    if not any(m.any() for m in mask2d.values()):
        raise EmptyQueryResultError(embeddings.name, threshold)

    depth_maps = {vid: maps["depth"].astype(np.float64) for vid, maps in rendered.items()}
    colors = {vid: maps["color"].astype(np.float64) for vid, maps in rendered.items()}
    cloud = object_cloud(depth_maps, object_mask, views, colors=colors)
    if len(cloud) == 0:
        raise EmptyQueryResultError(embeddings.name, threshold)

    bbox_min = cloud.points.min(axis=0)
    bbox_max = cloud.points.max(axis=0)
    try:
        hull = convex_hull(cloud.points)
    except DegenerateInputError as exc:
        logger.warning(
            f"Object points degenerate ({exc.message}), using an inflated box",
            extra={"query": embeddings.name, "error_code": exc.error_code},
        )
        hull = bbox_hull(bbox_min, bbox_max)
        bbox_min, bbox_max = hull.bounds

    logger.info(
        f"Localized {len(cloud)} points in {sum(latency.values()):.3f}s",
        extra={"query": embeddings.name, "count": len(cloud)},
    )
    return Localization(
        query=embeddings.name,
        relevance=scores,
        mask2d=mask2d,
        object_mask=object_mask,
        rendered=rendered,
        points=cloud.points,
        colors=cloud.colors,
        bbox_min=bbox_min,
        bbox_max=bbox_max,
        hull=hull,
        threshold=threshold,
        latency_s=latency,
    )


def localization_hit(
    localization: Union[Localization, np.ndarray],
    gt_mask: np.ndarray,
    view_id: Optional[str] = None,
) -> bool:
    """
    True when the highest-relevance pixel lies inside `gt_mask`; ties resolve
    to the first pixel in row-major order.
    """
    if isinstance(localization, Localization):
        if view_id is None:
            view_id = next(iter(localization.relevance))
        scores = localization.relevance[view_id]
    else:
        scores = np.asarray(localization)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if scores.shape != gt_mask.shape:
        raise ShapeMismatchError("gt_mask", tuple(scores.shape), tuple(gt_mask.shape))
    row, col = np.unravel_index(int(np.argmax(scores)), scores.shape)
    return bool(gt_mask[row, col])
