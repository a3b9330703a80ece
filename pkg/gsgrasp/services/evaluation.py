"""
Evaluation against ground truth: thresholded-relevance IoU, localization
accuracy and query latency, plus reconstruction quality on training views.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from gsgrasp.config import get_settings
from gsgrasp.core.exceptions import NoValidNeighborhoodError, ValidationError
from gsgrasp.models.domain import CameraView, Scene
from gsgrasp.models.gaussian import GaussianField
from gsgrasp.models.schemas import EvalReport, QueryEvaluation
from gsgrasp.services.efd import FeatureDecoder
from gsgrasp.services.geometry import normals_from_depth
from gsgrasp.services.losses import psnr
from gsgrasp.services.query import localization_hit, relevance_maps
from gsgrasp.services.rasterizer import RasterSettings, render_forward, to_numpy

logger = logging.getLogger(__name__)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """|pred & gt| / |pred | gt|; two empty masks count as a perfect match."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    return int((pred & gt).sum()) / union


def evaluate_query(
    field: GaussianField,
    scene: Scene,
    decoder: FeatureDecoder,
    query: str,
    threshold: float,
    raster: Optional[RasterSettings] = None,
    latency_resolution: Optional[Tuple[int, int]] = None,
) -> QueryEvaluation:
    """
    IoU on every view with a ground-truth mask and hits on those where the
    object is visible, scoring only pixels with accumulated opacity of at
    least QUERY_MIN_ALPHA. Latency is one
    relevance render of the first such view at `latency_resolution`
    (height, width), or the mean over the scored views when it is None.
    """
    gt = scene.gt_masks.get(query)
    if not gt:
        raise ValidationError(f"No ground-truth masks for query {query!r}", details={"query": query})
    views = [scene.view(vid) for vid in gt]
    embeddings = scene.query_embeddings(query)
    scores, rendered, latency = relevance_maps(
        field, views, decoder, embeddings, scene.relevance_temperature, raster
    )
    min_alpha = get_settings().QUERY_MIN_ALPHA
    latency_s = float(np.mean(list(latency.values())))
    if latency_resolution is not None:
        timed = views[0].resized(*latency_resolution)
        _, _, timing = relevance_maps(field, [timed], decoder, embeddings, scene.relevance_temperature, raster)
        latency_s = timing[timed.view_id]

    result = QueryEvaluation(query=query, latency_s=latency_s)
    for vid, rel in scores.items():
        # Pixels the field does not cover carry no feature
        rel = np.where(rendered[vid]["alpha"] >= min_alpha, rel, 0.0)
        result.iou[vid] = iou(rel >= threshold, gt[vid])
        if gt[vid].any():
            result.hits[vid] = localization_hit(rel, gt[vid])
    logger.info(
        f"IoU {np.mean(list(result.iou.values())):.3f}, "
        f"hits {sum(result.hits.values())}/{len(result.hits)}",
        extra={"query": query},
    )
    return result


def reconstruction_metrics(
    field: GaussianField,
    views: Sequence[CameraView],
    min_alpha: Optional[float] = None,
    raster: Optional[RasterSettings] = None,
) -> Tuple[float, float, float]:
    """
    Mean over views of PSNR (dB), valid-pixel depth error (m) and the angle
    (deg) between rendered normals and normals estimated from observed depth
    on covered pixels.
    """
    min_alpha = get_settings().QUERY_MIN_ALPHA if min_alpha is None else min_alpha
    psnrs, depth_errors, angle_errors = [], [], []
    for view in views:
        with torch.no_grad():
            out = render_forward(field, view, channels=("color", "depth", "normal"), raster=raster)
        maps = to_numpy(out)
        psnrs.append(psnr(out.color.detach().double(), torch.as_tensor(view.rgb, dtype=torch.float64)))

        valid = view.depth > 0
        if valid.any():
            depth_errors.append(float(np.abs(maps["depth"][valid] - view.depth[valid]).mean()))

        try:
            target, target_valid = normals_from_depth(view.depth, view)
        except NoValidNeighborhoodError:
            continue
        rendered = maps["normal"].astype(np.float64)
        norm = np.linalg.norm(rendered, axis=-1)
        mask = target_valid & (maps["alpha"] >= min_alpha) & (norm > 0)
        if mask.any():
            cosine = np.einsum("nk,nk->n", rendered[mask] / norm[mask][:, None], target[mask])
            angle_errors.append(float(np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0))).mean()))

    def mean(values: List[float]) -> float:
        return float(np.mean(values)) if values else float("nan")

    return mean(psnrs), mean(depth_errors), mean(angle_errors)


def evaluate(
    field: GaussianField,
    scene: Scene,
    decoder: FeatureDecoder,
    queries: Optional[Sequence[str]] = None,
    threshold: Optional[float] = None,
    geometry: bool = True,
    raster: Optional[RasterSettings] = None,
    latency_resolution: Optional[Tuple[int, int]] = None,
) -> EvalReport:
    """
    Score every query that has ground-truth masks. Latency is timed at
    `latency_resolution` (height, width), LATENCY_HEIGHT x LATENCY_WIDTH
    by default.

    Raises:
        ValidationError: the scene has no ground-truth masks
    """
    settings = get_settings()
    threshold = settings.RELEVANCE_THRESHOLD if threshold is None else threshold
    if latency_resolution is None:
        latency_resolution = (settings.LATENCY_HEIGHT, settings.LATENCY_WIDTH)
    if min(latency_resolution) < 1:
        raise ValidationError("Latency resolution must be positive", details={"resolution": list(latency_resolution)})
    queries = list(queries or scene.gt_masks)
    if not queries:
        raise ValidationError("The scene has no ground-truth masks to evaluate against")

    results = [
        evaluate_query(field, scene, decoder, q, threshold, raster, latency_resolution=latency_resolution)
        for q in queries
    ]
    ious: List[float] = [v for r in results for v in r.iou.values()]
    hits: Dict[str, bool] = {f"{r.query}/{vid}": h for r in results for vid, h in r.hits.items()}

    report = EvalReport(
        miou=float(np.mean(ious)),
        localization_accuracy=float(np.mean(list(hits.values()))) if hits else float("nan"),
        mean_latency_s=float(np.mean([r.latency_s for r in results])),
        resolution=tuple(latency_resolution),
        queries=results,
    )
    if geometry:
        report.psnr, report.depth_error_m, report.normal_error_deg = reconstruction_metrics(
            field, scene.views, raster=raster
        )
    logger.info(
        f"mIoU {report.miou:.3f}, accuracy {report.localization_accuracy:.3f}, "
        f"{report.mean_latency_s * 1000:.1f} ms/query at {latency_resolution[1]}x{latency_resolution[0]}"
    )
    return report
