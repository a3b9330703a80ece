"""
Pipeline stages shared by the CLI and the HTTP surface.
Each stage runs inside a tracing span; SceneQueryService adapts the query
and grasp stages to async request handling over cached artifacts.
"""
import asyncio
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from gsgrasp.core.exceptions import ValidationError
from gsgrasp.core.telemetry import get_tracer
from gsgrasp.models.domain import (
    CameraView,
    ConvexHull,
    Localization,
    PointCloud,
    RenderOutput,
    Scene,
    ViewAnnotations,
)
from gsgrasp.models.gaussian import GaussianField
from gsgrasp.models.interfaces import ArtifactStore
from gsgrasp.models.schemas import (
    EvalReport,
    GraspFilterConfig,
    GraspFilterRequest,
    GraspFilterResponse,
    GraspProposal,
    LossReport,
    QueryRequest,
    QueryResponse,
    TrainConfig,
)
from gsgrasp.services.efd import FeatureDecoder
from gsgrasp.services.evaluation import evaluate
from gsgrasp.services.field import init_from_rgbd, transform_subset
from gsgrasp.services.geometry import build_grasp_cloud, field_cloud
from gsgrasp.services.grasp import GraspSelection, select_grasp
from gsgrasp.services.query import localize
from gsgrasp.services.rasterizer import render_forward
from gsgrasp.services.training import train

logger = logging.getLogger(__name__)


@dataclass
class UpdateResult:
    field: GaussianField
    decoder: FeatureDecoder
    reports: List[LossReport] = field(default_factory=list)
    noop: bool = False


def select_views(
    views: Sequence[CameraView],
    view_ids: Optional[Sequence[str]] = None,
    count: Optional[int] = None,
) -> List[CameraView]:
    """Views by id, or `count` views evenly spaced over the capture order."""
    if view_ids:
        by_id = {v.view_id: v for v in views}
        missing = [vid for vid in view_ids if vid not in by_id]
        if missing:
            raise ValidationError(f"Unknown view id(s): {', '.join(missing)}")
        return [by_id[vid] for vid in view_ids]
    if count is not None and count < len(views):
        if count < 1:
            raise ValidationError("View count must be >= 1", details={"count": count})
        picks = np.unique(np.round(np.linspace(0, len(views) - 1, count)).astype(int))
        return [views[i] for i in picks]
    return list(views)


def annotations_for(scene: Scene, views: Sequence[CameraView]) -> List[Optional[ViewAnnotations]]:
    index = {v.view_id: a for v, a in zip(scene.views, scene.annotations)}
    return [index.get(v.view_id) for v in views]


# =============================================================================
# Stages
# =============================================================================


def run_init(scene: Scene, target_count: int, seed: int = 0) -> GaussianField:
    with get_tracer().start_as_current_span("pipeline.init") as span:
        span.set_attribute("target_count", target_count)
        return init_from_rgbd(scene.views, target_count, seed=seed, frame_id=scene.frame_id)


def run_train(
    field: GaussianField,
    scene: Scene,
    config: TrainConfig,
    decoder: Optional[FeatureDecoder] = None,
    views: Optional[Sequence[CameraView]] = None,
) -> Tuple[GaussianField, FeatureDecoder, List[LossReport]]:
    views = list(views or scene.views)
    with get_tracer().start_as_current_span("pipeline.train") as span:
        span.set_attribute("iterations", config.effective_iterations)
        span.set_attribute("views", len(views))
        started = time.perf_counter()
        result = train(field, views, annotations_for(scene, views), config, decoder=decoder)
        logger.info(f"Training finished in {time.perf_counter() - started:.1f}s")
        return result


def run_render(field: GaussianField, view: CameraView) -> RenderOutput:
    with get_tracer().start_as_current_span("pipeline.render") as span:
        span.set_attribute("view_id", view.view_id)
        with torch.no_grad():
            return render_forward(field, view)


def run_query(
    field: GaussianField,
    scene: Scene,
    decoder: FeatureDecoder,
    query: str,
    views: Optional[Sequence[CameraView]] = None,
    threshold: Optional[float] = None,
) -> Localization:
    with get_tracer().start_as_current_span("pipeline.query") as span:
        span.set_attribute("query", query)
        return localize(
            field,
            list(views or scene.views),
            decoder,
            scene.query_embeddings(query),
            threshold=threshold,
            temperature=scene.relevance_temperature,
        )


def run_grasp_filter(
    proposals: Sequence[GraspProposal],
    config: GraspFilterConfig,
    localization: Optional[Localization] = None,
    field: Optional[GaussianField] = None,
    views: Optional[Sequence[CameraView]] = None,
    cloud: Optional[PointCloud] = None,
) -> GraspSelection:
    """
    Select a grasp. With a localization the grasp cloud is built from the
    object's rendered depth plus the field, and proposals are restricted to
    the object's box; otherwise `cloud` is used as given.
    """
    with get_tracer().start_as_current_span("pipeline.grasp_filter") as span:
        span.set_attribute("proposals", len(proposals))
        bbox = None
        if localization is not None:
            cloud = build_grasp_cloud(localization, field, list(views or []))
            bbox = (localization.bbox_min, localization.bbox_max)
        return select_grasp(proposals, cloud, config, bbox=bbox)


def run_update(
    field: GaussianField,
    scene: Scene,
    decoder: FeatureDecoder,
    selector: ConvexHull,
    motion: np.ndarray,
    config: TrainConfig,
    views: Optional[Sequence[CameraView]] = None,
) -> UpdateResult:
    """Move the selected primitives, then fine-tune on the given views."""
    with get_tracer().start_as_current_span("pipeline.update") as span:
        identity = np.array_equal(np.asarray(motion, dtype=np.float64), np.eye(4))
        if identity and config.effective_iterations == 0:
            span.set_attribute("noop", True)
            return UpdateResult(field=field, decoder=decoder, noop=True)

        moved = transform_subset(field, selector, motion)
        views = list(views or scene.views)
        moved, decoder, reports = train(moved, views, annotations_for(scene, views), config, decoder=decoder)
        return UpdateResult(field=moved, decoder=decoder, reports=reports)


def run_eval(
    field: GaussianField,
    scene: Scene,
    decoder: FeatureDecoder,
    queries: Optional[Sequence[str]] = None,
    threshold: Optional[float] = None,
    geometry: bool = True,
    latency_resolution: Optional[Tuple[int, int]] = None,
) -> EvalReport:
    with get_tracer().start_as_current_span("pipeline.eval"):
        return evaluate(
            field,
            scene,
            decoder,
            queries=queries,
            threshold=threshold,
            geometry=geometry,
            latency_resolution=latency_resolution,
        )


# =============================================================================
# Service (HTTP surface)
# =============================================================================


class SceneQueryService:
    """
    Query and grasp selection over the artifacts of one served scene.
    Rendering is CPU bound and runs in a worker thread.
    """

    def __init__(self, store: ArtifactStore) -> None:
        self._store = store

    async def _artifacts(self) -> Tuple[Scene, GaussianField, FeatureDecoder]:
        scene = await self._store.get_scene()
        field = await self._store.get_field()
        decoder = await self._store.get_decoder()
        return scene, field, decoder

    async def query(self, request: QueryRequest) -> QueryResponse:
        scene, field, decoder = await self._artifacts()
        views = select_views(scene.views, request.view_ids)
        started = time.perf_counter()
        localization = await asyncio.to_thread(
            run_query, field, scene, decoder, request.query, views, request.threshold
        )
        elapsed_ms = (time.perf_counter() - started) * 1000
        return QueryResponse(
            query=request.query,
            bbox_min=localization.bbox_min.tolist(),
            bbox_max=localization.bbox_max.tolist(),
            hull_vertices=localization.hull.vertices.tolist(),
            mask_pixels={vid: int(m.sum()) for vid, m in localization.object_mask.items()},
            latency_ms=elapsed_ms,
        )

    async def filter_grasps(self, request: GraspFilterRequest) -> GraspFilterResponse:
        scene, field, decoder = await self._artifacts()
        if request.query is None:
            from_field = await asyncio.to_thread(field_cloud, field)
            selection = await asyncio.to_thread(
                run_grasp_filter, request.proposals, request.config, cloud=from_field
            )
        else:
            localization = await asyncio.to_thread(run_query, field, scene, decoder, request.query)
            selection = await asyncio.to_thread(
                run_grasp_filter,
                request.proposals,
                request.config,
                localization,
                field,
                scene.views,
            )
        return GraspFilterResponse(selected=selection.best_index, proposals=selection.decisions)
