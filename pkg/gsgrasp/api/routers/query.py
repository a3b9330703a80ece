"""
Query router.
POST /v1/query localizes an object by name; POST /v1/grasp-filter selects a
force-closure grasp among externally generated proposals.
"""
import logging

from fastapi import APIRouter, Depends, Response

from gsgrasp.api.dependencies import get_query_service
from gsgrasp.models.schemas import (
    ErrorResponse,
    GraspFilterRequest,
    GraspFilterResponse,
    QueryRequest,
    QueryResponse,
)
from gsgrasp.services.pipeline import SceneQueryService

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/v1", tags=["query"])

_ERRORS = {
    400: {"model": ErrorResponse, "description": "Invalid request"},
    404: {"model": ErrorResponse, "description": "Unknown query, nothing matched or no feasible grasp"},
    422: {"model": ErrorResponse, "description": "Degenerate geometry"},
}


@router.post(
    "/query",
    response_model=QueryResponse,
    summary="Localize an Object",
    description="""
    Render the served field from the scene's views, score each pixel against
    the named embedding and return the 3D extent of the largest match.
    """,
    responses=_ERRORS,
)
async def query_object(
    request: QueryRequest,
    response: Response,
    service: SceneQueryService = Depends(get_query_service),
) -> QueryResponse:
    result = await service.query(request)
    response.headers["Cache-Control"] = "no-store"
    response.headers["X-Render-Latency-Ms"] = f"{result.latency_ms:.1f}"
    return result


@router.post(
    "/grasp-filter",
    response_model=GraspFilterResponse,
    summary="Select a Grasp",
    description="""
    Reject proposals whose contacts are not antipodal on the reconstructed
    surface and return the highest scoring survivor. With `query` set, only
    proposals inside the object's bounding box are considered.
    """,
    responses=_ERRORS,
)
async def filter_grasps(
    request: GraspFilterRequest,
    service: SceneQueryService = Depends(get_query_service),
) -> GraspFilterResponse:
    result = await service.filter_grasps(request)
    logger.info(
        f"Selected proposal {result.selected} of {len(result.proposals)}",
        extra={"query": request.query},
    )
    return result
