"""
Health check router for observability.
"""
from fastapi import APIRouter, Depends

from gsgrasp.api.dependencies import get_artifact_store
from gsgrasp.config import get_settings
from gsgrasp.repositories.memory import InMemoryArtifactStore

router = APIRouter(tags=["health"])


@router.get("/health", summary="Health Check")
async def health_check() -> dict:
    """Basic health check endpoint."""
    return {"status": "healthy"}


@router.get("/health/ready", summary="Readiness Check")
async def readiness_check(store: InMemoryArtifactStore = Depends(get_artifact_store)) -> dict:
    """
    Readiness check for Kubernetes.
    Reports which artifacts are configured and which are held in memory.
    """
    settings = get_settings()
    loaded = store.loaded()
    return {
        "status": "ready" if all(loaded.values()) else "loading",
        "artifacts": {
            "loaded": loaded,
            "configured": {
                "scene": settings.SCENE_MANIFEST is not None,
                "field": settings.CHECKPOINT_PATH is not None,
                "decoder": settings.DECODER_PATH is not None,
            },
        },
    }
