"""
Dependency injection container.
Creates and wires the serve-surface components.
Uses FastAPI's dependency injection system.
"""
from functools import lru_cache

from fastapi import Depends

from gsgrasp.repositories.memory import InMemoryArtifactStore
from gsgrasp.services.pipeline import SceneQueryService


# =============================================================================
# Singleton Instances (Application Lifetime)
# =============================================================================


@lru_cache()
def get_artifact_store() -> InMemoryArtifactStore:
    """Get singleton artifact store (scene, field and decoder caches)."""
    return InMemoryArtifactStore()


# =============================================================================
# Request-Scoped Dependencies (Per-Request Lifetime)
# =============================================================================


def get_query_service(
    store: InMemoryArtifactStore = Depends(get_artifact_store),
) -> SceneQueryService:
    """Query service wired to the shared artifact store."""
    return SceneQueryService(store=store)


# =============================================================================
# Cleanup Functions
# =============================================================================


def clear_caches() -> None:
    """Clear all cached singleton instances (for testing)."""
    get_artifact_store.cache_clear()
