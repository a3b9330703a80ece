"""API package - FastAPI routes and dependencies."""
from .dependencies import get_artifact_store, get_query_service
from .routers import health_router, query_router

__all__ = ["get_artifact_store", "get_query_service", "health_router", "query_router"]
