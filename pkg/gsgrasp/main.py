"""
FastAPI application for serving a trained scene.
Configures logging, exception handlers, telemetry and routers.
"""
import logging
from contextlib import asynccontextmanager
from typing import AsyncGenerator

import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from gsgrasp.api.dependencies import get_artifact_store
from gsgrasp.api.routers import health_router, query_router
from gsgrasp.config import get_settings
from gsgrasp.config.logging import configure_logging
from gsgrasp.core.exceptions import AppException
from gsgrasp.core.telemetry import setup_telemetry


# =============================================================================
# Lifespan (Startup/Shutdown)
# =============================================================================


@asynccontextmanager
async def lifespan(app: FastAPI) -> AsyncGenerator[None, None]:
    """Warm the artifact caches so the first query does not pay for loading."""
    logger = logging.getLogger(__name__)
    settings = get_settings()
    torch.set_num_threads(settings.NUM_THREADS)

    logger.info(f"Starting {settings.APP_NAME} v{settings.APP_VERSION}")
    if settings.SCENE_MANIFEST and settings.CHECKPOINT_PATH and settings.DECODER_PATH:
        store = get_artifact_store()
        try:
            await store.get_scene()
            await store.get_field()
            await store.get_decoder()
        except AppException as exc:
            logger.error(f"Artifact preload failed: {exc.message}", extra={"error_code": exc.error_code})
    else:
        logger.warning("Scene artifacts not fully configured; queries will fail until they are")

    yield

    logger.info("Shutting down application")


# =============================================================================
# Exception Handlers
# =============================================================================


async def app_exception_handler(request: Request, exc: AppException) -> JSONResponse:
    """Domain errors keep their code; 5xx ones are logged with the request path."""
    if exc.status_code >= 500:
        logging.getLogger(__name__).error(
            f"{request.url.path} failed: {exc.message}", extra={"error_code": exc.error_code}
        )
    return JSONResponse(status_code=exc.status_code, content=exc.to_dict())


async def unhandled_exception_handler(request: Request, exc: Exception) -> JSONResponse:
    logging.getLogger(__name__).exception(f"Unhandled exception on {request.url.path}: {exc}")
    payload = AppException("An unexpected error occurred").to_dict()
    return JSONResponse(status_code=500, content=payload)


# =============================================================================
# Application Factory
# =============================================================================


def create_app() -> FastAPI:
    """Create and configure the FastAPI application."""
    settings = get_settings()
    configure_logging(debug=settings.DEBUG)

    app = FastAPI(
        title=settings.APP_NAME,
        version=settings.APP_VERSION,
        description="""
        Gaussian feature field query service

        Serves one trained scene: open-vocabulary object localization and
        force-closure filtering of grasp proposals.

        ## Features
        - Relevance rendering against named embeddings
        - 3D bounding box and convex hull of the matched object
        - Antipodal grasp selection on the reconstructed surface
        - Observability: JSON logs, Prometheus, OpenTelemetry
        """,
        lifespan=lifespan,
        docs_url="/docs",
        redoc_url="/redoc",
    )

    app.add_exception_handler(AppException, app_exception_handler)
    app.add_exception_handler(Exception, unhandled_exception_handler)

    app.include_router(health_router)
    app.include_router(query_router)

    setup_telemetry(app)

    return app


app = create_app()
