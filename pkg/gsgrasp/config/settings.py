"""
Centralized configuration using Pydantic BaseSettings.
All environment variables are loaded here - no hardcoded values in services.
"""
from functools import lru_cache
from typing import Optional

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Engine settings loaded from environment variables."""

    # Application
    APP_NAME: str = "Gaussian Grasp Field"
    APP_VERSION: str = "1.0.0"
    DEBUG: bool = False

    # Threading - torch intra-op threads and the per-view loader pool
    NUM_THREADS: int = 4

    # Rasterizer
    TILE_SIZE: int = 16
    NEAR_PLANE: float = 0.01  # meters
    ALPHA_MAX: float = 0.99
    TRANSMITTANCE_EPS: float = 1e-4
    COV2D_DILATION: float = 0.3  # px^2 anti-aliasing inflation
    MIN_COV2D_DET: float = 1e-12

    # Camera validation
    MAX_DEPTH_RANGE: float = 10.0  # meters
    POSE_ORTHONORMAL_TOL: float = 1e-5

    # Latent / embedding sizes
    D_LATENT: int = 16
    D_CLIP: int = 512
    DECODER_HIDDEN: int = 128

    # Query
    RELEVANCE_THRESHOLD: float = 0.85
    QUERY_MIN_ALPHA: float = 0.5
    LATENCY_HEIGHT: int = 480  # timed relevance render in `eval`
    LATENCY_WIDTH: int = 640

    # Grasp filter
    GRASP_ANGLE_SUM_THRESHOLD_DEG: float = 60.0
    GRASP_NORMAL_RADIUS: float = 0.005  # meters

    # Serve surface (artifacts loaded at startup)
    SCENE_MANIFEST: Optional[str] = None
    CHECKPOINT_PATH: Optional[str] = None
    DECODER_PATH: Optional[str] = None
    FIELD_CACHE_TTL_SEC: int = 600

    # Telemetry
    ENABLE_OTEL: bool = False  # Default to False to prevent gRPC errors in dev
    ENABLE_PROMETHEUS: bool = True

    class Config:
        env_file = ".env"
        case_sensitive = True


@lru_cache()
def get_settings() -> Settings:
    """Cached settings instance - singleton pattern."""
    return Settings()
