"""
In-memory artifact store for the serve surface.
Artifacts are loaded lazily from the paths in settings and held in TTL
caches; tests place artifacts directly with the put_* methods.
"""
import asyncio
import logging
from typing import Dict, Optional

import torch

from gsgrasp.config import Settings, get_settings
from gsgrasp.core.cache import ArtifactCache
from gsgrasp.core.exceptions import NotFoundError
from gsgrasp.models.domain import Scene
from gsgrasp.models.gaussian import GaussianField
from gsgrasp.repositories.checkpoint import load_decoder, load_field
from gsgrasp.repositories.scene import load_scene
from gsgrasp.services.efd import FeatureDecoder

logger = logging.getLogger(__name__)

_PINNED = "<memory>"


class InMemoryArtifactStore:
    """
    Implementation of ArtifactStore backed by ArtifactCache.
    A checkpoint replaced on disk is reloaded on the next request.
    """

    def __init__(self, settings: Optional[Settings] = None) -> None:
        self._settings = settings or get_settings()
        ttl = self._settings.FIELD_CACHE_TTL_SEC
        self._scenes: ArtifactCache[Scene] = ArtifactCache(default_ttl_seconds=ttl)
        self._fields: ArtifactCache[GaussianField] = ArtifactCache(default_ttl_seconds=ttl)
        self._decoders: ArtifactCache[FeatureDecoder] = ArtifactCache(default_ttl_seconds=ttl)

    @staticmethod
    def _path(value: Optional[str], resource: str) -> str:
        if not value:
            raise NotFoundError(resource, "not configured")
        return value

    def _scene_path(self) -> Optional[str]:
        return self._settings.SCENE_MANIFEST

    def _load_scene(self) -> Scene:
        path = self._path(self._scene_path(), "scene")
        return self._scenes.get_or_load(path, lambda: load_scene(path))

    def _load_field(self) -> GaussianField:
        path = self._path(self._settings.CHECKPOINT_PATH, "checkpoint")
        frame_id = self._load_scene().frame_id if self._scene_path() else "robot_base"
        return self._fields.get_or_load(path, lambda: load_field(path, frame_id=frame_id))

    def _load_decoder(self) -> FeatureDecoder:
        path = self._path(self._settings.DECODER_PATH, "decoder")
        return self._decoders.get_or_load(path, lambda: load_decoder(path, dtype=torch.float32))

    async def get_scene(self) -> Scene:
        pinned = self._scenes.get(_PINNED)
        if pinned is not None:
            return pinned
        return await asyncio.to_thread(self._load_scene)

    async def get_field(self) -> GaussianField:
        pinned = self._fields.get(_PINNED)
        if pinned is not None:
            return pinned
        return await asyncio.to_thread(self._load_field)

    async def get_decoder(self) -> FeatureDecoder:
        pinned = self._decoders.get(_PINNED)
        if pinned is not None:
            return pinned
        return await asyncio.to_thread(self._load_decoder)

    def put_scene(self, scene: Scene) -> None:
        self._scenes.set(_PINNED, scene, ttl_seconds=0)

    def put_field(self, field: GaussianField) -> None:
        self._fields.set(_PINNED, field, ttl_seconds=0)

    def put_decoder(self, decoder: FeatureDecoder) -> None:
        self._decoders.set(_PINNED, decoder, ttl_seconds=0)

    def loaded(self) -> Dict[str, bool]:
        return {
            "scene": self._scenes.size() > 0,
            "field": self._fields.size() > 0,
            "decoder": self._decoders.size() > 0,
        }

    def clear(self) -> None:
        for cache in (self._scenes, self._fields, self._decoders):
            cache.clear()
        logger.info("Artifact caches cleared")
