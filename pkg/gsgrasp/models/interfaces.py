"""
Artifact access interfaces.
Protocols keep the query service independent of where scenes and
checkpoints come from: files on disk in production, fixtures in tests.
"""
from typing import TYPE_CHECKING, Dict, Protocol, runtime_checkable

from gsgrasp.models.domain import Scene
from gsgrasp.models.gaussian import GaussianField

if TYPE_CHECKING:
    from gsgrasp.services.efd import FeatureDecoder


@runtime_checkable
class ArtifactStore(Protocol):
    """
    Source of the scene, trained field and feature decoder being served.
    Production: files named by settings, cached with a TTL.
    Testing: artifacts placed directly in memory.
    """

    async def get_scene(self) -> Scene:
        """
        Returns:
            The loaded scene

        Raises:
            NotFoundError: no scene is configured
        """
        ...

    async def get_field(self) -> GaussianField:
        ...

    async def get_decoder(self) -> "FeatureDecoder":
        ...

    def loaded(self) -> Dict[str, bool]:
        """Which artifacts are currently held, keyed by artifact name."""
        ...
