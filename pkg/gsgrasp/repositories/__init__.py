"""Repository implementations package - file formats and artifact stores."""
from .checkpoint import load_decoder, load_field, save_decoder, save_field
from .memory import InMemoryArtifactStore
from .scene import load_scene, write_scene

__all__ = [
    "InMemoryArtifactStore",
    "load_decoder",
    "load_field",
    "load_scene",
    "save_decoder",
    "save_field",
    "write_scene",
]
