"""
In-memory TTL cache for loaded scene artifacts.
Keys are file paths; an entry is dropped when it expires or when the file
on disk changes, so a retrained checkpoint is picked up without a restart.
"""
import os
import time
from threading import Lock
from typing import Callable, Dict, Generic, Optional, Tuple, TypeVar

T = TypeVar("T")


class CacheEntry(Generic[T]):
    """Single cache entry with expiration and source fingerprint."""

    def __init__(
        self,
        value: T,
        expires_at: Optional[float],
        fingerprint: Optional[Tuple[float, int]] = None,
    ) -> None:
        self.value = value
        self.expires_at = expires_at
        self.fingerprint = fingerprint

    def is_expired(self) -> bool:
        if self.expires_at is None:
            return False
        return time.time() > self.expires_at


def file_fingerprint(path: str) -> Optional[Tuple[float, int]]:
    """(mtime, size) of a file, None if it does not exist."""
    try:
        stat = os.stat(path)
    except OSError:
        return None
    return (stat.st_mtime, stat.st_size)


class ArtifactCache(Generic[T]):
    """
    Thread-safe TTL cache for objects loaded from files.

    Usage:
        cache: ArtifactCache[GaussianField] = ArtifactCache(default_ttl_seconds=600)
        field = cache.get_or_load(path, lambda: checkpoints.load(path))
    """

    def __init__(self, default_ttl_seconds: Optional[int] = None) -> None:
        self._store: Dict[str, CacheEntry[T]] = {}
        self._default_ttl = default_ttl_seconds
        self._lock = Lock()

    def get(self, key: str) -> Optional[T]:
        """Get value by key, None if missing, expired or stale on disk."""
        with self._lock:
            entry = self._store.get(key)
            if entry is None:
                return None
            stale = (
                entry.fingerprint is not None
                and file_fingerprint(key) != entry.fingerprint
            )
            if entry.is_expired() or stale:
                del self._store[key]
                return None
            return entry.value

    def set(self, key: str, value: T, ttl_seconds: Optional[int] = None) -> None:
        ttl = ttl_seconds if ttl_seconds is not None else self._default_ttl
        expires_at = time.time() + ttl if ttl else None
        with self._lock:
            self._store[key] = CacheEntry(value, expires_at, file_fingerprint(key))

    def delete(self, key: str) -> bool:
        with self._lock:
            return self._store.pop(key, None) is not None

    def clear(self) -> None:
        with self._lock:
            self._store.clear()

    def get_or_load(
        self,
        key: str,
        loader: Callable[[], T],
        ttl_seconds: Optional[int] = None,
    ) -> T:
        """Return the cached artifact or load and cache it."""
        value = self.get(key)
        if value is not None:
            return value

        # Load outside the lock; checkpoints can take seconds to parse
        loaded = loader()
        self.set(key, loaded, ttl_seconds)
        return loaded

    def size(self) -> int:
        with self._lock:
            return len(self._store)
