"""Persistent image-embedding cache keyed by (backend identity, content digest)."""
from __future__ import annotations

import hashlib
import sqlite3
import threading

import numpy as np

from lanit.embedding.base import check_image_array, embed_image


class EmbeddingCache:
    """SQLite-backed key-value store of float64 embedding vectors.

    Writes are serialized through one lock (single writer); readers share the
    connection under the same lock, which is enough for batch tooling.
    """

    def __init__(self, path):
        self.path = str(path)
        self._lock = threading.Lock()
        self._db = sqlite3.connect(self.path, check_same_thread=False)
        self._db.execute("CREATE TABLE IF NOT EXISTS emb (key BLOB PRIMARY KEY, value BLOB NOT NULL)")
        self._db.commit()

    @staticmethod
    def key(identity: str, image: np.ndarray) -> bytes:
        arr = np.ascontiguousarray(image, dtype=np.float32)
        h = hashlib.sha256(identity.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
        return h.digest()

    def get(self, key: bytes):
        with self._lock:
            row = self._db.execute("SELECT value FROM emb WHERE key = ?", (key,)).fetchone()
        return None if row is None else np.frombuffer(row[0], dtype=np.float64).copy()

    def put(self, key: bytes, value: np.ndarray):
        with self._lock:
            self._db.execute(
                "INSERT OR REPLACE INTO emb (key, value) VALUES (?, ?)",
                (key, np.asarray(value, dtype=np.float64).tobytes()),
            )
            self._db.commit()

    def __len__(self):
        with self._lock:
            return self._db.execute("SELECT COUNT(*) FROM emb").fetchone()[0]

    def close(self):
        self._db.close()


class CachedEmbedder:
    """Non-differentiable image embedding through an :class:`EmbeddingCache`."""

    def __init__(self, backend, cache: EmbeddingCache):
        self.backend = backend
        self.cache = cache
        self.hits = 0
        self.misses = 0

    def embed_image(self, image) -> np.ndarray:
        arr = check_image_array(image)
        key = self.cache.key(self.backend.identity, arr)
        v = self.cache.get(key)
        if v is not None:
            self.hits += 1
            return v
        self.misses += 1
        v = embed_image(self.backend, arr)
        self.cache.put(key, v)
        return v
