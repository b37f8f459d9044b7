from lanit.embedding.base import (
    FROZEN,
    LEARNABLE,
    TokenSequence,
    VLMBackend,
    cosine,
    embed_image,
    embed_text,
    encode_text_batch,
    image_to_tensor,
    normalize,
)
from lanit.embedding.cache import CachedEmbedder, EmbeddingCache
from lanit.embedding.mock import MockBackend, parse_registry
from lanit.errors import ConfigError


def make_backend(cfg) -> VLMBackend:
    """Build a backend from an ``EmbedderConfig``-like object."""
    if cfg.kind == "mock":
        registry = dict(cfg.registry or {})
        if cfg.registry_file:
            with open(cfg.registry_file) as fh:
                registry.update(parse_registry(fh.read()))
        return MockBackend(
            k=cfg.k,
            registry=registry,
            concepts=cfg.concepts,
            context=cfg.context,
            noise=cfg.noise,
            seed=cfg.seed,
        )
    if cfg.kind == "reference":
        from lanit.embedding.reference import ClipBackend

        return ClipBackend(weights=cfg.weights, device=cfg.device)
    raise ConfigError(f"unknown embedder.kind {cfg.kind!r} (expected 'reference' or 'mock')")


__all__ = [
    "FROZEN",
    "LEARNABLE",
    "CachedEmbedder",
    "EmbeddingCache",
    "MockBackend",
    "TokenSequence",
    "VLMBackend",
    "cosine",
    "embed_image",
    "embed_text",
    "encode_text_batch",
    "image_to_tensor",
    "make_backend",
    "normalize",
    "parse_registry",
]
