"""Backend-independent pieces of the vision-language embedding layer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch

from lanit.errors import InputError, NormalizationError, ShapeError

LEARNABLE = "learnable-template"
FROZEN = "frozen-domain"


@dataclass
class TokenSequence:
    """An ordered list of token embeddings with a per-token provenance flag."""

    tokens: torch.Tensor  # (n, width)
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] == 0:
            raise InputError("token sequence must be a non-empty (n, width) tensor")
        if not self.provenance:
            self.provenance = [FROZEN] * self.tokens.shape[0]
        if len(self.provenance) != self.tokens.shape[0]:
            raise InputError("provenance length does not match token count")

    def __len__(self):
        return self.tokens.shape[0]


@runtime_checkable
class VLMBackend(Protocol):
    k: int
    token_width: int
    deterministic: bool

    @property
    def identity(self) -> str: ...

    def template_tokens(self, text: str) -> torch.Tensor: ...

    def domain_tokens(self, text: str) -> torch.Tensor: ...

    def encode_text(self, tokens: torch.Tensor) -> torch.Tensor: ...

    def encode_images(self, images: torch.Tensor) -> torch.Tensor: ...


def check_image_array(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got shape {arr.shape}")
    return arr


def image_to_tensor(image) -> torch.Tensor:
    """HxWx3 array in [0, 1] -> (1, 3, H, W) float tensor."""
    arr = check_image_array(image)
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)[None]


def embed_image(backend: VLMBackend, image) -> np.ndarray:
    """Embed a single HxWx3 [0, 1] image; returns a float64 vector of length k."""
    with torch.no_grad():
        v = backend.encode_images(image_to_tensor(image))[0]
    return v.double().cpu().numpy()


def embed_text(backend: VLMBackend, prompt: TokenSequence) -> torch.Tensor:
    if len(prompt) == 0:
        raise InputError("empty token sequence")
    return backend.encode_text(prompt.tokens)


def encode_text_batch(backend: VLMBackend, sequences: Sequence[torch.Tensor]) -> torch.Tensor:
    batch = getattr(backend, "encode_texts", None)
    if batch is not None:
        return batch(list(sequences))
    return torch.stack([backend.encode_text(s) for s in sequences])


def normalize(v, eps: float = 0.0):
    """Unit-normalize the last axis of a tensor or array; zero vectors are an error."""
    if isinstance(v, torch.Tensor):
        n = v.norm(dim=-1, keepdim=True)
        if bool((n <= eps).any()):
            raise NormalizationError("cannot normalize a zero vector")
        return v / n
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n <= eps):
        raise NormalizationError("cannot normalize a zero vector")
    return v / n


def cosine(a, b):
    """Cosine similarity of two non-zero vectors of equal length."""
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        a = torch.as_tensor(a)
        b = torch.as_tensor(b, dtype=a.dtype)
        if a.shape[-1] != b.shape[-1]:
            raise InputError(f"length mismatch: {a.shape[-1]} vs {b.shape[-1]}")
        return (normalize(a) * normalize(b)).sum(-1)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise InputError(f"length mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    return float(np.clip(np.dot(normalize(a), normalize(b)), -1.0, 1.0))
