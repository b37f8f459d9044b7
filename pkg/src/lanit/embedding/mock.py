"""Deterministic offline stand-in for a contrastive image-text model.

Text side: every word (template) or phrase (domain) maps to a fixed unit
direction derived from a seed; a token sequence embeds to the normalized sum
of its token vectors.

Image side: a small set of differentiable "probes" score how strongly an
image shows a registered concept (colour affinity of the foreground, or
compactness of the foreground blob for shapes).  The image embedding is the
sum of the context-word directions plus each concept direction weighted by
its probe score, so images and prompts about the same concepts line up.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
from typing import Mapping

import numpy as np
import torch

from lanit.embedding.base import normalize
from lanit.errors import ConfigError, InputError, ShapeError

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 0.5),
}

# 16 * area / (L1 perimeter)^2 for axis-aligned raster shapes.
SHAPES = {
    "square": 1.0,
    "circle": math.pi / 4,
    "triangle": 0.5,
}

_WORD = re.compile(r"[a-z0-9']+")


def _stable_seed(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def _unit(rng: np.random.Generator, k: int) -> np.ndarray:
    g = rng.standard_normal(k)
    return g / np.linalg.norm(g)


def concept_key(text: str) -> str:
    return " ".join(_WORD.findall(text.lower()))


def parse_registry(text: str) -> dict[str, int]:
    """Parse a ``concept: seed`` text map (one entry per line, ``#`` comments)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"registry line {lineno}: expected 'concept: seed'")
        name, seed = line.rsplit(":", 1)
        try:
            out[concept_key(name)] = int(seed.strip())
        except ValueError:
            raise ConfigError(f"registry line {lineno}: seed must be an integer") from None
    return out


def probe_for(concept: str):
    """Return ('color', rgb) / ('shape', target) / None for a concept phrase."""
    for word in concept.split():
        if word in COLORS:
            return "color", COLORS[word]
        if word in SHAPES:
            return "shape", SHAPES[word]
    return None


class MockBackend:
    deterministic = True

    def __init__(
        self,
        k: int = 512,
        registry: Mapping[str, int] | None = None,
        concepts=(),
        context: str = "",
        noise: float = 0.0,
        seed: int = 0,
        color_sigma: float = 0.3,
        shape_sigma: float = 0.08,
    ):
        if k < 2:
            raise ConfigError("mock embedding dimension must be >= 2")
        if noise < 0:
            raise ConfigError("mock noise must be non-negative")
        self.k = k
        self.token_width = k
        self.noise = float(noise)
        self.seed = int(seed)
        self.context = concept_key(context)
        self.color_sigma = color_sigma
        self.shape_sigma = shape_sigma
        self.calls = 0
        self._seeds = {concept_key(c): int(s) for c, s in (registry or {}).items()}
        self._explicit: dict[str, np.ndarray] = {}
        self._dir_cache: dict[str, np.ndarray] = {}
        self._concepts: list[str] = []
        for c in list(self._seeds) + [concept_key(c) for c in concepts]:
            self._add_concept(c)

    # -- registry -----------------------------------------------------------

    def _add_concept(self, c: str):
        if c and c not in self._concepts:
            self._concepts.append(c)

    def register(self, concept: str, seed: int | None = None, direction=None):
        c = concept_key(concept)
        if direction is not None:
            d = np.asarray(direction, dtype=np.float64)
            if d.shape != (self.k,):
                raise ShapeError(f"direction must have length {self.k}")
            self._explicit[c] = normalize(d)
        elif seed is not None:
            self._seeds[c] = int(seed)
        self._dir_cache.pop(c, None)
        self._add_concept(c)

    @property
    def concepts(self) -> list[str]:
        return list(self._concepts)

    @property
    def identity(self) -> str:
        payload = {
            "k": self.k,
            "seed": self.seed,
            "noise": self.noise,
            "context": self.context,
            "seeds": sorted(self._seeds.items()),
            "explicit": sorted((c, hashlib.sha256(v.tobytes()).hexdigest()) for c, v in self._explicit.items()),
            "concepts": self._concepts,
            "sigmas": [self.color_sigma, self.shape_sigma],
        }
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
        return f"mock:{digest[:16]}"

    def direction(self, concept: str) -> np.ndarray:
        c = concept_key(concept)
        if c in self._explicit:
            return self._explicit[c]
        if c not in self._dir_cache:
            seed = self._seeds.get(c, _stable_seed(self.seed, "dir", c))
            self._dir_cache[c] = _unit(np.random.default_rng(seed), self.k)
        return self._dir_cache[c]

    def token_vector(self, concept: str) -> np.ndarray:
        """Direction perturbed by the configured noise; cos(direction, token) >= sqrt(1 - noise^2)."""
        d = self.direction(concept)
        if self.noise == 0:
            return d.copy()
        g = _unit(np.random.default_rng(_stable_seed(self.seed, "noise", concept_key(concept))), self.k)
        return normalize(d + self.noise * g)

    # -- text ---------------------------------------------------------------

    def template_tokens(self, text: str) -> torch.Tensor:
        words = concept_key(text).split()
        if not words:
            return torch.zeros(0, self.k, dtype=torch.float64)
        return torch.from_numpy(np.stack([self.token_vector(w) for w in words]))

    def domain_tokens(self, text: str) -> torch.Tensor:
        c = concept_key(text)
        if not c:
            raise InputError(f"domain string {text!r} has no tokens")
        return torch.from_numpy(self.token_vector(c)[None])

    def encode_text(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.ndim != 2 or tokens.shape[0] == 0:
            raise InputError("empty token sequence")
        if tokens.shape[1] != self.k:
            raise ShapeError(f"token width must be {self.k}")
        self.calls += 1
        s = tokens.sum(0)
        return s / s.norm()

    def encode_texts(self, sequences) -> torch.Tensor:
        return torch.stack([self.encode_text(s) for s in sequences])

    # -- images -------------------------------------------------------------

    def probe_scores(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        """Per-concept scores in [0, 1] for a (B, 3, H, W) batch in [0, 1]."""
        b = images.shape[0]
        flat = images.flatten(2)
        border = torch.cat(
            [images[:, :, 0, :], images[:, :, -1, :], images[:, :, :, 0], images[:, :, :, -1]], dim=2
        )
        bg = border.median(dim=2).values[:, :, None, None]
        fg = 1 - torch.exp(-((images - bg) ** 2).sum(1) / self.color_sigma**2)  # (B, H, W)
        colour_w = fg.flatten(1) + 1e-3
        area = fg.flatten(1).sum(1)
        perim = (fg[:, :, 1:] - fg[:, :, :-1]).abs().flatten(1).sum(1) + (
            fg[:, 1:, :] - fg[:, :-1, :]
        ).abs().flatten(1).sum(1)
        compact = 16 * area / (perim**2 + 1.0)
        scores = {}
        for c in self._concepts:
            probe = probe_for(c)
            if probe is None:
                continue
            kind, target = probe
            if kind == "color":
                rgb = torch.tensor(target, dtype=images.dtype)[None, :, None]
                aff = torch.exp(-((flat - rgb) ** 2).sum(1) / self.color_sigma**2)
                scores[c] = (aff * colour_w).sum(1) / colour_w.sum(1)
            else:
                scores[c] = torch.exp(-(((compact - target) / self.shape_sigma) ** 2))
        if not scores:
            scores["__none__"] = images.new_zeros(b)
        return scores

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected a (B, 3, H, W) batch, got {tuple(images.shape)}")
        self.calls += 1
        dtype = images.dtype
        b = images.shape[0]
        v = images.new_zeros(b, self.k)
        if self.context:
            ctx = sum(self.direction(w) for w in self.context.split())
            v = v + torch.as_tensor(ctx, dtype=dtype)[None]
        for c, s in self.probe_scores(images).items():
            if c == "__none__":
                continue
            v = v + s[:, None] * torch.as_tensor(self.direction(c), dtype=dtype)[None]
        norms = v.norm(dim=1, keepdim=True)
        # An image showing no registered concept and no context falls back to a fixed direction.
        fallback = torch.as_tensor(self.direction("__blank__"), dtype=dtype)[None]
        v = torch.where(norms > 1e-8, v / norms.clamp_min(1e-8), fallback)
        if self.noise:
            rows = []
            for img in images.detach().to(torch.float32).cpu().numpy():
                g = _unit(np.random.default_rng(_stable_seed(self.seed, "img", hashlib.sha256(img.tobytes()).hexdigest())), self.k)
                rows.append(g)
            v = v + self.noise * torch.as_tensor(np.stack(rows), dtype=dtype)
        return v
