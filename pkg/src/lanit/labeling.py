"""Prompt construction, image-prompt similarities and multi-hot pseudo labels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from lanit.config import LabelingConfig
from lanit.embedding import FROZEN, LEARNABLE, TokenSequence, encode_text_batch, image_to_tensor, normalize
from lanit.errors import ConfigError, InputError


@dataclass
class SimilarityVector:
    f: np.ndarray
    base_sim: float | None

    @property
    def N(self) -> int:
        return len(self.f)


@dataclass
class DomainLabel:
    d: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.int64)

    @property
    def M(self) -> int:
        return int(self.d.sum())

    def tolist(self) -> list[int]:
        return [int(v) for v in self.d]


class PromptSet(nn.Module):
    """Learnable template tokens shared by every domain, plus frozen domain tokens.

    ``templates[j]`` is one learnable (L_j, width) parameter; with template
    augmentation there is one per augmentation template.  The base prompt of
    template j *is* ``templates[j]`` (same storage), so it moves together with
    the template during prompt learning.
    """

    def __init__(self, template_texts, template_tokens, domain_names, domain_tokens):
        super().__init__()
        if not domain_names:
            raise ConfigError("at least one candidate domain is required")
        if len(set(domain_names)) != len(domain_names):
            raise ConfigError("duplicate candidate domains")
        self.template_texts = list(template_texts)
        self.domain_names = list(domain_names)
        self.templates = nn.ParameterList([nn.Parameter(t.clone()) for t in template_tokens])
        for i, tok in enumerate(domain_tokens):
            self.register_buffer(f"domain_{i}", tok.clone())

    @property
    def N(self) -> int:
        return len(self.domain_names)

    @property
    def L(self) -> int:
        return self.templates[0].shape[0]

    def domain_token(self, n: int) -> torch.Tensor:
        return getattr(self, f"domain_{n}")

    def domain_index(self, name: str) -> int:
        try:
            return self.domain_names.index(name)
        except ValueError:
            raise ConfigError(f"unknown domain {name!r}; known domains: {', '.join(self.domain_names)}") from None

    def sequences(self, j: int = 0) -> list[TokenSequence]:
        tpl = self.templates[j]
        out = []
        for n in range(self.N):
            dom = self.domain_token(n).to(tpl.dtype)
            out.append(
                TokenSequence(torch.cat([tpl, dom]), [LEARNABLE] * tpl.shape[0] + [FROZEN] * dom.shape[0])
            )
        return out

    def base_sequence(self, j: int = 0) -> TokenSequence | None:
        tpl = self.templates[j]
        if tpl.shape[0] == 0:
            return None
        return TokenSequence(tpl, [LEARNABLE] * tpl.shape[0])

    def text_embeddings(self, backend, augment: bool = False):
        """Return (unit domain embeddings (N, k), unit base embedding (k,) or None).

        With ``augment`` the per-domain embedding is the renormalized mean of its
        normalized embeddings over all templates; the base prompt is combined the
        same way.
        """
        js = range(len(self.templates)) if augment else range(1)
        doms, bases = [], []
        for j in js:
            seqs = [s.tokens for s in self.sequences(j)]
            base = self.base_sequence(j)
            if base is not None:
                seqs.append(base.tokens)
            emb = normalize(encode_text_batch(backend, seqs))
            doms.append(emb[: self.N])
            if base is not None:
                bases.append(emb[self.N])
        dom = doms[0] if len(doms) == 1 else normalize(torch.stack(doms).mean(0))
        if len(bases) != len(doms):
            return dom, None
        base = bases[0] if len(bases) == 1 else normalize(torch.stack(bases).mean(0))
        return dom, base


def build_prompts(template_words, domain_strings, backend, config: LabelingConfig | None = None) -> PromptSet:
    """Build a :class:`PromptSet`; ``template_words`` may be a string or list of words."""
    if not domain_strings:
        raise ConfigError("candidate domain list is empty")
    if len(set(domain_strings)) != len(domain_strings):
        raise ConfigError("duplicate candidate domains")
    if isinstance(template_words, (list, tuple)):
        template_words = " ".join(template_words)
    texts = [template_words]
    if config is not None and config.augment:
        texts = config.templates()
    tpl_tokens = [backend.template_tokens(t) for t in texts]
    dom_tokens = [backend.domain_tokens(d) for d in domain_strings]
    dtype = dom_tokens[0].dtype
    tpl_tokens = [t.to(dtype) for t in tpl_tokens]
    return PromptSet(texts, tpl_tokens, list(domain_strings), dom_tokens)


def similarity_batch(images: torch.Tensor, prompts: PromptSet, backend, augment: bool = False):
    """(B, 3, H, W) images in [0, 1] -> (f (B, N), base_sim (B,) or None); differentiable."""
    dom, base = prompts.text_embeddings(backend, augment)
    v = normalize(backend.encode_images(images).to(dom.dtype))
    f = v @ dom.T
    return f, (None if base is None else v @ base)


def compute_similarities(image, prompts: PromptSet, backend, config: LabelingConfig | None = None) -> SimilarityVector:
    augment = bool(config and config.augment)
    with torch.no_grad():
        x = image_to_tensor(image)
        f, base = similarity_batch(x, prompts, backend, augment)
    return SimilarityVector(f[0].double().numpy(), None if base is None else float(base[0]))


def adaptive_threshold_label(sim: SimilarityVector) -> DomainLabel:
    """d_n = 1 iff f_n > base_sim; falls back to a one-hot argmax when nothing passes."""
    if sim.base_sim is None:
        raise ConfigError("adaptive thresholding needs a non-empty template (base prompt)")
    f = np.asarray(sim.f, dtype=np.float64)
    d = (f > sim.base_sim).astype(np.int64)
    if d.sum() == 0:
        d[int(np.argmax(f))] = 1
    return DomainLabel(d)


def topk_label(sim: SimilarityVector, K: int) -> DomainLabel:
    f = np.asarray(sim.f, dtype=np.float64)
    if not 1 <= K <= len(f):
        raise ConfigError(f"K must be in [1, {len(f)}], got {K}")
    order = np.argsort(-f, kind="stable")
    d = np.zeros(len(f), dtype=np.int64)
    d[order[:K]] = 1
    return DomainLabel(d)


def label(sim: SimilarityVector, config: LabelingConfig) -> DomainLabel:
    if config.mode == "topk":
        return topk_label(sim, config.K)
    return adaptive_threshold_label(sim)


def label_batch(f: torch.Tensor, base: torch.Tensor | None, config: LabelingConfig) -> torch.Tensor:
    """Batched labels as a detached float tensor (B, N); same rules as the scalar versions."""
    fa = f.detach().double().cpu().numpy()
    ba = None if base is None else base.detach().double().cpu().numpy()
    rows = []
    for i in range(fa.shape[0]):
        sim = SimilarityVector(fa[i], None if ba is None else float(ba[i]))
        rows.append(label(sim, config).d)
    return torch.as_tensor(np.stack(rows), dtype=f.dtype)


def rank_dictionary(sims: np.ndarray, scope: str = "assigned") -> np.ndarray:
    """Order dictionary entries by mean similarity, descending.

    ``sims`` is (images, entries).  With ``scope="assigned"`` an entry's mean
    runs only over the images whose argmax entry it is; entries assigned no
    image are ranked after all assigned ones (by their all-image mean).
    ``scope="all"`` averages every entry over every image.
    """
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 2 or sims.shape[0] == 0:
        raise InputError("similarity matrix must be (images, entries) with at least one image")
    all_mean = sims.mean(0)
    if scope == "all":
        return np.argsort(-all_mean, kind="stable")
    if scope != "assigned":
        raise ConfigError(f"scope must be 'assigned' or 'all', got {scope!r}")
    owner = np.argmax(sims, axis=1)
    keys = []
    for e in range(sims.shape[1]):
        mask = owner == e
        if mask.any():
            keys.append((0, -sims[mask, e].mean(), e))
        else:
            keys.append((1, -all_mean[e], e))
    return np.array([e for _, _, e in sorted(keys)], dtype=np.int64)


def select_domains_from_dictionary(images, dictionary, n_select, backend, template="a photo of", scope="assigned"):
    if not images:
        raise InputError("no images given")
    if not 1 <= n_select <= len(dictionary):
        raise ConfigError(f"n_select must be in [1, {len(dictionary)}], got {n_select}")
    prompts = build_prompts(template, list(dictionary), backend)
    sims = np.stack([compute_similarities(img, prompts, backend).f for img in images])
    order = rank_dictionary(sims, scope)
    return [dictionary[i] for i in order[:n_select]]
