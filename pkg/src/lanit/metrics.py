"""Evaluation metrics: class-wise FID, Density & Coverage, accuracy and multi-hot F1."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.spatial.distance import cdist

from lanit.errors import ConfigError, InputError, ShapeError

FID_EPS = 1e-6
DC_K = 5


@dataclass
class FeatureSet:
    features: np.ndarray
    extractor: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be (samples, dim), got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise InputError("features contain non-finite entries")

    def __len__(self):
        return self.features.shape[0]


def _feats(x) -> np.ndarray:
    return x.features if isinstance(x, FeatureSet) else FeatureSet(x).features


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def gaussian_stats(x) -> tuple[np.ndarray, np.ndarray]:
    x = _feats(x)
    if x.shape[0] < 2:
        raise InputError("FID needs at least 2 samples per set")
    return x.mean(0), np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])


def frechet_distance(mu1, s1, mu2, s2, eps: float = FID_EPS) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) using symmetric square roots.

    Tr((S1 S2)^(1/2)) = Tr((S1^(1/2) S2 S1^(1/2))^(1/2)), and the inner matrix
    is symmetric PSD, so both roots come from eigen-decompositions.
    """
    eye = np.eye(s1.shape[0])
    s1 = s1 + eps * eye
    s2 = s2 + eps * eye
    r1 = _sqrtm_psd(s1)
    cross = _sqrtm_psd(r1 @ s2 @ r1)
    diff = mu1 - mu2
    val = diff @ diff + np.trace(s1) + np.trace(s2) - 2 * np.trace(cross)
    return float(max(val, 0.0))


def fid(a, b) -> float:
    fa, fb = _feats(a), _feats(b)
    if fa.shape[1] != fb.shape[1]:
        raise ShapeError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    return frechet_distance(*gaussian_stats(fa), *gaussian_stats(fb))


def mfid(per_class_fake, per_class_real) -> tuple[float, list[float]]:
    """Mean of per-class FIDs; returns (mean, per-class list)."""
    if len(per_class_fake) != len(per_class_real):
        raise InputError("need one fake and one real feature set per class")
    if not per_class_fake:
        raise InputError("no classes to evaluate")
    vals = [fid(f, r) for f, r in zip(per_class_fake, per_class_real)]
    return float(np.mean(vals)), vals


def density_coverage(real, fake, k: int = DC_K) -> tuple[float, float]:
    """Density and coverage with k-NN balls around real samples (strict ball membership)."""
    r, f = _feats(real), _feats(fake)
    if r.shape[1] != f.shape[1]:
        raise ShapeError(f"feature dims differ: {r.shape[1]} vs {f.shape[1]}")
    if k < 1 or k >= r.shape[0]:
        raise ConfigError(f"k={k} must satisfy 1 <= k < number of real samples ({r.shape[0]})")
    if f.shape[0] == 0:
        raise InputError("fake set is empty")
    d_rr = cdist(r, r)
    radii = np.sort(d_rr, axis=1)[:, k]  # column 0 is the point itself
    inside = cdist(r, f) < radii[:, None]  # (real, fake)
    density = inside.sum() / (k * f.shape[0])
    coverage = inside.any(1).mean()
    return float(density), float(coverage)


def _as_matrix(x, name):
    arr = np.asarray([getattr(v, "d", v) for v in x])
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a list of equal-length vectors")
    return arr


def accuracy(pred, gt, any_match: bool = False) -> float:
    """Fraction of samples whose argmax prediction hits the ground truth.

    ``pred`` holds per-sample scores (similarities or labels); ``gt`` holds
    class indices or one-hot rows.  With ``any_match`` a hit is any active gt
    attribute (multi-hot gt).
    """
    p = _as_matrix(pred, "pred")
    top = p.argmax(1)
    g = np.asarray([getattr(v, "d", v) for v in gt])
    if len(g) != len(p):
        raise InputError(f"{len(p)} predictions vs {len(g)} ground-truth rows")
    if len(p) == 0:
        raise InputError("no samples")
    if g.ndim == 1:
        return float(np.mean(top == g))
    if any_match:
        return float(np.mean(g[np.arange(len(g)), top] > 0))
    if not np.all(g.sum(1) == 1):
        raise InputError("ground truth rows must be one-hot unless any_match is set")
    return float(np.mean(top == g.argmax(1)))


def f1_multihot(pred, gt) -> float:
    """Macro F1 over domains from per-domain TP/FP/FN; 0/0 counts as 0."""
    p = _as_matrix(pred, "pred").astype(bool)
    g = _as_matrix(gt, "gt").astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} differ")
    tp = (p & g).sum(0)
    fp = (p & ~g).sum(0)
    fn = (~p & g).sum(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        rec = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / np.where(prec + rec > 0, prec + rec, 1), 0.0)
    return float(f1.mean())


@dataclass
class MetricReport:
    fid_per_class: list = field(default_factory=list)
    mfid: float | None = None
    density: float | None = None
    coverage: float | None = None
    acc: float | None = None
    f1: float | None = None
    classes: list = field(default_factory=list)
    extractor: str = ""

    def to_dict(self):
        return asdict(self)


# -- feature extractors ---------------------------------------------------------


class EmbedderFeatures:
    """Image embeddings of a VLM backend (the mock backend for offline runs)."""

    def __init__(self, backend, batch_size: int = 32):
        self.backend = backend
        self.batch_size = batch_size
        self.identity = "embedder:" + backend.identity

    def __call__(self, images01: list[np.ndarray]) -> FeatureSet:
        out = []
        for i in range(0, len(images01), self.batch_size):
            chunk = np.stack(images01[i : i + self.batch_size]).transpose(0, 3, 1, 2)
            with torch.no_grad():
                out.append(self.backend.encode_images(torch.from_numpy(chunk).float()).double().numpy())
        return FeatureSet(np.concatenate(out), self.identity)


class InceptionFeatures:
    """2048-d pool features of torchvision's Inception-v3 loaded from a local weights file."""

    def __init__(self, weights: str, batch_size: int = 16):
        try:
            from torchvision.models import inception_v3
        except ImportError:
            raise ConfigError("the inception extractor needs torchvision (pip install artifact[inception])") from None
        model = inception_v3(weights=None, aux_logits=True, init_weights=False)
        try:
            state = torch.load(weights, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError) as e:
            raise ConfigError(f"cannot load inception weights {weights}: {e}") from None
        model.load_state_dict(state)
        model.fc = torch.nn.Identity()
        self.model = model.eval()
        self.batch_size = batch_size
        h = hashlib.sha256()
        for v in state.values():
            h.update(v.numpy().tobytes())
        self.identity = "inception:" + h.hexdigest()[:16]

    def __call__(self, images01: list[np.ndarray]) -> FeatureSet:
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        out = []
        for i in range(0, len(images01), self.batch_size):
            x = torch.from_numpy(np.stack(images01[i : i + self.batch_size]).transpose(0, 3, 1, 2)).float()
            x = torch.nn.functional.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
            with torch.no_grad():
                out.append(self.model((x - mean) / std).double().numpy())
        return FeatureSet(np.concatenate(out), self.identity)
