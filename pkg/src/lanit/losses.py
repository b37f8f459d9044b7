"""Training objectives.

Inputs may be single examples (vectors) or batches (leading batch axis); every
loss returns a scalar tensor (batch mean where applicable).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from lanit.config import LossWeights
from lanit.errors import ConfigError, InputError, ShapeError


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def adversarial_loss_reference(real_logits, fake_logits, d):
    """Label-weighted log-likelihood sum_n d_n [log s(D_n(y)) + log(1 - s(D_n(y_hat)))].

    This is the objective the discriminator maximizes (value <= 0).
    """
    real_logits = _as_tensor(real_logits)
    fake_logits = _as_tensor(fake_logits, real_logits)
    d = _as_tensor(d, real_logits).to(real_logits.dtype)
    if real_logits.shape != fake_logits.shape or real_logits.shape != d.shape:
        raise ShapeError("logits and label must have the same shape")
    per = d * (F.logsigmoid(real_logits) + F.logsigmoid(-fake_logits))
    per = per.sum(-1)
    return per.mean() if per.ndim else per


def adversarial_loss(real_logits, fake_logits, d, role: str = "discriminator"):
    """Non-saturating label-weighted adversarial loss to *minimize*.

    discriminator: sum_n d_n [softplus(-D_n(y)) + softplus(D_n(y_hat))]
    generator:     sum_n d_n softplus(-D_n(y_hat))   (``real_logits`` ignored)
    """
    fake_logits = _as_tensor(fake_logits)
    d = _as_tensor(d, fake_logits).to(fake_logits.dtype)
    if fake_logits.shape != d.shape:
        raise ShapeError("logits and label must have the same shape")
    if role == "generator":
        per = (d * F.softplus(-fake_logits)).sum(-1)
    elif role == "discriminator":
        real_logits = _as_tensor(real_logits, fake_logits)
        if real_logits.shape != d.shape:
            raise ShapeError("logits and label must have the same shape")
        per = (d * (F.softplus(-real_logits) + F.softplus(fake_logits))).sum(-1)
    else:
        raise ConfigError(f"role must be 'discriminator' or 'generator', got {role!r}")
    return per.mean() if per.ndim else per


def r1_penalty(real_logits, real_images, d):
    """0.5 * E ||grad_y sum_n d_n D_n(y)||^2 on real images."""
    out = (real_logits * d).sum()
    (grad,) = torch.autograd.grad(out, real_images, create_graph=True)
    return 0.5 * grad.pow(2).flatten(1).sum(1).mean()


def invert_label(d, n: int):
    """Copy of ``d`` with bit ``n`` flipped (batched: ``n`` may be a per-row index tensor)."""
    d = _as_tensor(d)
    N = d.shape[-1]
    if d.ndim == 1:
        if not 0 <= int(n) < N:
            raise InputError(f"domain index {n} out of range [0, {N})")
        out = d.clone()
        out[int(n)] = 1 - out[int(n)]
        return out
    n = torch.as_tensor(n, dtype=torch.long)
    if bool(((n < 0) | (n >= N)).any()):
        raise InputError(f"domain index out of range [0, {N})")
    out = d.clone()
    rows = torch.arange(d.shape[0])
    out[rows, n] = 1 - out[rows, n]
    return out


def domain_similarity_prob(f_n, base_sim, tau: float):
    """sigma((f_n - base_sim) / tau): 0.5 exactly at the adaptive threshold."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    f_n = _as_tensor(f_n)
    return torch.sigmoid((f_n - _as_tensor(base_sim, f_n)) / tau)


def _bce_from_logit(target, logit):
    return F.binary_cross_entropy_with_logits(logit, target, reduction="none")


def domain_regularization_loss(d, n, f_hat, base_hat, f_hat_inv, base_hat_inv, tau: float):
    """BCE(d_n, p(f_hat_n)) + BCE(1 - d_n, p(f_hat_inv_n)), targets detached.

    ``f_hat``/``f_hat_inv`` are similarities of the translated image and of the
    image translated with the inverted label; ``base_hat``/``base_hat_inv`` are
    their base-prompt similarities.  Works on single vectors or batches.
    """
    if tau <= 0:
        raise ConfigError("tau must be positive")
    d = _as_tensor(d).detach()
    f_hat = _as_tensor(f_hat, d)
    f_hat_inv = _as_tensor(f_hat_inv, d)
    dtype = f_hat.dtype
    d = d.to(dtype)
    if d.ndim == 1:
        n = int(n)
        t, fi, fj = d[n], f_hat[n], f_hat_inv[n]
        bi, bj = _as_tensor(base_hat, f_hat), _as_tensor(base_hat_inv, f_hat)
    else:
        rows = torch.arange(d.shape[0])
        n = torch.as_tensor(n, dtype=torch.long)
        t, fi, fj = d[rows, n], f_hat[rows, n], f_hat_inv[rows, n]
        bi, bj = _as_tensor(base_hat, f_hat), _as_tensor(base_hat_inv, f_hat)
    li = _bce_from_logit(t, (fi - bi) / tau)
    lj = _bce_from_logit(1 - t, (fj - bj) / tau)
    out = li + lj
    return out.mean() if out.ndim else out


def bce_prob(target, p):
    """Binary cross-entropy on a probability; reference form for tests."""
    p = _as_tensor(p)
    t = _as_tensor(target, p)
    eps = torch.finfo(p.dtype).tiny
    return -(t * torch.log(p.clamp_min(eps)) + (1 - t) * torch.log((1 - p).clamp_min(eps)))


def l1_mean(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cycle_loss(x, x_rec):
    return l1_mean(x, x_rec)


def style_recon_loss(s_target, s_pred):
    return l1_mean(s_target, s_pred)


def diversification_loss(out1, out2):
    return l1_mean(out1, out2)


def total_loss(terms, w: LossWeights):
    """adv + dl + cyc + sty - ds, each term scaled by its weight."""
    get = terms.get if isinstance(terms, dict) else lambda k: getattr(terms, k)
    return (
        w.adv * get("adv")
        + w.dl * get("dl")
        + w.cyc * get("cyc")
        + w.sty * get("sty")
        - w.ds * get("ds")
    )


@dataclass
class LossReport:
    iter: int = 0
    adv_d: float = 0.0
    adv_g: float = 0.0
    dl: float = 0.0
    cyc: float = 0.0
    sty: float = 0.0
    ds: float = 0.0
    r1: float = 0.0
    total: float = 0.0
    grad_norms: dict = field(default_factory=dict)

    @property
    def adv(self):
        return self.adv_g

    def log_record(self) -> dict:
        keys = ("iter", "adv_d", "adv_g", "dl", "cyc", "sty", "ds", "total")
        return {k: getattr(self, k) for k in keys}

    def to_dict(self) -> dict:
        return asdict(self)
