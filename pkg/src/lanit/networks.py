"""Translation networks: content encoder, style encoder, mapping network,
generator with adaptive instance normalization, and multi-head discriminator.

Layer layout follows the StarGAN v2 family: pre-activation residual blocks,
average-pool downsampling, nearest upsampling, outputs scaled by 1/sqrt(2).
Channel counts double from ``base_channels`` per downsampling step, capped at
``max_channels``; at 256x256 with the defaults this gives 64-128-256-512-512.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from lanit.config import ArchConfig
from lanit.errors import InputError, ShapeError

TRUNK_NORM_BLOCKS = 4  # leading trunk blocks with instance norm


def channel_schedule(cfg: ArchConfig, steps: int) -> list[int]:
    return [min(cfg.base_channels * 2**i, cfg.max_channels) for i in range(steps + 1)]


class ResBlk(nn.Module):
    def __init__(self, dim_in, dim_out, normalize=False, downsample=False):
        super().__init__()
        self.normalize = normalize
        self.downsample = downsample
        self.learned_sc = dim_in != dim_out
        self.conv1 = nn.Conv2d(dim_in, dim_in, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        if normalize:
            self.norm1 = nn.InstanceNorm2d(dim_in, affine=True)
            self.norm2 = nn.InstanceNorm2d(dim_in, affine=True)
        if self.learned_sc:
            self.conv1x1 = nn.Conv2d(dim_in, dim_out, 1, 1, 0, bias=False)

    def _shortcut(self, x):
        if self.learned_sc:
            x = self.conv1x1(x)
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        return x

    def _residual(self, x):
        if self.normalize:
            x = self.norm1(x)
        x = self.conv1(F.leaky_relu(x, 0.2))
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        if self.normalize:
            x = self.norm2(x)
        return self.conv2(F.leaky_relu(x, 0.2))

    def forward(self, x):
        return (self._shortcut(x) + self._residual(x)) / math.sqrt(2)


class AdaIN(nn.Module):
    def __init__(self, style_dim, num_features):
        super().__init__()
        self.norm = nn.InstanceNorm2d(num_features, affine=False)
        self.fc = nn.Linear(style_dim, num_features * 2)

    def forward(self, x, s):
        h = self.fc(s)[:, :, None, None]
        gamma, beta = h.chunk(2, dim=1)
        return (1 + gamma) * self.norm(x) + beta


class AdainResBlk(nn.Module):
    def __init__(self, dim_in, dim_out, style_dim, upsample=False):
        super().__init__()
        self.upsample = upsample
        self.learned_sc = dim_in != dim_out
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, 1, 1)
        self.norm1 = AdaIN(style_dim, dim_in)
        self.norm2 = AdaIN(style_dim, dim_out)
        if self.learned_sc:
            self.conv1x1 = nn.Conv2d(dim_in, dim_out, 1, 1, 0, bias=False)

    def _shortcut(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.learned_sc:
            x = self.conv1x1(x)
        return x

    def _residual(self, x, s):
        x = F.leaky_relu(self.norm1(x, s), 0.2)
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv1(x)
        x = F.leaky_relu(self.norm2(x, s), 0.2)
        return self.conv2(x)

    def forward(self, x, s):
        return (self._shortcut(x) + self._residual(x, s)) / math.sqrt(2)


def _check_images(x, cfg: ArchConfig):
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ShapeError(f"expected (B, 3, {cfg.image_size}, {cfg.image_size}) images, got {tuple(x.shape)}")


class ContentEncoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.content_downsamples
        ch = channel_schedule(cfg, n)
        self.from_rgb = nn.Conv2d(3, ch[0], 1, 1, 0)
        self.blocks = nn.ModuleList(ResBlk(ch[i], ch[i + 1], normalize=True, downsample=True) for i in range(n))
        self.out_channels = ch[-1]

    def forward(self, x):
        _check_images(x, self.cfg)
        h = self.from_rgb(x)
        for blk in self.blocks:
            h = blk(h)
        return h


class Generator(nn.Module):
    """Decodes a content code under an (aggregated) style vector."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.content_downsamples
        ch = channel_schedule(cfg, n)
        top = ch[-1]
        self.bottleneck = nn.ModuleList(ResBlk(top, top, normalize=True) for _ in range(2))
        self.ada_bottleneck = nn.ModuleList(AdainResBlk(top, top, cfg.style_dim) for _ in range(2))
        self.up = nn.ModuleList(
            AdainResBlk(ch[i + 1], ch[i], cfg.style_dim, upsample=True) for i in reversed(range(n))
        )
        self.to_rgb = nn.Conv2d(ch[0], 3, 1, 1, 0)
        self.content_shape = (top, cfg.image_size >> n, cfg.image_size >> n)

    def forward(self, c, a):
        if tuple(c.shape[1:]) != self.content_shape:
            raise ShapeError(f"content code must be (B, {self.content_shape}), got {tuple(c.shape)}")
        if a.ndim != 2 or a.shape[1] != self.cfg.style_dim or a.shape[0] != c.shape[0]:
            raise ShapeError(f"style must be (B={c.shape[0]}, {self.cfg.style_dim}), got {tuple(a.shape)}")
        h = c
        for blk in self.bottleneck:
            h = blk(h)
        for blk in self.ada_bottleneck:
            h = blk(h, a)
        for blk in self.up:
            h = blk(h, a)
        return torch.tanh(self.to_rgb(F.leaky_relu(h, 0.2)))


class _Trunk(nn.Module):
    """Shared trunk of the style encoder and discriminator, ending in a flat vector."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        steps = int(math.log2(cfg.image_size)) - 2  # down to 4x4
        ch = channel_schedule(cfg, steps)
        self.from_rgb = nn.Conv2d(3, ch[0], 1, 1, 0)
        self.blocks = nn.ModuleList(
            ResBlk(ch[i], ch[i + 1], normalize=i < TRUNK_NORM_BLOCKS, downsample=True) for i in range(steps)
        )
        self.conv = nn.Conv2d(ch[-1], ch[-1], 4, 1, 0)
        self.out_dim = ch[-1]

    def forward(self, x):
        _check_images(x, self.cfg)
        h = self.from_rgb(x)
        for blk in self.blocks:
            h = blk(h)
        h = F.leaky_relu(self.conv(F.leaky_relu(h, 0.2)), 0.2)
        return h.flatten(1)


class StyleEncoder(nn.Module):
    def __init__(self, cfg: ArchConfig, num_domains: int):
        super().__init__()
        self.trunk = _Trunk(cfg)
        self.heads = nn.ModuleList(nn.Linear(self.trunk.out_dim, cfg.style_dim) for _ in range(num_domains))

    def forward(self, x):
        """(B, 3, H, W) -> style bank (B, N, style_dim)."""
        h = self.trunk(x)
        return torch.stack([head(h) for head in self.heads], dim=1)


class MappingNetwork(nn.Module):
    def __init__(self, cfg: ArchConfig, num_domains: int):
        super().__init__()
        self.latent_dim = cfg.latent_dim
        hid = cfg.mapping_hidden
        layers = []
        for i in range(4):
            layers += [nn.Linear(cfg.latent_dim if i == 0 else hid, hid), nn.ReLU()]
        self.shared = nn.Sequential(*layers)
        self.unshared = nn.ModuleList(
            nn.Sequential(
                nn.Linear(hid, hid), nn.ReLU(),
                nn.Linear(hid, hid), nn.ReLU(),
                nn.Linear(hid, hid), nn.ReLU(),
                nn.Linear(hid, cfg.style_dim),
            )
            for _ in range(num_domains)
        )

    def forward(self, z):
        """(B, latent_dim) -> style bank (B, N, style_dim)."""
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"latent must be (B, {self.latent_dim}), got {tuple(z.shape)}")
        h = self.shared(z)
        return torch.stack([head(h) for head in self.unshared], dim=1)


class Discriminator(nn.Module):
    def __init__(self, cfg: ArchConfig, num_domains: int):
        super().__init__()
        self.trunk = _Trunk(cfg)
        self.heads = nn.ModuleList(nn.Linear(self.trunk.out_dim, 1) for _ in range(num_domains))

    def forward(self, x):
        """(B, 3, H, W) -> raw per-domain logits (B, N)."""
        h = self.trunk(x)
        return torch.cat([head(h) for head in self.heads], dim=1)


def aggregate_styles(bank: torch.Tensor, d: torch.Tensor, allow_empty: bool = False) -> torch.Tensor:
    """Mean of the style rows selected by a multi-hot label.

    ``bank`` is (N, s) or (B, N, s); ``d`` is (N,) or (B, N).  A label with no
    active domain is a contract violation unless ``allow_empty`` is set, in
    which case the aggregate is the zero vector.
    """
    d = torch.as_tensor(d, dtype=bank.dtype, device=bank.device)
    if bank.shape[:-1] != d.shape:
        raise ShapeError(f"label shape {tuple(d.shape)} does not match style bank {tuple(bank.shape)}")
    m = d.sum(-1, keepdim=True)
    if not allow_empty and bool((m == 0).any()):
        raise InputError("domain label has no active domain (M = 0)")
    total = (bank * d[..., None]).sum(-2)
    return total / m.clamp_min(1)


def init_weights(module: nn.Module, generator: torch.Generator | None = None):
    """Fan-in scaled uniform weights for conv/linear layers, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


class TranslationModel(nn.Module):
    def __init__(self, cfg: ArchConfig, num_domains: int, seed: int = 0):
        super().__init__()
        if num_domains < 1:
            raise InputError("num_domains must be >= 1")
        cfg.validate()
        self.cfg = cfg
        self.num_domains = num_domains
        self.content_encoder = ContentEncoder(cfg)
        self.generator = Generator(cfg)
        self.style_encoder = StyleEncoder(cfg, num_domains)
        self.mapping_network = MappingNetwork(cfg, num_domains)
        self.discriminator = Discriminator(cfg, num_domains)
        gen = torch.Generator().manual_seed(seed)
        init_weights(self, gen)

    def generator_modules(self):
        return [self.content_encoder, self.generator, self.style_encoder, self.mapping_network]

    def generator_parameters(self):
        for m in self.generator_modules():
            yield from m.parameters()

    def encode_content(self, x):
        return self.content_encoder(x)

    def encode_style(self, y):
        return self.style_encoder(y)

    def map_latent(self, z):
        return self.mapping_network(z)

    def generate(self, c, a):
        return self.generator(c, a)

    def discriminate(self, img):
        return self.discriminator(img)

    def translate(self, x, a):
        return self.generator(self.content_encoder(x), a)
