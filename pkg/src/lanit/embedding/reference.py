"""Wrapper around a pretrained CLIP model (transformers implementation).

The text path is driven from token *embeddings* rather than token ids so the
learnable template tokens receive gradients.  Weights are loaded from a local
directory; nothing is downloaded implicitly.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch
import torch.nn.functional as F

from lanit.errors import ConfigError, InputError, ShapeError

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def _weights_digest(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f.name.encode())
        h.update(str(f.stat().st_size).encode())
    return h.hexdigest()[:16]


class ClipBackend:
    deterministic = True

    def __init__(self, weights=None, model=None, tokenizer=None, device="cpu"):
        if model is None:
            if weights is None:
                raise ConfigError("reference embedder needs `embedder.weights` (a local model directory)")
            path = Path(weights)
            if not path.exists():
                raise ConfigError(f"embedder weights not found: {path}")
            from transformers import CLIPModel, CLIPTokenizer

            model = CLIPModel.from_pretrained(str(path), attn_implementation="eager")
            tokenizer = CLIPTokenizer.from_pretrained(str(path))
            self._digest = _weights_digest(path)
        else:
            cfg = model.config.to_dict() if hasattr(model.config, "to_dict") else {}
            self._digest = hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]
        if tokenizer is None:
            raise ConfigError("reference embedder needs a tokenizer")
        self.model = model.to(device).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        self.device = device
        text_cfg = model.config.text_config
        self.k = int(model.config.projection_dim)
        self.token_width = int(text_cfg.hidden_size)
        self.max_len = int(text_cfg.max_position_embeddings)
        self.image_size = int(model.config.vision_config.image_size)
        self.bos_id = int(tokenizer.bos_token_id)
        self.eos_id = int(tokenizer.eos_token_id)
        self.calls = 0

    @property
    def identity(self) -> str:
        return f"clip:{self._digest}"

    def _ids(self, text: str) -> list[int]:
        ids = self.tokenizer(text, add_special_tokens=False)["input_ids"]
        return [i for i in ids if i not in (self.bos_id, self.eos_id)]

    def _lookup(self, ids) -> torch.Tensor:
        emb = self.model.text_model.embeddings.token_embedding
        with torch.no_grad():
            return emb(torch.tensor(ids, dtype=torch.long, device=self.device)).clone()

    def template_tokens(self, text: str) -> torch.Tensor:
        ids = self._ids(text)
        if not ids:
            return torch.zeros(0, self.token_width)
        return self._lookup(ids)

    def domain_tokens(self, text: str) -> torch.Tensor:
        ids = self._ids(text)
        if not ids:
            raise InputError(f"domain string {text!r} has no tokens")
        return self._lookup(ids)

    def encode_texts(self, sequences) -> torch.Tensor:
        if not sequences:
            raise InputError("no token sequences")
        tm = self.model.text_model
        bos = self._lookup([self.bos_id])
        eos = self._lookup([self.eos_id])
        rows, eot = [], []
        for seq in sequences:
            if seq.ndim != 2 or seq.shape[0] == 0:
                raise InputError("empty token sequence")
            if seq.shape[1] != self.token_width:
                raise ShapeError(f"token width must be {self.token_width}")
            n = seq.shape[0] + 2
            if n > self.max_len:
                raise InputError(f"prompt too long ({n} > {self.max_len} tokens)")
            pad = eos.expand(self.max_len - n, -1)
            dtype = seq.dtype
            rows.append(torch.cat([bos.to(dtype), seq, eos.to(dtype), pad.to(dtype)]))
            eot.append(n - 1)
        x = torch.stack(rows)
        model_dtype = tm.final_layer_norm.weight.dtype
        h = tm.embeddings(inputs_embeds=x.to(model_dtype))
        s = h.shape[1]
        mask = torch.full((s, s), torch.finfo(h.dtype).min, dtype=h.dtype, device=h.device).triu(1)
        mask = mask[None, None].expand(h.shape[0], 1, s, s)
        for layer in tm.encoder.layers:
            out = layer(h, mask)
            h = out[0] if isinstance(out, tuple) else out
        h = tm.final_layer_norm(h)
        pooled = h[torch.arange(h.shape[0], device=h.device), torch.tensor(eot, device=h.device)]
        self.calls += 1
        return self.model.text_projection(pooled)

    def encode_text(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.encode_texts([tokens])[0]

    def preprocess(self, images: torch.Tensor) -> torch.Tensor:
        """Resize the short side, center-crop and normalize with CLIP statistics (differentiable)."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected a (B, 3, H, W) batch, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        size = self.image_size
        scale = size / min(h, w)
        nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
        x = F.interpolate(images, size=(nh, nw), mode="bicubic", align_corners=False, antialias=True)
        top, left = (nh - size) // 2, (nw - size) // 2
        x = x[:, :, top : top + size, left : left + size]
        mean = torch.tensor(CLIP_MEAN, dtype=x.dtype, device=x.device)[None, :, None, None]
        std = torch.tensor(CLIP_STD, dtype=x.dtype, device=x.device)[None, :, None, None]
        return (x - mean) / std

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        x = self.preprocess(images.to(self.device))
        model_dtype = self.model.visual_projection.weight.dtype
        out = self.model.vision_model(pixel_values=x.to(model_dtype))
        pooled = out.pooler_output if hasattr(out, "pooler_output") else out[1]
        self.calls += 1
        return self.model.visual_projection(pooled)
