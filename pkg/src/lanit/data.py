"""Image folders, ground-truth files, batching and the synthetic toy dataset."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image, ImageDraw

from lanit.config import from_dict
from lanit.errors import ConfigError, InputError
from lanit.embedding.mock import COLORS, SHAPES

log = logging.getLogger(__name__)

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def read_image(path, size: int | None = None) -> np.ndarray:
    """Decode to HxWx3 float32 in [0, 1], optionally resized to size x size."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BICUBIC)
        return np.asarray(im, dtype=np.float32) / 255.0


def write_image(path, image: np.ndarray):
    """Write an HxWx3 array in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def to_model_range(image01: np.ndarray) -> np.ndarray:
    return image01 * 2.0 - 1.0


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


@dataclass
class DatasetManifest:
    root: Path
    files: list[str]
    image_size: int
    gt: dict | None = None
    domains: list[str] = field(default_factory=list)
    skipped: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.files)

    def path(self, i: int) -> Path:
        return self.root / self.files[i]

    def image01(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = read_image(self.path(i), self.image_size)
        return self._cache[i]

    def image(self, i: int) -> np.ndarray:
        """Model-range image (3, H, W) in [-1, 1]."""
        return to_model_range(self.image01(i)).transpose(2, 0, 1)

    def batch(self, indices) -> np.ndarray:
        return np.stack([self.image(i) for i in indices]).astype(np.float32)


def load_gt(path) -> dict:
    """gt.jsonl rows ``{file, class}`` or ``{file, attrs}`` -> {file: row}."""
    out = {}
    for row in read_jsonl(path):
        if "file" not in row or ("class" not in row and "attrs" not in row):
            raise InputError(f"{path}: every row needs 'file' and 'class' or 'attrs'")
        out[row["file"]] = row
    return out


def load_dataset(root, image_size: int = 256, gt_path=None, domains=()) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"dataset directory not found: {root}")
    candidates = sorted(p.name for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTS)
    files, skipped = [], 0
    for name in candidates:
        try:
            with Image.open(root / name) as im:
                im.convert("RGB").load()
        except Exception:
            skipped += 1
            log.warning("skipping undecodable image %s", name)
            continue
        files.append(name)
    if not files:
        raise InputError(f"no decodable images in {root}")
    gt = None
    if gt_path is None and (root / "gt.jsonl").exists():
        gt_path = root / "gt.jsonl"
    if gt_path is not None:
        gt = load_gt(gt_path)
    return DatasetManifest(root, files, image_size, gt, list(domains), skipped)


def epoch_permutation(n: int, seed: int, epoch: int, shuffle: bool = True, stream: int = 0) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, stream, epoch]).permutation(n)


def batch_indices(n: int, batch_size: int, seed: int, step: int, shuffle: bool = True, stream: int = 0) -> np.ndarray:
    """Indices of training batch ``step``; partial final batches are dropped.

    Stateless in ``step`` so a resumed run sees the same batches.  Distinct
    ``stream`` values give independent orders over the same files.
    """
    per_epoch = n // batch_size
    if per_epoch == 0:
        raise InputError(f"dataset of {n} images is smaller than batch size {batch_size}")
    epoch, pos = divmod(step, per_epoch)
    perm = epoch_permutation(n, seed, epoch, shuffle, stream)
    return perm[pos * batch_size : (pos + 1) * batch_size]


def batch_iterator(manifest: DatasetManifest, batch_size: int, seed: int = 0, shuffle: bool = True, epochs: int | None = 1):
    """Yield (indices, batch) tuples in a deterministic order."""
    n = len(manifest)
    per_epoch = n // batch_size
    step = 0
    while epochs is None or step < per_epoch * epochs:
        idx = batch_indices(n, batch_size, seed, step, shuffle)
        yield idx, manifest.batch(idx)
        step += 1


@dataclass
class ToyDatasetSpec:
    n_images: int = 400
    image_size: int = 64
    colors: list = field(default_factory=lambda: ["red", "blue"])
    shapes: list = field(default_factory=lambda: ["circle", "square"])
    colors_per_image: list = field(default_factory=lambda: [1, 1])
    background: list = field(default_factory=lambda: [235, 235, 235])
    seed: int = 0

    def validate(self):
        if self.n_images < 1 or self.image_size < 16:
            raise ConfigError("toy spec needs n_images >= 1 and image_size >= 16")
        for c in self.colors:
            if c not in COLORS:
                raise ConfigError(f"unknown toy colour {c!r}; choose from {sorted(COLORS)}")
        for s in self.shapes:
            if s not in SHAPES:
                raise ConfigError(f"unknown toy shape {s!r}; choose from {sorted(SHAPES)}")
        if not self.colors or not self.shapes:
            raise ConfigError("toy spec needs at least one colour and one shape")
        lo, hi = self.colors_per_image
        if not 1 <= lo <= hi:
            raise ConfigError("colors_per_image must be [min, max] with 1 <= min <= max")
        if hi > len(self.colors):
            raise ConfigError(f"colors_per_image max {hi} exceeds the {len(self.colors)} available colours")
        return self

    @property
    def attributes(self) -> list[str]:
        return list(self.colors) + list(self.shapes)


def load_toy_spec(path) -> ToyDatasetSpec:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return from_dict(ToyDatasetSpec, data, "toy").validate()


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, box, fill):
    x0, y0, x1, y1 = box
    if shape == "circle":
        draw.ellipse(box, fill=fill)
    elif shape == "square":
        draw.rectangle(box, fill=fill)
    elif shape == "triangle":
        draw.polygon([(x0, y1), (x1, y1), ((x0 + x1) / 2, y0)], fill=fill)


def render_toy_image(size, shape, colors, rng: np.random.Generator, background=(235, 235, 235)) -> Image.Image:
    img = Image.new("RGB", (size, size), tuple(background))
    side = int(rng.integers(size * 3 // 8, size * 5 // 8 + 1))
    x0 = int(rng.integers(size // 10, size - side - size // 10 + 1))
    y0 = int(rng.integers(size // 10, size - side - size // 10 + 1))
    box = (x0, y0, x0 + side - 1, y0 + side - 1)
    mask = Image.new("L", (size, size), 0)
    _draw_shape(ImageDraw.Draw(mask), shape, box, 255)
    # Multiple colours fill horizontal bands of the shape.
    bands = len(colors)
    for i, c in enumerate(colors):
        rgb = tuple(int(round(255 * v)) for v in COLORS[c])
        layer = Image.new("RGB", (size, size), rgb)
        band = Image.new("L", (size, size), 0)
        top = y0 + side * i // bands
        bottom = y0 + side * (i + 1) // bands - 1
        ImageDraw.Draw(band).rectangle((0, top, size - 1, bottom), fill=255)
        m = Image.fromarray(np.minimum(np.asarray(mask), np.asarray(band)))
        img.paste(layer, (0, 0), m)
    return img


def make_toy_dataset(spec: ToyDatasetSpec, out_dir) -> Path:
    """Write ``n_images`` PNGs plus ``gt.jsonl`` ({file, attrs}) and ``domains.json``."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    attrs = spec.attributes
    rows = []
    width = len(str(spec.n_images - 1))
    lo, hi = spec.colors_per_image
    for i in range(spec.n_images):
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        n_col = int(rng.integers(lo, hi + 1))
        cidx = sorted(rng.choice(len(spec.colors), size=n_col, replace=False).tolist())
        colors = [spec.colors[j] for j in cidx]
        img = render_toy_image(spec.image_size, shape, colors, rng, spec.background)
        name = f"toy_{i:0{width}d}.png"
        img.save(out / name, format="PNG")
        active = set(colors) | {shape}
        rows.append({"file": name, "attrs": [int(a in active) for a in attrs]})
    write_jsonl(out / "gt.jsonl", rows)
    (out / "domains.json").write_text(json.dumps(attrs))
    return out
