"""Dataset ingestion, synthetic glyph data and image serialisation."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (IdxCountMismatchError, IdxMagicError, IdxTruncatedError,
                     InputError)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (N, H*W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    height: int
    width: int
    class_count: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 2 or images.shape[0] == 0:
            raise InputError("dataset needs at least one image")
        if images.shape[1] != self.height * self.width:
            raise InputError(f"image width {images.shape[1]} != {self.height}x{self.width}")
        if len(labels) != images.shape[0]:
            raise InputError("one label per image required")
        if not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0:
            raise InputError("pixels must lie in [0, 1]")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise InputError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return LabeledDataset(self.images[idx], self.labels[idx], self.height,
                              self.width, self.class_count)

    def split(self, test_fraction=0.2, seed=0):
        """Deterministic shuffled train/test split."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


def _read_exact(buf, pos, n, what):
    if pos + n > len(buf):
        raise IdxTruncatedError(
            f"{what}: need {n} bytes, only {len(buf) - pos} remain", len(buf))
    return buf[pos:pos + n]


def _parse_idx(buf, magic, ndim, what):
    head = _read_exact(buf, 0, 4, what)
    (got,) = struct.unpack(">I", head)
    if got != magic:
        raise IdxMagicError(f"{what}: magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    dims = struct.unpack(f">{ndim}I", _read_exact(buf, 4, 4 * ndim, what))
    start = 4 + 4 * ndim
    size = int(np.prod(dims))
    payload = _read_exact(buf, start, size, what)
    if len(buf) != start + size:
        raise IdxCountMismatchError(
            f"{what}: {len(buf) - start - size} trailing bytes", start + size)
    return dims, np.frombuffer(payload, dtype=np.uint8)


def load_idx(images_path, labels_path, class_count=None):
    """Read an IDX image file (u8, 3 dims) and its IDX label file (u8, 1 dim)."""
    with open(images_path, "rb") as fh:
        ibuf = fh.read()
    with open(labels_path, "rb") as fh:
        lbuf = fh.read()
    (n, h, w), pixels = _parse_idx(ibuf, IDX_IMAGES_MAGIC, 3, "images")
    (n_labels,), labels = _parse_idx(lbuf, IDX_LABELS_MAGIC, 1, "labels")
    if n != n_labels:
        raise IdxCountMismatchError(f"{n} images but {n_labels} labels", 4)
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if n else 1
    images = pixels.reshape(n, h * w).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, h, w, class_count)


def write_idx(dataset: LabeledDataset, images_path, labels_path):
    """Inverse of :func:`load_idx` (pixels quantised to u8)."""
    q = np.clip(np.floor(dataset.images * 255.0 + 0.5), 0, 255).astype(np.uint8)
    n = len(dataset)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, dataset.height, dataset.width))
        fh.write(q.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# --- synthetic glyphs -----------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    height: int = 12
    width: int = 12
    classes: int = 4
    samples_per_class: int = 300
    jitter: int = 1
    noise_std: float = 0.05
    seed: int = 0


def _glyphs(h, w):
    """Binary stroke templates, stroke width 2, drawn on an h x w canvas."""
    t, b = 2, h - 3          # top/bottom stroke rows
    lft, rgt = 3, w - 4      # left/right stroke cols
    mid_r, mid_c = h // 2 - 1, w // 2 - 1
    out = []

    g = np.zeros((h, w))     # ring ("0")
    g[t:t + 2, lft:rgt + 1] = 1
    g[b - 1:b + 1, lft:rgt + 1] = 1
    g[t:b + 1, lft:lft + 2] = 1
    g[t:b + 1, rgt - 1:rgt + 1] = 1
    out.append(g)

    g = np.zeros((h, w))     # vertical bar ("1")
    g[t:b + 1, mid_c:mid_c + 2] = 1
    out.append(g)

    g = np.zeros((h, w))     # top bar + diagonal ("7")
    g[t:t + 2, lft:rgt + 1] = 1
    for r in range(t + 2, b + 1):
        c = rgt - (r - t - 2) * (rgt - lft) // max(b - t - 2, 1)
        g[r, max(c - 1, 0):c + 1] = 1
    out.append(g)

    g = np.zeros((h, w))     # cross ("+")
    g[mid_r:mid_r + 2, lft - 1:rgt + 2] = 1
    g[t - 1:b + 2, mid_c:mid_c + 2] = 1
    out.append(g)

    g = np.zeros((h, w))     # "L"
    g[t:b + 1, lft:lft + 2] = 1
    g[b - 1:b + 1, lft:rgt + 1] = 1
    out.append(g)

    g = np.zeros((h, w))     # back-diagonal
    for r in range(t, b + 1):
        c = lft + (r - t) * (rgt - lft) // max(b - t, 1)
        g[r, c:c + 2] = 1
    out.append(g)
    return out


def glyph_templates(height=12, width=12, classes=4):
    templates = _glyphs(height, width)
    if not 2 <= classes <= len(templates):
        raise InputError(f"synthetic data supports 2..{len(templates)} classes")
    return [t.reshape(-1) for t in templates[:classes]]


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()):
    rng = np.random.default_rng(spec.seed)
    templates = glyph_templates(spec.height, spec.width, spec.classes)
    n = spec.classes * spec.samples_per_class
    images = np.empty((n, spec.height * spec.width))
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    j = spec.jitter
    for i in range(n):
        img = templates[labels[i]].reshape(spec.height, spec.width)
        if j > 0:
            dy, dx = rng.integers(-j, j + 1, size=2)
            img = _shift(img, int(dy), int(dx))
        if spec.noise_std > 0:
            img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0).reshape(-1)
    return LabeledDataset(images, labels, spec.height, spec.width, spec.classes)


# --- PGM -------------------------------------------------------------------

def quantize(image):
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_pgm(image, height, width):
    q = quantize(image).reshape(height, width)
    return b"P5\n%d %d\n255\n" % (width, height) + q.tobytes()


def write_pgm(image, path, height, width):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(image, height, width))


def read_pgm(path):
    """Read a binary P5 PGM. Returns (flat image in [0, 1], height, width)."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise InputError(f"{path}: not a binary PGM")
    width, height, maxval = (int(t) for t in tokens[1:])
    pixels = np.frombuffer(data[pos + 1:pos + 1 + width * height], dtype=np.uint8)
    if len(pixels) != width * height:
        raise InputError(f"{path}: truncated PGM payload")
    return pixels.astype(np.float64) / maxval, height, width


def load_config(path=None):
    """Parse a JSON run configuration (see :mod:`deduce.config`)."""
    from .config import load_config as _load
    return _load(path)
