"""Procedural shape datasets and exact binary image / grid file formats."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng

CLASS_NAMES = ("rect", "circle", "stripes")


@dataclass
class DatasetSpec:
    generator: str = "shapes"
    image_size: int = 16
    channels: int = 1
    count: int = 5000
    seed: int = 0
    classes: tuple[str, ...] = ("rect", "circle")

    def __post_init__(self):
        if self.generator != "shapes":
            raise ValueError(f"unknown dataset generator '{self.generator}'")
        for c in self.classes:
            if c not in CLASS_NAMES:
                raise ValueError(f"unknown shape class '{c}'")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


_LEVELS = np.array([0.2, 0.5, 0.8])  # small palette keeps patches quantizable


def _draw_shape(img: np.ndarray, kind: str, rng: Rng) -> None:
    n = img.shape[0]
    fg = float(_LEVELS[int(rng.integers(1, len(_LEVELS)))])
    if kind == "rect":
        h = 2 * int(rng.integers(2, max(3, n // 4)))
        w = 2 * int(rng.integers(2, max(3, n // 4)))
        r0 = 2 * int(rng.integers(0, (n - h) // 2 + 1))
        c0 = 2 * int(rng.integers(0, (n - w) // 2 + 1))
        img[r0 : r0 + h, c0 : c0 + w] = fg
    elif kind == "circle":
        rad = int(rng.integers(3, max(4, n // 3)))
        cr = 2 * int(rng.integers(rad // 2, (n - rad) // 2 + 1))
        cc = 2 * int(rng.integers(rad // 2, (n - rad) // 2 + 1))
        rr, cc_ = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        img[(rr - cr) ** 2 + (cc_ - cc) ** 2 <= rad * rad] = fg
    elif kind == "stripes":
        period = int(rng.integers(1, 3)) * 2
        horizontal = bool(rng.integers(0, 2))
        rr, cc_ = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        axis = rr if horizontal else cc_
        img[(axis // (period // 2)) % 2 == 0] = fg
    else:
        raise ValueError(kind)


def build_dataset(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic images in [0,1] with class labels; same spec+seed gives
    an identical dataset."""
    rng = Rng(spec.seed)
    n = spec.image_size
    images = np.zeros((spec.count, n, n, spec.channels), dtype=np.float32)
    labels = np.zeros(spec.count, dtype=np.int64)
    for i in range(spec.count):
        cls = int(rng.integers(0, len(spec.classes)))
        labels[i] = cls
        canvas = np.full((n, n), float(_LEVELS[0]), dtype=np.float32)
        _draw_shape(canvas, spec.classes[cls], rng)
        if spec.channels == 1:
            images[i, :, :, 0] = canvas
        else:
            tint = np.zeros(3, dtype=np.float32)
            tint[cls % 3] = 1.0
            images[i] = canvas[:, :, None] * (0.5 + 0.5 * tint)[None, None, :]
    return images, labels


# ---------------------------------------------------------------------------
# 8-bit binary PGM/PPM (bit-exact fixtures; no external codecs)
# ---------------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    """Write [H, W, C] floats in [0,1] as binary PGM (C=1) or PPM (C=3)."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    raw = to_uint8(img)
    with open(path, "wb") as fh:
        if c == 1:
            fh.write(f"P5\n{w} {h}\n255\n".encode())
            fh.write(raw[:, :, 0].tobytes())
        elif c == 3:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(raw.tobytes())
        else:
            raise ValueError("images must have 1 or 3 channels")


def read_image(path) -> np.ndarray:
    """Read binary PGM/PPM back to [H, W, C] floats in [0,1]."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"unsupported image magic {magic!r}")
        dims = fh.readline().split()
        while dims and dims[0].startswith(b"#"):
            dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError("only 8-bit images supported")
        c = 1 if magic == b"P5" else 3
        raw = np.frombuffer(fh.read(h * w * c), dtype=np.uint8)
    return (raw.reshape(h, w, c).astype(np.float32)) / 255.0


def write_token_grid(path, grid: np.ndarray) -> None:
    """Token grid as plain text: one row of space-separated ints per line."""
    with open(path, "w") as fh:
        for row in np.asarray(grid):
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def read_token_grid(path) -> np.ndarray:
    with open(path) as fh:
        rows = [[int(v) for v in line.split()] for line in fh if line.strip()]
    return np.asarray(rows, dtype=np.int64)


def write_mask_file(path, mask: np.ndarray) -> None:
    """Infill mask: one byte per token cell, 0 = known, 1 = generate."""
    np.asarray(mask, dtype=np.uint8).tofile(path)


def read_mask_file(path, height: int, width: int) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != height * width:
        raise ValueError(f"mask file holds {raw.size} cells, expected {height * width}")
    if not np.isin(raw, (0, 1)).all():
        raise ValueError("mask bytes must be 0 or 1")
    return raw.reshape(height, width).astype(bool)
