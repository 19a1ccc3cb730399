"""Datasets for paired and unpaired training plus synthetic desk-scale tasks.

``synth_shift`` gives paired frames related by a known integer translation;
``synth_two_class`` gives two unaligned sets (disks vs. squeezed ellipses)
for distribution matching.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .imageio import load_image

__all__ = ["Dataset", "synth_shift", "synth_two_class", "batches", "load_folder",
           "shift_image", "SQUEEZE"]

# row/col scale of the class-B deformation; the product is 1 (area preserving)
SQUEEZE = (1.3, 1 / 1.3)


@dataclass
class Dataset:
    """Frames as (n, H, W, C) arrays.

    In paired mode ``x0[i]`` and ``x1[i]`` belong together; in unpaired mode
    the two arrays are independent samples and may differ in length.
    """

    mode: str
    x0: np.ndarray
    x1: np.ndarray

    def __post_init__(self):
        if self.mode not in ("paired", "unpaired"):
            raise ValueError(f"unknown dataset mode {self.mode!r}")
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        if self.x0.ndim != 4 or self.x1.ndim != 4:
            raise ValueError("frames must be stacked as (n, H, W, C)")
        if self.x0.shape[1:] != self.x1.shape[1:]:
            raise ValueError(f"frame dims differ: {self.x0.shape[1:]} vs {self.x1.shape[1:]}")
        if self.mode == "paired" and len(self.x0) != len(self.x1):
            raise ValueError("paired dataset needs equally many start and end frames")

    @property
    def dims(self) -> tuple:
        return self.x0.shape[1:3]

    @property
    def channels(self) -> int:
        return self.x0.shape[3]

    @property
    def pairs(self) -> list:
        if self.mode != "paired":
            raise ValueError("unpaired dataset has no pairs")
        return list(zip(self.x0, self.x1))

    def __len__(self):
        return min(len(self.x0), len(self.x1))


def shift_image(img: np.ndarray, shift) -> np.ndarray:
    """Integer translation with zero fill: ``out[i + dy, j + dx] = img[i, j]``."""
    dy, dx = (int(s) for s in shift)
    h, w = img.shape[:2]
    out = np.zeros_like(img)
    src_r = slice(max(0, -dy), min(h, h - dy))
    dst_r = slice(max(0, dy), min(h, h + dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out


def _blobs(rng: np.random.Generator, h: int, w: int, margin: float) -> np.ndarray:
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    # small frames get narrower blobs so every centre range stays non-empty
    sigma_cap = ((min(h, w) - 1) / 2 - margin) / 2
    if sigma_cap < 0.5:
        raise ValueError(f"{h}x{w} frames are too small for a margin of {margin}")
    for _ in range(rng.integers(2, 5)):
        sigma = min(rng.uniform(1.5, 3.0), sigma_cap)
        pad = margin + 2 * sigma
        cy = rng.uniform(pad, h - 1 - pad)
        cx = rng.uniform(pad, w - 1 - pad)
        amp = rng.uniform(0.5, 1.0)
        img += amp * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * sigma ** 2))
    return np.clip(img, 0.0, 1.0)


def synth_shift(n: int, dims=(32, 32), shift=(0, 3), seed: int = 0, channels: int = 1) -> Dataset:
    """Random soft-blob frames ``x0`` and their exact integer shifts ``x1``."""
    h, w = dims
    dy, dx = shift
    if abs(dy) >= h / 4 or abs(dx) >= w / 4:
        raise ValueError(f"shift {tuple(shift)} too large for {h}x{w} frames (limit is a quarter of each side)")
    rng = np.random.default_rng(seed)
    margin = max(abs(dy), abs(dx))
    x0 = np.empty((n, h, w, channels))
    for i in range(n):
        base = _blobs(rng, h, w, margin)
        gains = rng.uniform(0.6, 1.0, size=channels) if channels > 1 else np.ones(1)
        x0[i] = base[..., None] * gains
    x1 = np.stack([shift_image(x, shift) for x in x0]) if n else x0.copy()
    return Dataset("paired", x0, x1)


def _disk(h: int, w: int, cy: float, cx: float, radius: float, squeeze=(1.0, 1.0)) -> np.ndarray:
    """Anti-aliased disk, optionally seen through ``s -> c + diag(squeeze) (s - c)``.

    ``c`` is the disk centre, so squeezing changes the shape but not the
    position distribution. The footprint scales by ``1 / squeeze`` per axis.
    """
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    y = cy + squeeze[0] * (rows - cy)
    x = cx + squeeze[1] * (cols - cx)
    dist = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
    return np.clip(radius - dist + 0.5, 0.0, 1.0)


def _disk_params(rng, h, w):
    radius = rng.uniform(3.5, 5.5)
    pad = radius + 4
    return rng.uniform(pad, h - 1 - pad), rng.uniform(pad, w - 1 - pad), radius


def synth_two_class(n: int, dims=(28, 28), seed: int = 0) -> Dataset:
    """Unpaired sets: filled disks (A) and the same disks squeezed into ellipses (B).

    The two lists are generated and shuffled with independent sub-seeds.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    h, w = dims
    gen_a, gen_b, shuf_a, shuf_b = (np.random.default_rng(s)
                                    for s in np.random.SeedSequence(seed).spawn(4))
    a = np.stack([_disk(h, w, *_disk_params(gen_a, h, w)) for _ in range(n)])
    b = np.stack([_disk(h, w, *_disk_params(gen_b, h, w), squeeze=SQUEEZE) for _ in range(n)])
    a = a[shuf_a.permutation(n)]
    b = b[shuf_b.permutation(n)]
    return Dataset("unpaired", a[..., None], b[..., None])


def _class_permutations(n: int, seed: int):
    """The two shuffles :func:`synth_two_class` applies (exposed for tests)."""
    _, _, shuf_a, shuf_b = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4))
    return shuf_a.permutation(n), shuf_b.permutation(n)


def batches(ds: Dataset, batch_size: int, seed: int = 0, epoch: int = 0) -> Iterator[tuple]:
    """One epoch of ``(x0_batch, x1_batch)``; the final partial batch is dropped.

    The order depends only on ``(seed, epoch)``. Unpaired datasets shuffle the
    two sides independently.
    """
    n0, n1 = len(ds.x0), len(ds.x1)
    if n0 == 0 or n1 == 0:
        raise ValueError("empty dataset")
    n = n0 if ds.mode == "paired" else min(n0, n1)
    if batch_size < 1 or batch_size > n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    rng_a, rng_b = (np.random.default_rng(s) for s in np.random.SeedSequence([seed, epoch]).spawn(2))
    perm0 = rng_a.permutation(n0)
    perm1 = perm0 if ds.mode == "paired" else rng_b.permutation(n1)
    for k in range(n // batch_size):
        sl = slice(k * batch_size, (k + 1) * batch_size)
        yield ds.x0[perm0[sl]], ds.x1[perm1[sl]]


def load_folder(root, mode: str = "paired") -> Dataset:
    """Load ``root/x0/*`` and ``root/x1/*`` (PNG or PGM); pairs match by sorted filename."""
    root = Path(root)
    sides = []
    for sub in ("x0", "x1"):
        d = root / sub
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory {d}")
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".pgm"))
        if not files:
            raise FileNotFoundError(f"no images in {d}")
        sides.append(np.stack([load_image(p) for p in files]))
    return Dataset(mode, *sides)
