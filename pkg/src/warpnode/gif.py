"""Animated GIF89a writer with a hand-rolled LZW coder.

Grayscale frames use the identity 256-level gray palette, so the only loss
is 8-bit quantization. RGB frames share one median-cut palette.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import to_uint8

__all__ = ["GifStream", "encode_gif", "lzw_encode", "median_cut_palette", "gray_palette"]

MAX_CODES = 4096


def gray_palette() -> np.ndarray:
    return np.repeat(np.arange(256, dtype=np.uint8)[:, None], 3, axis=1)


def lzw_encode(indices, min_code_size: int = 8) -> bytes:
    """Variable-width LZW as used by GIF (LSB-first packing, clear on full table)."""
    clear = 1 << min_code_size
    eoi = clear + 1
    out = bytearray()
    acc = nbits = 0

    def emit(code, width):
        nonlocal acc, nbits
        acc |= code << nbits
        nbits += width
        while nbits >= 8:
            out.append(acc & 0xFF)
            acc >>= 8
            nbits -= 8

    data = bytes(np.asarray(indices, dtype=np.uint8).reshape(-1))
    width = min_code_size + 1
    table: dict = {}
    next_code = eoi + 1
    emit(clear, width)
    if data:
        prefix = data[0]
        for sym in data[1:]:
            key = (prefix, sym)
            code = table.get(key)
            if code is not None:
                prefix = code
                continue
            emit(prefix, width)
            if next_code < MAX_CODES:
                table[key] = next_code
                next_code += 1
                if next_code > (1 << width) and width < 12:
                    width += 1
            else:
                emit(clear, width)
                table.clear()
                next_code = eoi + 1
                width = min_code_size + 1
            prefix = sym
        emit(prefix, width)
    emit(eoi, width)
    if nbits:
        out.append(acc & 0xFF)
    return bytes(out)


def _sub_blocks(data: bytes) -> bytes:
    parts = [bytes([len(data[i:i + 255])]) + data[i:i + 255] for i in range(0, len(data), 255)]
    return b"".join(parts) + b"\x00"


def median_cut_palette(pixels: np.ndarray, n_colors: int = 256) -> np.ndarray:
    """Median-cut quantization of (K, 3) uint8 colors to at most ``n_colors`` entries."""
    colors, counts = np.unique(pixels.reshape(-1, 3), axis=0, return_counts=True)
    boxes = [(colors.astype(np.int64), counts)]
    while len(boxes) < n_colors:
        spans = [(c.max(0) - c.min(0)).max() if len(c) > 1 else -1 for c, _ in boxes]
        i = int(np.argmax(spans))
        if spans[i] <= 0:
            break
        c, w = boxes.pop(i)
        ch = int(np.argmax(c.max(0) - c.min(0)))
        order = np.argsort(c[:, ch], kind="stable")
        c, w = c[order], w[order]
        cum = np.cumsum(w)
        cut = int(np.clip(np.searchsorted(cum, cum[-1] / 2), 1, len(c) - 1))
        boxes += [(c[:cut], w[:cut]), (c[cut:], w[cut:])]
    pal = [np.round((c * w[:, None]).sum(0) / w.sum()) for c, w in boxes]
    return np.clip(np.array(pal), 0, 255).astype(np.uint8)


def _nearest(pixels: np.ndarray, palette: np.ndarray) -> np.ndarray:
    flat = pixels.reshape(-1, 3).astype(np.int64)
    pal = palette.astype(np.int64)
    idx = np.empty(len(flat), dtype=np.uint8)
    for s in range(0, len(flat), 4096):
        d = ((flat[s:s + 4096, None, :] - pal[None]) ** 2).sum(-1)
        idx[s:s + 4096] = d.argmin(1)
    return idx.reshape(pixels.shape[:-1])


@dataclass
class GifStream:
    """Frames of palette indices plus per-frame delays in centiseconds."""

    width: int
    height: int
    palette: np.ndarray
    frames: list = field(default_factory=list)
    loop: bool = True

    def add_frame(self, indices: np.ndarray, delay_cs: int) -> None:
        indices = np.asarray(indices, dtype=np.uint8)
        if indices.shape != (self.height, self.width):
            raise ValueError(f"frame is {indices.shape}, stream is {(self.height, self.width)}")
        if indices.size and int(indices.max()) >= len(self.palette):
            raise ValueError("palette index out of range")
        self.frames.append((indices, int(delay_cs)))

    def to_bytes(self) -> bytes:
        pal = np.zeros((256, 3), dtype=np.uint8)
        pal[:len(self.palette)] = self.palette
        out = [b"GIF89a",
               struct.pack("<HHBBB", self.width, self.height, 0xF7, 0, 0),
               pal.tobytes()]
        if self.loop:
            out.append(b"\x21\xFF\x0BNETSCAPE2.0\x03\x01" + struct.pack("<H", 0) + b"\x00")
        for indices, delay in self.frames:
            out.append(b"\x21\xF9\x04" + struct.pack("<BHB", 0x04, delay, 0) + b"\x00")
            out.append(b"\x2C" + struct.pack("<HHHHB", 0, 0, self.width, self.height, 0))
            out.append(b"\x08" + _sub_blocks(lzw_encode(indices, 8)))
        out.append(b"\x3B")
        return b"".join(out)


def encode_gif(frames, fps: int = 10, path=None) -> bytes:
    """Encode (H, W, C) float frames in [0, 1] as a looping GIF.

    Returns the encoded bytes and writes them to ``path`` when given.
    """
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if not frames:
        raise ValueError("need at least one frame")
    if not 1 <= fps <= 100:
        raise ValueError(f"fps must be in [1, 100], got {fps}")
    frames = [f[..., None] if f.ndim == 2 else f for f in frames]
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise ValueError(f"frame {i} has shape {f.shape}, expected {shape}")
    h, w, c = shape
    q = [to_uint8(f) for f in frames]
    if c == 1:
        palette = gray_palette()
        indexed = [f[..., 0] for f in q]
    elif c == 3:
        palette = median_cut_palette(np.concatenate([f.reshape(-1, 3) for f in q]))
        indexed = [_nearest(f, palette) for f in q]
    else:
        raise ValueError(f"unsupported channel count {c}")
    stream = GifStream(w, h, palette)
    delay = int(round(100 / fps))
    for ind in indexed:
        stream.add_frame(ind, delay)
    data = stream.to_bytes()
    if path is not None:
        Path(path).write_bytes(data)
    return data
