"""PGM (P5) and PNG readers/writers for 8-bit grayscale and RGB images.

Images are float arrays of shape (H, W, C) in [0, 1]; values are quantized
to 8 bits only when writing.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

__all__ = ["ImageFormatError", "load_image", "save_image", "decode_png", "encode_png",
           "decode_pgm", "encode_pgm", "to_uint8"]

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    pass


def to_uint8(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageFormatError(f"expected HxW, HxWx1 or HxWx3 image, got {img.shape}")
    return img


# -- PGM ---------------------------------------------------------------------

def _pgm_tokens(buf: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"PGM header truncated at byte {pos}")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P5":
        raise ImageFormatError(f"not a binary PGM (magic {buf[:2]!r} at byte 0)")
    (w, h, maxval), pos = _pgm_tokens(buf, 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ImageFormatError(f"unsupported PGM maxval {maxval} (only 8-bit)")
    need = w * h
    if len(buf) - pos < need:
        raise ImageFormatError(f"PGM pixel data truncated at byte {len(buf)}: expected {need} bytes from byte {pos}")
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 1)
    return px.astype(np.float64) / 255.0


def encode_pgm(img) -> bytes:
    img = _as_hwc(img)
    if img.shape[2] != 1:
        raise ImageFormatError("PGM holds grayscale images only")
    px = to_uint8(img)[..., 0]
    return f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii") + px.tobytes()


# -- PNG ---------------------------------------------------------------------

def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    if len(raw) != h * (stride + 1):
        raise ImageFormatError(f"PNG image data has {len(raw)} bytes, expected {h * (stride + 1)}")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(h, stride + 1)
    out = np.zeros((h, stride), dtype=np.int32)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(h):
        ftype = rows[y, 0]
        line = rows[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = line.copy()
            for x in range(bpp, stride):
                cur[x] = (cur[x] + cur[x - bpp]) & 0xFF
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype == 3:
            cur = line.copy()
            for x in range(stride):
                left = cur[x - bpp] if x >= bpp else 0
                cur[x] = (cur[x] + ((left + prev[x]) >> 1)) & 0xFF
        elif ftype == 4:
            cur = line.copy()
            for x in range(stride):
                a = cur[x - bpp] if x >= bpp else 0
                c = prev[x - bpp] if x >= bpp else 0
                cur[x] = (cur[x] + _paeth(int(a), int(prev[x]), int(c))) & 0xFF
        else:
            raise ImageFormatError(f"PNG row {y}: unknown filter type {ftype}")
        out[y] = cur
        prev = cur
    return out.astype(np.uint8)


def decode_png(buf: bytes) -> np.ndarray:
    if buf[:8] != PNG_SIGNATURE:
        raise ImageFormatError("not a PNG file (bad signature at byte 0)")
    pos = 8
    header = None
    idat = []
    while True:
        if pos + 8 > len(buf):
            raise ImageFormatError(f"PNG truncated at byte {pos}: expected chunk header")
        length, ctype = struct.unpack(">I4s", buf[pos:pos + 8])
        name = ctype.decode("latin-1")
        end = pos + 12 + length
        if end > len(buf):
            raise ImageFormatError(f"PNG chunk {name} at byte {pos} truncated (needs {length} data bytes)")
        body = buf[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack(">I", buf[pos + 8 + length:end])
        if zlib.crc32(ctype + body) & 0xFFFFFFFF != crc:
            raise ImageFormatError(f"CRC mismatch in PNG chunk {name} at byte {pos}")
        if name == "IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif name == "IDAT":
            idat.append(body)
        elif name == "IEND":
            break
        elif not (ctype[0] & 0x20):
            raise ImageFormatError(f"unsupported critical PNG chunk {name} at byte {pos}")
        pos = end
    if header is None:
        raise ImageFormatError("PNG has no IHDR chunk")
    w, h, depth, ctype, comp, filt, interlace = header
    if depth != 8:
        raise ImageFormatError(f"unsupported PNG bit depth {depth} (only 8)")
    if ctype not in (0, 2):
        raise ImageFormatError(f"unsupported PNG color type {ctype} (only gray or RGB)")
    if comp != 0 or filt != 0 or interlace != 0:
        raise ImageFormatError("unsupported PNG compression/filter/interlace method")
    channels = 1 if ctype == 0 else 3
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageFormatError(f"PNG image data failed to inflate: {exc}") from None
    px = _unfilter(raw, h, w * channels, channels)
    return px.reshape(h, w, channels).astype(np.float64) / 255.0


def _chunk(ctype: bytes, body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + ctype + body + struct.pack(">I", zlib.crc32(ctype + body) & 0xFFFFFFFF)


def encode_png(img) -> bytes:
    img = _as_hwc(img)
    px = to_uint8(img)
    h, w, c = px.shape
    raw = b"".join(b"\x00" + px[y].tobytes() for y in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 0 if c == 1 else 2, 0, 0, 0)
    return PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b"")


# -- dispatch ----------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Read a PGM or PNG file into an (H, W, C) float array in [0, 1]."""
    buf = Path(path).read_bytes()
    if buf[:8] == PNG_SIGNATURE:
        return decode_png(buf)
    if buf[:2] == b"P5":
        return decode_pgm(buf)
    raise ImageFormatError(f"{path}: unrecognized image format")


def save_image(path, img) -> None:
    path = Path(path)
    data = encode_pgm(img) if path.suffix.lower() in (".pgm", ".pnm") else encode_png(img)
    path.write_bytes(data)
