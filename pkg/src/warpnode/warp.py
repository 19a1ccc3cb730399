"""Differentiable image warping and the fold / out-of-grid regularizers.

Coordinate convention, used everywhere in the package: the last axis of a
warp field is ``(row, col)`` in pixel units, and the identity grid has
``grid[i, j] == (i, j)``. A warp field is a *displacement*: the output pixel
``s`` is sampled from ``grid[s] + disp[s]``.

Arrays are channels-last. Warp fields are ``(H, W, 2)`` or batched
``(N, H, W, 2)``; images are ``(H, W, C)`` or ``(N, H, W, C)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "Grid", "identity_grid", "bilinear_sample", "sample", "warp_image",
    "jacobian_determinant", "jd_penalty", "og_penalty",
]


@dataclass(frozen=True)
class Grid:
    """Mesh of pixel coordinates, ``coords[i, j] == (i, j)``."""

    h: int
    w: int

    @property
    def coords(self) -> np.ndarray:
        return identity_grid(self.h, self.w)


def identity_grid(h: int, w: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                             indexing="ij")
    return np.stack([rows, cols], axis=-1)


def _corners(loc: np.ndarray, h: int, w: int):
    """Clamp sample locations and return neighbour indices and weights."""
    r = np.clip(loc[..., 0], 0.0, h - 1)
    c = np.clip(loc[..., 1], 0.0, w - 1)
    r0 = np.clip(np.floor(r), 0, max(h - 2, 0)).astype(np.intp)
    c0 = np.clip(np.floor(c), 0, max(w - 2, 0)).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = r - r0
    wc = c - c0
    # derivative of the clamped coordinate w.r.t. the raw one
    inside_r = ((loc[..., 0] > 0) & (loc[..., 0] < h - 1)).astype(np.float64)
    inside_c = ((loc[..., 1] > 0) & (loc[..., 1] < w - 1)).astype(np.float64)
    return r0, r1, c0, c1, wr, wc, inside_r, inside_c


def bilinear_sample(x: np.ndarray, loc) -> np.ndarray:
    """Sample image ``x`` (H, W, C) at ``loc`` (..., 2), clamping to the border.

    Returns an array of shape ``loc.shape[:-1] + (C,)``. Exact at integer
    locations.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    loc = np.asarray(loc, dtype=np.float64)
    h, w = x.shape[:2]
    r0, r1, c0, c1, wr, wc, _, _ = _corners(loc, h, w)
    wr, wc = wr[..., None], wc[..., None]
    return ((1 - wr) * (1 - wc) * x[r0, c0] + (1 - wr) * wc * x[r0, c1]
            + wr * (1 - wc) * x[r1, c0] + wr * wc * x[r1, c1])


def _batched(x: Tensor, phi: Tensor):
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if phi.ndim == 3:
        phi = T.reshape(phi, (1,) + phi.shape)
    return x, phi, squeeze


def sample(x, loc) -> Tensor:
    """Differentiable bilinear sampling of a batched image at absolute locations.

    ``x`` is (N, H, W, C) and ``loc`` is (N, Ho, Wo, 2); output (N, Ho, Wo, C).
    """
    x, loc = T.as_tensor(x), T.as_tensor(loc)
    n, h, w, c = x.shape
    if loc.shape[0] != n or loc.shape[-1] != 2:
        raise ShapeError(f"sample: image {x.shape} and locations {loc.shape} do not match")
    r0, r1, c0, c1, wr, wc, in_r, in_c = _corners(loc.data, h, w)
    b = np.arange(n).reshape((n,) + (1,) * (loc.ndim - 2))
    v00, v01 = x.data[b, r0, c0], x.data[b, r0, c1]
    v10, v11 = x.data[b, r1, c0], x.data[b, r1, c1]
    wr_, wc_ = wr[..., None], wc[..., None]
    w00 = (1 - wr_) * (1 - wc_)
    w01 = (1 - wr_) * wc_
    w10 = wr_ * (1 - wc_)
    w11 = wr_ * wc_
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bw(g, _):
        gd = g.data
        gx = np.zeros(n * h * w * c)
        base = b * (h * w)
        chan = np.arange(c)
        for rr, cc, wt in ((r0, c0, w00), (r0, c1, w01), (r1, c0, w10), (r1, c1, w11)):
            flat = ((base + rr * w + cc)[..., None] * c + chan).reshape(-1)
            gx += np.bincount(flat, weights=(wt * gd).reshape(-1), minlength=gx.size)
        d_wr = (1 - wc_) * (v10 - v00) + wc_ * (v11 - v01)
        d_wc = (1 - wr_) * (v01 - v00) + wr_ * (v11 - v10)
        gloc = np.stack([(gd * d_wr).sum(-1) * in_r, (gd * d_wc).sum(-1) * in_c], axis=-1)
        return Tensor._wrap(gx.reshape(n, h, w, c)), Tensor._wrap(gloc)

    return T.make_op("bilinear_sample", out, (x, loc), bw, higher_order=False)


def warp_image(x, phi) -> Tensor:
    """Resample ``x`` at ``grid + phi``; output pixel ``s`` reads ``x(s + phi(s))``.

    Accepts single (H, W, C) / (H, W, 2) or batched inputs. Differentiable
    w.r.t. both the image and the displacement.
    """
    x, phi = T.as_tensor(x), T.as_tensor(phi)
    if x.ndim == 2:
        x = T.reshape(x, x.shape + (1,))
    xb, pb, squeeze = _batched(x, phi)
    if xb.shape[:3] != pb.shape[:3] or pb.shape[-1] != 2:
        raise ShapeError(f"warp_image: image {x.shape} and warp field {phi.shape} do not match")
    h, w = xb.shape[1:3]
    loc = T.add(pb, Tensor._wrap(identity_grid(h, w)))
    out = sample(xb, loc)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def jacobian_determinant(phi) -> Tensor:
    """Forward-difference Jacobian determinant of the map ``grid + phi``.

    Output has shape (..., H-1, W-1). The identity field gives 1 everywhere.
    """
    phi = T.as_tensor(phi)
    h, w = phi.shape[-3], phi.shape[-2]
    if h < 2 or w < 2:
        raise ShapeError(f"jacobian_determinant: field {h}x{w} is degenerate")
    m = T.add(phi, Tensor._wrap(identity_grid(h, w)))
    base = m[..., 0:h - 1, 0:w - 1, :]
    d_row = T.sub(m[..., 1:h, 0:w - 1, :], base)
    d_col = T.sub(m[..., 0:h - 1, 1:w, :], base)
    a_r, a_c = d_row[..., 0], d_row[..., 1]
    b_r, b_c = d_col[..., 0], d_col[..., 1]
    return T.sub(T.mul(a_r, b_c), T.mul(a_c, b_r))


def _fields(traj):
    fields = getattr(traj, "fields", traj)
    if isinstance(fields, (Tensor, np.ndarray)):
        fields = [fields]
    fields = [T.as_tensor(f) for f in fields]
    if not fields:
        raise ValueError("trajectory is empty")
    return fields


def _per_example_total(vals: Tensor, batched: bool) -> Tensor:
    if batched:
        return T.mean(T.sum(vals, axes=tuple(range(1, vals.ndim))))
    return T.sum(vals)


def jd_penalty(traj) -> Tensor:
    """Sum over fields and pixels of ``|det J| - det J`` (= 2 * sum of negative parts).

    ``traj`` may be a :class:`~warpnode.ode.Trajectory`, a list of fields or
    a single field. For batched (N, H, W, 2) fields the per-example sums are
    averaged over the batch.
    """
    total = None
    for f in _fields(traj):
        det = jacobian_determinant(f)
        term = _per_example_total(T.sub(T.abs(det), det), f.ndim == 4)
        total = term if total is None else T.add(total, term)
    return total


def og_penalty(traj) -> Tensor:
    """Hinge penalty on mapped coordinates leaving ``[0, size - 1]`` per axis.

    Zero exactly when ``grid + phi`` stays inside the image for every field.
    Batched fields are averaged over the batch like :func:`jd_penalty`.
    """
    total = None
    for f in _fields(traj):
        h, w = f.shape[-3], f.shape[-2]
        m = T.add(f, Tensor._wrap(identity_grid(h, w)))
        upper = Tensor._wrap(np.array([h - 1, w - 1], dtype=np.float64))
        over = T.add(T.relu(T.sub(m, upper)), T.relu(T.neg(m)))
        term = _per_example_total(over, f.ndim == 4)
        total = term if total is None else T.add(total, term)
    return total
