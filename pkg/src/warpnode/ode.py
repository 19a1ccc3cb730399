"""Fixed-step integration of the stationary-velocity flow dphi/dt = V(phi).

The solution starts from the identity (zero displacement) and every step is
recorded on the active tape, so losses on the end state backpropagate
through the unrolled solver. Negative end times integrate backward, which
for a stationary field gives the inverse warp.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, Tensor
from .warp import identity_grid, warp_image

__all__ = [
    "WarpField", "Trajectory", "integrate", "trajectory", "warp_at",
    "invertibility_residual", "ConstantVelocity", "LinearVelocity", "steps_for",
]

Velocity = Callable[[Tensor, Tensor], Tensor]

METHODS = ("euler", "rk4")


@dataclass
class WarpField:
    """A single (H, W, 2) displacement field in pixels, (row, col) order."""

    disp: np.ndarray

    def __post_init__(self):
        self.disp = np.asarray(self.disp, dtype=np.float64)
        if self.disp.ndim != 3 or self.disp.shape[-1] != 2:
            raise ValueError(f"warp field must be HxWx2, got {self.disp.shape}")
        if not np.all(np.isfinite(self.disp)):
            raise ValueError("warp field contains non-finite values")

    @classmethod
    def identity(cls, h: int, w: int) -> "WarpField":
        return cls(np.zeros((h, w, 2)))

    @property
    def h(self) -> int:
        return self.disp.shape[0]

    @property
    def w(self) -> int:
        return self.disp.shape[1]

    def mapped(self) -> np.ndarray:
        return identity_grid(self.h, self.w) + self.disp


@dataclass
class Trajectory:
    times: list
    fields: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.times) != len(self.fields):
            raise ValueError("times and fields differ in length")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    def at(self, t: float):
        return self.fields[self.times.index(t)]


class ConstantVelocity:
    """V(phi) = c everywhere; the flow is an exact translation by t*c."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)

    def __call__(self, phi, x0=None) -> Tensor:
        return Tensor._wrap(np.broadcast_to(self.c, phi.shape).copy())


class LinearVelocity:
    """V = A (grid + phi - center): a linear field acting on mapped coordinates.

    The flow is ``m_t - center = expm(t A) (grid - center)``.
    """

    def __init__(self, A, center=(0.0, 0.0)):
        self.A = np.asarray(A, dtype=np.float64)
        self.center = np.asarray(center, dtype=np.float64)

    def __call__(self, phi, x0=None) -> Tensor:
        phi = T.as_tensor(phi)
        h, w = phi.shape[-3], phi.shape[-2]
        rel = T.add(phi, Tensor._wrap(identity_grid(h, w) - self.center))
        flat = T.reshape(rel, (-1, 2))
        return T.reshape(T.matmul(flat, Tensor._wrap(self.A.T.copy())), phi.shape)


def _step(f: Callable[[Tensor], Tensor], phi: Tensor, h: float, method: str) -> Tensor:
    if method == "euler":
        return T.add(phi, T.scale(f(phi), h))
    k1 = f(phi)
    k2 = f(T.add(phi, T.scale(k1, h / 2)))
    k3 = f(T.add(phi, T.scale(k2, h / 2)))
    k4 = f(T.add(phi, T.scale(k3, h)))
    incr = T.add(T.add(k1, T.scale(k2, 2.0)), T.add(T.scale(k3, 2.0), k4))
    # divide before scaling so a constant field integrates exactly
    return T.add(phi, T.scale(T.div(incr, 6.0), h))


def _bind(velocity: Velocity, x0) -> Callable[[Tensor], Tensor]:
    """``phi -> velocity(phi, x0)``, letting the velocity precompute per-image work."""
    if hasattr(velocity, "bind"):
        return velocity.bind(x0)
    return lambda phi: velocity(phi, x0)


def _identity_like(x0) -> Tensor:
    shape = tuple(T.as_tensor(x0).shape[:-1]) + (2,)
    return Tensor._wrap(np.zeros(shape))


def _advance(velocity, phi, x0, span: float, steps: int, method: str, callback=None):
    f = _bind(velocity, x0)
    h = span / steps
    for k in range(steps):
        phi = _step(f, phi, h, method)
        if not np.all(np.isfinite(phi.data)):
            raise NonFiniteError(f"non-finite warp field at integration step {k + 1}/{steps}")
        if callback is not None:
            callback(k, phi)
    return phi


def _check_method(method):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def integrate(velocity: Velocity, x0, t_end: float = 1.0, steps: int = 8, method: str = "rk4",
              callback=None) -> Tensor:
    """Integrate from the identity warp to ``t_end`` with ``steps`` fixed steps.

    ``x0`` is the conditioning image, (H, W, C) or batched (N, H, W, C); the
    returned displacement matches with a trailing axis of 2. ``callback(k,
    phi)`` is called after every step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if abs(t_end) > 1:
        raise ValueError(f"t_end must lie in [-1, 1], got {t_end}")
    _check_method(method)
    x0 = T.as_tensor(x0)
    return _advance(velocity, _identity_like(x0), x0, float(t_end), steps, method, callback)


def steps_for(dt: float, steps_per_unit: int) -> int:
    # the epsilon absorbs products like 0.3 * 10 = 3.0000000000000004
    return max(1, math.ceil(abs(dt) * steps_per_unit - 1e-9))


def trajectory(velocity: Velocity, x0, times, steps_per_unit: int = 8,
               method: str = "rk4") -> Trajectory:
    """Emit the warp at each requested time from one solve per time direction.

    Positive times are reached by continuing a single forward solve, negative
    ones by a single backward solve. ``t = 0`` (the identity) is always
    included.
    """
    times = [float(t) for t in times]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("times must be sorted")
    if times and (times[0] < -1 or times[-1] > 1):
        raise ValueError("times must lie in [-1, 1]")
    _check_method(method)
    x0 = T.as_tensor(x0)
    ident = _identity_like(x0)
    out = {0.0: ident}
    for branch in ([t for t in times if t > 0], [t for t in reversed(times) if t < 0]):
        phi, t_prev = ident, 0.0
        for t in branch:
            if t == t_prev:
                continue
            phi = _advance(velocity, phi, x0, t - t_prev, steps_for(t - t_prev, steps_per_unit), method)
            out[t] = phi
            t_prev = t
    ts = sorted(out)
    return Trajectory(ts, [out[t] for t in ts])


def warp_at(velocity: Velocity, x0, t: float, steps_per_unit: int = 8, method: str = "rk4") -> Tensor:
    """Warp at time ``t`` by re-integrating from 0; ``t = 0`` is the exact identity."""
    x0 = T.as_tensor(x0)
    if t == 0:
        return _identity_like(x0)
    return integrate(velocity, x0, t, steps_for(t, steps_per_unit), method)


def invertibility_residual(velocity: Velocity, x0, steps: int = 32, method: str = "rk4",
                           margin: int = 1) -> float:
    """Max deviation (pixels) of ``phi_-1 o phi_1`` from the identity.

    The backward field is evaluated at the forward-mapped points by bilinear
    interpolation. Only pixels at least ``margin`` from the border whose
    forward image stays inside the grid are scored.
    """
    with T.no_grad():
        fwd = integrate(velocity, x0, 1.0, steps, method).data
        bwd = integrate(velocity, x0, -1.0, steps, method).data
    if fwd.ndim == 3:
        fwd, bwd = fwd[None], bwd[None]
    _, h, w, _ = fwd.shape
    grid = identity_grid(h, w)
    mapped = grid + fwd
    back_at_mapped = warp_image(bwd, fwd).data
    composed = mapped + back_at_mapped
    err = np.abs(composed - grid).max(axis=-1)
    mask = np.zeros((h, w), dtype=bool)
    mask[margin:h - margin, margin:w - margin] = True
    mask = mask & np.all((mapped >= 0) & (mapped <= np.array([h - 1, w - 1])), axis=-1)
    if not mask.any():
        return 0.0
    return float(err[mask].max())
