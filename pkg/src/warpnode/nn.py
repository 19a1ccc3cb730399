"""Networks, initialization, the Adam optimizer and checkpoint files.

``VelocityNet`` is a small U-Net mapping the conditioning image to a
stationary velocity field that is read at each pixel's current position;
``Critic`` is a plain strided-conv scorer with no
normalization layers, so its input gradients are per-example.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .warp import warp_image

__all__ = [
    "Module", "Conv2d", "Linear", "VelocityNet", "Critic", "Adam",
    "kaiming_uniform", "save_checkpoint", "load_checkpoint", "CheckpointError",
]

MAGIC = b"WNODE1"


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.2) -> np.ndarray:
    bound = np.sqrt(6.0 / ((1.0 + slope ** 2) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal parameter container; submodules and Tensors are discovered by attribute."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros(p.shape)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters().items())

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = Tensor(arr).data


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1, zero: bool = False):
        fan_in = c_in * k * k
        if zero:
            w, b = np.zeros((c_out, c_in, k, k)), np.zeros(c_out)
        else:
            w = kaiming_uniform(rng, (c_out, c_in, k, k), fan_in)
            b = rng.uniform(-1, 1, size=c_out) / np.sqrt(fan_in)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, rng, f_in: int, f_out: int):
        self.weight = Tensor(kaiming_uniform(rng, (f_in, f_out), f_in, slope=1.0), requires_grad=True)
        self.bias = Tensor(rng.uniform(-1, 1, size=f_out) / np.sqrt(f_in), requires_grad=True)

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class VelocityNet(Module):
    """Stationary velocity field ``V(phi, x0)`` in pixels per unit time.

    A U-Net maps the conditioning image to a field ``u(x0)`` of shape
    (N, H, W, 2); the head output is scaled by ``(H, W)`` so the network works
    in normalized units. The velocity of a pixel is ``u`` read at its current
    position ``grid + phi`` by bilinear sampling. Because the field depends on
    position only, integrating to ``-t`` inverts the warp at ``+t``. The head
    starts at zero, so an untrained net produces the identity flow.

    Parameters
    ----------
    image_channels : int
        Channels of the conditioning image.
    depth : int
        Number of pooling stages; inputs must be divisible by ``2**depth``.
    base_width : int
        Channels of the first stage, doubled per stage.
    seed : int
        Seed for Kaiming-uniform initialization.
    """

    def __init__(self, image_channels: int = 1, depth: int = 3, base_width: int = 16,
                 seed: int = 0, slope: float = 0.2):
        if depth < 1 or base_width < 1:
            raise ValueError("depth and base_width must be positive")
        rng = np.random.default_rng(seed)
        self.image_channels = image_channels
        self.depth = depth
        self.base_width = base_width
        self.slope = slope
        widths = [base_width * 2 ** i for i in range(depth)]
        c_in = image_channels
        self.enc = []
        for wd in widths:
            self.enc.append(Conv2d(rng, c_in, wd))
            c_in = wd
        self.mid = Conv2d(rng, c_in, 2 * c_in)
        c_in = 2 * c_in
        self.dec = []
        for wd in reversed(widths):
            self.dec.append(Conv2d(rng, c_in + wd, wd))
            c_in = wd
        self.head = Conv2d(rng, c_in, 2, zero=True)

    @classmethod
    def from_state(cls, state: dict, prefix: str = "velocity.") -> "VelocityNet":
        """Rebuild the architecture from parameter shapes, then load the weights."""
        sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
        depth = sum(1 for k in sub if k.startswith("enc.") and k.endswith(".weight"))
        if depth == 0:
            raise KeyError(f"no '{prefix}' parameters in checkpoint")
        w0 = sub["enc.0.weight"]
        net = cls(image_channels=w0.shape[1], depth=depth, base_width=w0.shape[0])
        net.load_state_dict(sub)
        return net

    def field(self, x0) -> Tensor:
        """The U-Net output ``u(x0)``, (N, H, W, 2) or (H, W, 2) for a single image."""
        x0 = T.as_tensor(x0)
        single = x0.ndim == 3
        if single:
            x0 = T.reshape(x0, (1,) + x0.shape)
        n, h, w, c = x0.shape
        if c != self.image_channels:
            raise ShapeError(f"velocity: expected {self.image_channels} image channels, got {c}")
        step = 2 ** self.depth
        if h % step or w % step:
            raise ShapeError(f"velocity: {h}x{w} is not divisible by 2**depth = {step}")
        z = T.transpose(x0, (0, 3, 1, 2))
        skips = []
        for conv in self.enc:
            z = T.leaky_relu(conv(z), self.slope)
            skips.append(z)
            z = T.avg_pool2d(z)
        z = T.leaky_relu(self.mid(z), self.slope)
        for conv, skip in zip(self.dec, reversed(skips)):
            z = T.concat([T.upsample_nearest2d(z), skip], axis=1)
            z = T.leaky_relu(conv(z), self.slope)
        u = T.transpose(self.head(z), (0, 2, 3, 1))
        u = T.mul(u, Tensor._wrap(np.array([h, w], dtype=np.float64)))
        return T.reshape(u, u.shape[1:]) if single else u

    def bind(self, x0) -> Callable[[Tensor], Tensor]:
        """Evaluate the U-Net once and return ``phi -> V(phi, x0)``.

        The integrators use this so a solve costs one network pass.
        """
        u = self.field(x0)

        def velocity(phi):
            phi = T.as_tensor(phi)
            if phi.shape[:-1] != u.shape[:-1] or phi.shape[-1] != 2:
                raise ShapeError(f"velocity: warp {phi.shape} and image {T.as_tensor(x0).shape} "
                                 "differ spatially")
            return warp_image(u, phi)

        return velocity

    def __call__(self, phi, x0) -> Tensor:
        return self.bind(x0)(phi)


class Critic(Module):
    """``blocks`` stride-2 conv + leaky-ReLU stages, flatten, linear head to one score."""

    def __init__(self, image_shape, blocks: int = 4, base_width: int = 16, seed: int = 0,
                 slope: float = 0.2):
        h, w, c = image_shape
        rng = np.random.default_rng(seed)
        self.image_shape = (h, w, c)
        self.slope = slope
        self.blocks = []
        c_in = c
        for i in range(blocks):
            wd = base_width * 2 ** i
            self.blocks.append(Conv2d(rng, c_in, wd, stride=2))
            c_in = wd
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        self.features = c_in * h * w
        self.fc = Linear(rng, self.features, 1)

    @classmethod
    def from_state(cls, state: dict, image_shape, prefix: str = "critic.") -> "Critic":
        sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
        blocks = sum(1 for k in sub if k.startswith("blocks.") and k.endswith(".weight"))
        d = cls(image_shape, blocks=blocks, base_width=sub["blocks.0.weight"].shape[0])
        d.load_state_dict(sub)
        return d

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if tuple(x.shape[1:]) != self.image_shape:
            raise ShapeError(f"critic: built for {self.image_shape}, got {tuple(x.shape[1:])}")
        z = T.transpose(x, (0, 3, 1, 2))
        for conv in self.blocks:
            z = T.leaky_relu(conv(z), self.slope)
        z = T.reshape(z, (z.shape[0], -1))
        return self.fc(z)


class Adam:
    """Adam with bias correction. Parameters are rebound, never mutated in place."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"missing gradient for parameter {i} (shape {p.shape})")
        self.t += 1
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            upd = self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            new = p.data - upd
            new.flags.writeable = False
            p.data = new


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict) -> None:
    """Write ``{name: array}`` as: magic, then per parameter
    ``u32 name_len, name, u32 rank, u64 dims..., f64 data`` (little-endian)."""
    chunks = [MAGIC]
    for name, arr in params.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    out = OrderedDict()

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos} (need {n} more, file has {len(buf)})")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        out[name] = arr
    return out
