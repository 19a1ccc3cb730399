"""Command-line interface: ``train``, ``generate`` and ``inspect``.

Thread count for the BLAS backend comes from the ``WNODE_NUM_THREADS``
environment variable (unset means the library default).
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import load_folder, synth_shift, synth_two_class
from .gif import encode_gif
from .imageio import ImageFormatError, load_image, save_image
from .nn import CheckpointError, VelocityNet, load_checkpoint
from .ode import warp_at
from .tensor import ShapeError
from .train import TrainConfig, train
from .warp import warp_image

__all__ = ["main", "build_parser", "frame_times", "render_frames"]

THREADS_ENV = "WNODE_NUM_THREADS"
MODE_ALIASES = {"paired": "paired_l2", "unpaired": "unpaired_gan",
                "paired_l2": "paired_l2", "unpaired_gan": "unpaired_gan"}
TASKS = ("synth-shift", "synth-two-class")


class CliError(Exception):
    pass


def frame_times(n_frames: int, t_min: float, t_max: float) -> list[float]:
    """Inclusive, equally spaced times.

    The fraction ``k / (n - 1)`` is formed first so that equal fractions from
    different frame counts give bitwise-equal times.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if not -1.0 <= t_min < t_max <= 1.0:
        raise ValueError(f"need -1 <= t_min < t_max <= 1, got [{t_min}, {t_max}]")
    span = t_max - t_min
    return [t_min + span * (k / (n_frames - 1)) for k in range(n_frames)]


def render_frames(net, x0: np.ndarray, times, steps_per_unit: int = 16,
                  method: str = "rk4") -> list[np.ndarray]:
    """Warp ``x0`` (H, W, C) to each time, re-integrating from 0 per frame."""
    frames = []
    with T.no_grad():
        for t in times:
            phi = warp_at(net, x0, t, steps_per_unit, method)
            frames.append(warp_image(x0, phi).data)
    return frames


# -- train ---------------------------------------------------------------------

def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _train_config(args) -> TrainConfig:
    text = Path(args.config).read_text() if args.config else ""
    pairs = _parse_set(args.set)
    flag_map = {"mode": args.mode and MODE_ALIASES[args.mode], "max_steps": args.steps,
                "seed": args.seed, "batch_size": args.batch_size, "ode_steps": args.ode_steps,
                "ode_method": args.ode_method, "lr_v": args.lr}
    pairs.update({k: str(v) for k, v in flag_map.items() if v is not None})
    text += "".join(f"\n{k} = {v}" for k, v in pairs.items())
    return TrainConfig.from_text(text)


def _train_dataset(args, cfg: TrainConfig):
    if args.data:
        return load_folder(args.data, "paired" if cfg.mode == "paired_l2" else "unpaired")
    if args.task == "synth-shift":
        return synth_shift(args.n, dims=(32, 32), shift=(0, 3), seed=cfg.seed)
    return synth_two_class(args.n, dims=(28, 28), seed=cfg.seed)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = _train_dataset(args, cfg)
    res = train(cfg, ds, out_dir=args.out, log=sys.stdout if args.verbose else None)
    print(f"trained {len(res.reports)} steps; checkpoint {res.checkpoints[-1]}", file=sys.stderr)
    return 0


# -- generate ------------------------------------------------------------------

def cmd_generate(args) -> int:
    net = VelocityNet.from_state(load_checkpoint(args.checkpoint))
    x0 = load_image(args.x0)
    if x0.shape[2] != net.image_channels:
        raise CliError(f"image has {x0.shape[2]} channels, checkpoint expects {net.image_channels}")
    times = frame_times(args.n_frames, args.t_min, args.t_max)
    frames = render_frames(net, x0, times, args.steps_per_unit, args.method)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digits = max(4, len(str(len(frames) - 1)))
    for k, f in enumerate(frames):
        save_image(out / f"frame_{k:0{digits}d}.png", f)
    encode_gif(frames, fps=args.fps, path=out / "animation.gif")
    print(f"wrote {len(frames)} frames to {out}", file=sys.stderr)
    return 0


# -- inspect -------------------------------------------------------------------

def cmd_inspect(args) -> int:
    state = load_checkpoint(args.checkpoint)
    total = 0
    print(f"{'name':36s} {'shape':18s} {'mean':>11s} {'std':>11s} {'min':>11s} {'max':>11s}")
    for name, arr in state.items():
        total += arr.size
        stats = (arr.mean(), arr.std(), arr.min(), arr.max()) if arr.size else (0.0,) * 4
        print(f"{name:36s} {str(arr.shape):18s} " + " ".join(f"{s:11.4g}" for s in stats))
    print(f"{len(state)} tensors, {total} parameters")
    return 0


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="warpnode", description="Warping neural ODE: train and animate.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a velocity net")
    t.add_argument("--out", required=True, help="output directory for checkpoints and report.jsonl")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--task", choices=TASKS, help="built-in synthetic dataset")
    src.add_argument("--data", help="folder with x0/ and x1/ subdirectories of PNG/PGM images")
    t.add_argument("--config", help="flat key=value file with TrainConfig fields")
    t.add_argument("--mode", choices=sorted(MODE_ALIASES))
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--ode-steps", type=int)
    t.add_argument("--ode-method", choices=("euler", "rk4"))
    t.add_argument("--lr", type=float, help="velocity-net learning rate")
    t.add_argument("--n", type=int, default=64, help="synthetic dataset size")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    t.add_argument("-v", "--verbose", action="store_true", help="echo report lines to stdout")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="render frames and a GIF from a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--x0", required=True, help="start image (PNG or PGM)")
    g.add_argument("--out", required=True)
    g.add_argument("--n-frames", type=int, default=16)
    g.add_argument("--t-min", type=float, default=0.0)
    g.add_argument("--t-max", type=float, default=1.0)
    g.add_argument("--fps", type=int, default=10)
    g.add_argument("--steps-per-unit", type=int, default=16)
    g.add_argument("--method", choices=("euler", "rk4"), default="rk4")
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("inspect", help="print checkpoint parameter statistics")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"{THREADS_ENV} must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (CliError, ValueError, ShapeError, CheckpointError, ImageFormatError,
            FileNotFoundError, KeyError, OSError) as exc:
        print(f"warpnode {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
