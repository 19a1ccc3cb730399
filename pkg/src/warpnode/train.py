"""Training loop: paired L2 regression or unpaired Wasserstein-GAN with gradient penalty.

Each outer step integrates the velocity net from the identity warp to
``t = 1``, warps the start frames and then either

* paired: minimizes mean squared error to the end frames, or
* unpaired: runs ``n_critic`` critic updates on the (detached) warped batch
  against real end frames, then one velocity update on ``-D(x_hat)``.

Both branches add the fold (JD) and out-of-grid (OG) penalties, evaluated on
the warp emitted after every integrator step.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .data import Dataset, batches
from .nn import Adam, Critic, VelocityNet, save_checkpoint
from .ode import integrate
from .tensor import NonFiniteError, Tape, Tensor
from .warp import jd_penalty, og_penalty, warp_image

__all__ = [
    "TrainConfig", "StepReport", "TrainResult", "l2_step", "gradient_penalty", "critic_step",
    "generator_step", "train", "build_models", "solve_and_warp",
]

MODES = ("paired_l2", "unpaired_gan")


@dataclass
class TrainConfig:
    mode: str = "paired_l2"
    n_critic: int = 5
    gp_lambda: float = 10.0
    w_jd: float = 1.0
    w_og: float = 1.0
    batch_size: int = 4
    ode_steps: int = 8
    ode_method: str = "rk4"
    lr_v: float = 0.0  # 0 selects the mode default
    lr_d: float = 1e-4
    betas_v: tuple = ()  # empty selects the mode default
    betas_d: tuple = (0.0, 0.9)
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    depth: int = 3
    base_width: int = 16
    critic_blocks: int = 4
    critic_width: int = 16
    early_stop: bool = False
    early_stop_window: int = 200
    early_stop_tol: float = 1e-5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.gp_lambda < 0:
            raise ValueError("gp_lambda must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ode_steps < 1:
            raise ValueError("ode_steps must be >= 1")
        if self.ode_method not in ("euler", "rk4"):
            raise ValueError(f"unknown ode_method {self.ode_method!r}")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        gan = self.mode == "unpaired_gan"
        if not self.lr_v:
            self.lr_v = 1e-4 if gan else 1e-3
        if not self.betas_v:
            self.betas_v = (0.0, 0.9) if gan else (0.9, 0.999)
        self.betas_v = tuple(float(b) for b in self.betas_v)
        self.betas_d = tuple(float(b) for b in self.betas_d)

    # flat key=value files mirror the field names
    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        kinds = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(kinds[key].default, raw, key)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _parse_value(default, raw: str, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from None


@dataclass
class StepReport:
    step: int
    losses: dict
    ms: float = 0.0

    def __post_init__(self):
        bad = [k for k, v in self.losses.items() if not np.isfinite(v)]
        if bad:
            raise NonFiniteError(f"step {self.step}: non-finite losses {bad}")

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "losses": self.losses, "ms": round(self.ms, 3)})


@dataclass
class TrainResult:
    net: VelocityNet
    critic: Critic | None
    reports: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def solve_and_warp(net, x0, cfg: TrainConfig):
    """Integrate to ``t = 1`` from the identity and warp ``x0``.

    Returns ``(x_hat, fields)`` where ``fields`` holds the warp after every
    integrator step; recorded on whatever tape is active.
    """
    fields = []
    phi = integrate(net, x0, 1.0, cfg.ode_steps, cfg.ode_method,
                    callback=lambda k, p: fields.append(p))
    return warp_image(x0, phi), fields


def _penalties(fields, cfg):
    jd = jd_penalty(fields)
    og = og_penalty(fields)
    return jd, og, T.add(T.scale(jd, cfg.w_jd), T.scale(og, cfg.w_og))


def _apply(opt: Adam, params, grads) -> None:
    for p, g in zip(params, grads):
        p.grad = g.data.copy()
    opt.step()


def l2_step(net: VelocityNet, opt: Adam, x0, x1, cfg: TrainConfig, step: int = 0) -> StepReport:
    """One paired update: mean squared error to ``x1`` plus weighted JD and OG."""
    if cfg.mode != "paired_l2":
        raise ValueError("l2_step needs mode 'paired_l2'")
    start = time.perf_counter()
    x0, x1 = Tensor(x0), Tensor(x1)
    params = net.parameters()
    with Tape():
        xhat, fields = solve_and_warp(net, x0, cfg)
        diff = T.sub(xhat, x1)
        l2 = T.mean(T.mul(diff, diff))
        jd, og, pen = _penalties(fields, cfg)
        loss = T.add(l2, pen)
        T.check_finite(loss)
        grads = T.grad(loss, params)
    _apply(opt, params, grads)
    losses = {"l2": l2.item(), "jd": jd.item(), "og": og.item(), "loss": loss.item()}
    return StepReport(step, losses, (time.perf_counter() - start) * 1e3)


def gradient_penalty(d: Callable, real, fake, rng: np.random.Generator) -> Tensor:
    """Mean over the batch of ``(||grad_x D(x_tilde)||_2 - 1)^2`` at random interpolates.

    Must run under an active tape; the result is differentiable w.r.t. the
    critic's parameters (second-order pass through the critic).
    """
    real = np.asarray(T.as_tensor(real).data)
    fake = np.asarray(T.as_tensor(fake).data)
    if real.shape != fake.shape:
        raise ValueError(f"real batch {real.shape} and fake batch {fake.shape} differ")
    if T.active_tape() is None:
        raise RuntimeError("gradient_penalty needs an active tape")
    n = real.shape[0]
    eps = rng.uniform(size=(n,) + (1,) * (real.ndim - 1))
    x_tilde = Tensor(eps * real + (1 - eps) * fake, requires_grad=True)
    score = T.sum(d(x_tilde))
    (g,) = T.grad(score, [x_tilde], create_graph=True)
    sq = T.sum(T.mul(g, g), axes=tuple(range(1, g.ndim)))
    dev = T.sub(T.sqrt(sq), 1.0)
    return T.mean(T.mul(dev, dev))


def critic_step(d: Critic, opt: Adam, real, fake, cfg: TrainConfig,
                rng: np.random.Generator) -> dict:
    """One critic update on ``-mean D(real) + mean D(fake) + lambda * GP``.

    ``fake`` is used by value only, so nothing flows back into the velocity net.
    """
    real = Tensor(T.as_tensor(real).data)
    fake = Tensor(T.as_tensor(fake).data)
    params = d.parameters()
    with Tape():
        s_real = T.mean(d(real))
        s_fake = T.mean(d(fake))
        gp = gradient_penalty(d, real, fake, rng)
        loss = T.add(T.sub(s_fake, s_real), T.scale(gp, cfg.gp_lambda))
        T.check_finite(loss, "critic loss")
        grads = T.grad(loss, params)
    _apply(opt, params, grads)
    return {"critic_loss": loss.item(), "gp": gp.item(), "w_est": s_real.item() - s_fake.item()}


def _generator_update(net, opt, d, xhat, fields, cfg, step, start) -> StepReport:
    params = net.parameters()
    gen = T.neg(T.mean(d(xhat)))
    jd, og, pen = _penalties(fields, cfg)
    loss = T.add(gen, pen)
    T.check_finite(loss, "generator loss")
    grads = T.grad(loss, params)
    _apply(opt, params, grads)
    losses = {"gen_loss": gen.item(), "jd": jd.item(), "og": og.item(), "loss": loss.item()}
    return StepReport(step, losses, (time.perf_counter() - start) * 1e3)


def generator_step(net: VelocityNet, opt: Adam, d: Critic, x0, cfg: TrainConfig,
                   step: int = 0) -> StepReport:
    """One velocity update on ``-mean D(x_hat) + w_jd JD + w_og OG``; D is left untouched."""
    start = time.perf_counter()
    x0 = Tensor(x0)
    with Tape():
        xhat, fields = solve_and_warp(net, x0, cfg)
        return _generator_update(net, opt, d, xhat, fields, cfg, step, start)


def build_models(cfg: TrainConfig, image_shape) -> tuple:
    h, w, c = image_shape
    seeds = np.random.SeedSequence(cfg.seed).generate_state(2)
    net = VelocityNet(c, depth=cfg.depth, base_width=cfg.base_width, seed=int(seeds[0]))
    critic = None
    if cfg.mode == "unpaired_gan":
        critic = Critic((h, w, c), blocks=cfg.critic_blocks, base_width=cfg.critic_width,
                        seed=int(seeds[1]))
    return net, critic


def _stream(ds: Dataset, cfg: TrainConfig) -> Iterator[tuple]:
    epoch = 0
    while True:
        yield from batches(ds, cfg.batch_size, cfg.seed, epoch)
        epoch += 1


def _save(out_dir: Path | None, name: str, net, critic, result: TrainResult):
    if out_dir is None:
        return
    params = {f"velocity.{k}": v for k, v in net.state_dict().items()}
    if critic is not None:
        params.update({f"critic.{k}": v for k, v in critic.state_dict().items()})
    path = out_dir / name
    save_checkpoint(path, params)
    result.checkpoints.append(path)


def _plateaued(history: list, window: int, tol: float) -> bool:
    if len(history) < 2 * window:
        return False
    prev = float(np.mean(history[-2 * window:-window]))
    now = float(np.mean(history[-window:]))
    return prev - now < tol


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None, log=None,
          stop_when: Callable[[StepReport], bool] | None = None,
          models: tuple | None = None) -> TrainResult:
    """Run the outer loop for ``cfg.max_steps`` steps (or until early stop).

    Writes ``model.wnode`` (always, even for zero steps), periodic
    ``model_<step>.wnode`` files and ``report.jsonl`` into ``out_dir`` when
    given. ``log`` is an optional text stream receiving the same JSON lines.
    """
    want = "paired" if cfg.mode == "paired_l2" else "unpaired"
    if dataset.mode != want:
        raise ValueError(f"mode {cfg.mode!r} needs a {want} dataset, got {dataset.mode}")
    image_shape = dataset.x0.shape[1:]
    net, critic = models if models is not None else build_models(cfg, image_shape)
    opt_v = Adam(net.parameters(), cfg.lr_v, cfg.betas_v)
    opt_d = Adam(critic.parameters(), cfg.lr_d, cfg.betas_d) if critic is not None else None
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])

    result = TrainResult(net, critic)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(cfg.to_text())
    report_file = open(out_dir / "report.jsonl", "w") if out_dir is not None else None
    history = []
    stream = _stream(dataset, cfg) if cfg.max_steps else iter(())
    try:
        for step in range(cfg.max_steps):
            x0b, x1b = next(stream)
            try:
                if critic is None:
                    rep = l2_step(net, opt_v, x0b, x1b, cfg, step)
                    primary = rep.losses["l2"]
                else:
                    rep = _gan_step(net, critic, opt_v, opt_d, x0b, x1b, cfg, rng, step)
                    primary = rep.losses["gen_loss"]
            except NonFiniteError as exc:
                raise NonFiniteError(f"step {step}: {exc}") from None
            result.reports.append(rep)
            line = rep.to_json()
            if report_file is not None:
                report_file.write(line + "\n")
                report_file.flush()
            if log is not None:
                print(line, file=log)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                _save(out_dir, f"model_{step + 1:06d}.wnode", net, critic, result)
            history.append(primary)
            if stop_when is not None and stop_when(rep):
                break
            if cfg.early_stop and _plateaued(history, cfg.early_stop_window, cfg.early_stop_tol):
                break
    finally:
        if report_file is not None:
            report_file.close()
    _save(out_dir, "model.wnode", net, critic, result)
    return result


def _gan_step(net, critic, opt_v, opt_d, x0b, x1b, cfg, rng, step) -> StepReport:
    start = time.perf_counter()
    x0 = Tensor(x0b)
    gen_tape = Tape()
    with gen_tape:
        xhat, fields = solve_and_warp(net, x0, cfg)
    fake = xhat.data
    crit = [critic_step(critic, opt_d, x1b, fake, cfg, rng) for _ in range(cfg.n_critic)]
    with gen_tape:
        rep = _generator_update(net, opt_v, critic, xhat, fields, cfg, step, start)
    for key in ("critic_loss", "gp", "w_est"):
        rep.losses[key] = float(np.mean([c[key] for c in crit]))
    rep.losses["n_critic"] = float(len(crit))
    return rep
