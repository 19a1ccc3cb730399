"""Image-to-animation by integrating a learned stationary velocity field.

A U-Net velocity field ``V(phi, x0)`` is integrated from the identity warp
with a fixed-step ODE solver; warping the start frame with the resulting
field at time ``t`` gives animation frame ``t``. Everything, including the
reverse-mode autodiff engine, is plain numpy.
"""
from . import data, gif, imageio, nn, ode, tensor, train, warp
from .data import Dataset, synth_shift, synth_two_class
from .nn import Critic, VelocityNet, load_checkpoint, save_checkpoint
from .ode import integrate, trajectory, warp_at
from .tensor import Tape, Tensor
from .train import TrainConfig
from .warp import jd_penalty, og_penalty, warp_image

__version__ = "0.1.0"

__all__ = [
    "data", "gif", "imageio", "nn", "ode", "tensor", "train", "warp",
    "Dataset", "synth_shift", "synth_two_class", "Critic", "VelocityNet",
    "load_checkpoint", "save_checkpoint", "integrate", "trajectory", "warp_at",
    "Tape", "Tensor", "TrainConfig", "jd_penalty", "og_penalty", "warp_image",
]
