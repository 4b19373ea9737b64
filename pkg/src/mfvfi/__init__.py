"""Multi-flow video frame interpolation on a numpy autodiff engine."""

from .io import MfvfiError, load_weights, save_weights
from .kernels import BACKEND
from .losses import loss_charb, loss_lap, loss_total
from .metrics import psnr, ssim
from .model import ModelConfig, forward, init_weights, interpolate
from .multiflow import LevelFlows, MultiFlow, VisibilitySet, fuse, warp
from .tensor import ShapeError, Tensor, backward, grad, no_grad
from .trainer import TrainSettings, gen_synthetic_quintuplet, train_toy

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "LevelFlows", "MfvfiError", "ModelConfig", "MultiFlow", "ShapeError", "Tensor",
    "TrainSettings", "VisibilitySet", "backward", "forward", "fuse", "gen_synthetic_quintuplet",
    "grad", "init_weights", "interpolate", "load_weights", "loss_charb", "loss_lap", "loss_total",
    "no_grad", "psnr", "save_weights", "ssim", "train_toy", "warp",
]
