"""Desk-scale 3D segmentation stack with a tape-based autodiff core.

A from-scratch implementation: reverse-mode autodiff over numpy arrays,
a selective state-space token mixer, squeeze/reinforce residual blocks,
spectral gating via a hand-rolled radix-2 FFT, and a four-stage
encoder/decoder — with compiled kernels (Cython) and a pure-numpy fallback
chosen at import time (``EMNET_KERNELS=pure|native|auto``).
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, DataError, EmnetError,
                     ShapeError, TrainError)
from .kernels import AVAILABLE as kernel_backends
from .kernels import BACKEND as kernel_backend
from .kernels import use_backend
from .metrics import (dsc, hausdorff, hausdorff95, mean_foreground_dsc,
                      per_class_dsc)
from .network import (PRESETS, Network, NetworkConfig, build, count_flops,
                      count_params, desk_config, full_config, make_config)
from .phantom import PhantomSpec, gen_dataset, gen_phantom
from .precision import set_precision
from .tensor import Module, Tensor, backward, no_grad, param
from .train import (TrainConfig, dice_ce_loss, evaluate, normalize_volume,
                    predict, sgd_step, sliding_window_infer, train_loop,
                    window_origins)
from .volio import (load_checkpoint, load_network, load_volume,
                    save_checkpoint, save_volume)

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "EmnetError",
    "Module", "Network", "NetworkConfig", "PRESETS", "PhantomSpec",
    "ShapeError", "Tensor", "TrainConfig", "TrainError", "backward", "build",
    "count_flops", "count_params", "desk_config", "dice_ce_loss", "dsc",
    "evaluate", "gen_dataset", "gen_phantom", "hausdorff", "hausdorff95",
    "kernel_backend", "kernel_backends", "load_checkpoint", "load_network",
    "load_volume", "make_config", "mean_foreground_dsc", "no_grad",
    "full_config", "normalize_volume", "param", "per_class_dsc", "predict",
    "save_checkpoint", "save_volume", "set_precision", "sgd_step",
    "sliding_window_infer", "train_loop", "use_backend", "window_origins",
]
