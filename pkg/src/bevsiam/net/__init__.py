from .tensor import (
    Tensor,
    conv2d,
    grad_enabled,
    linear,
    maxpool2d,
    no_grad,
    point_shared_mlp,
    segment_max,
    take_flat,
    take_rows,
    xcorr_depthwise,
)
from .losses import bce, chamfer_loss, cosine_similarity, smooth_l1
from .optim import ParamStore, PlateauSchedule, sgd_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "Tensor",
    "conv2d",
    "grad_enabled",
    "linear",
    "no_grad",
    "maxpool2d",
    "point_shared_mlp",
    "segment_max",
    "take_flat",
    "take_rows",
    "xcorr_depthwise",
    "bce",
    "chamfer_loss",
    "cosine_similarity",
    "smooth_l1",
    "ParamStore",
    "PlateauSchedule",
    "sgd_step",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]
