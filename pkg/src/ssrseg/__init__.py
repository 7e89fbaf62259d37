"""Dual super-resolution lesion segmentation on a small numpy autodiff engine."""

from .errors import ConfigError, ContractError, FormatError, LoadError, OracleError, SSRError
from .losses import LossWeights, dice_loss, fa_loss, metrics, sa_loss, total_loss, weighted_mse_loss
from .model import ForwardBundle, ModelConfig, SSRNet, build_model, forward, inference, sdc_forward
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "ForwardBundle",
    "FormatError",
    "LoadError",
    "LossWeights",
    "ModelConfig",
    "OracleError",
    "SSRError",
    "SSRNet",
    "Tensor",
    "backward",
    "build_model",
    "dice_loss",
    "fa_loss",
    "forward",
    "inference",
    "metrics",
    "no_grad",
    "sa_loss",
    "sdc_forward",
    "total_loss",
    "weighted_mse_loss",
]
