"""Re-parameterizable lightweight image enhancement on a small numpy engine."""

from .network import MobileIENet, ModelConfig, fuse_network, param_count
from .reparam import MBRConvTrain, FusedConv, fuse_mbrconv, iwo_freeze
from .training import Adam, LVWConfig, TrainConfig, lvw_loss, train

__version__ = "0.1.0"

__all__ = [
    "MobileIENet",
    "ModelConfig",
    "fuse_network",
    "param_count",
    "MBRConvTrain",
    "FusedConv",
    "fuse_mbrconv",
    "iwo_freeze",
    "Adam",
    "LVWConfig",
    "TrainConfig",
    "lvw_loss",
    "train",
]
