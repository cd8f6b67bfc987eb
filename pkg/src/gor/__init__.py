"""Group orthogonalization regularization on a small float64 autodiff core."""

from .grouping import ConfigError, GroupPartition, effective_groups, flatten_kernel, gather_group, make_partition
from .regularizer import PenaltyReport, RegConfig, Regularizer, group_penalty, layer_penalty, so_penalty, total_loss
from .tensor import ShapeError, Tensor, backward

__all__ = [
    "ConfigError", "GroupPartition", "PenaltyReport", "RegConfig", "Regularizer", "ShapeError", "Tensor",
    "backward", "effective_groups", "flatten_kernel", "gather_group", "group_penalty", "layer_penalty",
    "make_partition", "so_penalty", "total_loss",
]
__version__ = "0.1.0"
