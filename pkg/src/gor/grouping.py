"""Filter-matrix views of layer weights and their partition into groups.

Column indices are 0-based here: filter ``j`` is column ``j`` of the
``C_in x C_out`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, gather_columns, reshape, transpose

Mode = Literal["inter", "intra"]
MODES = ("inter", "intra")


class ConfigError(ValueError):
    """Invalid regularization / experiment configuration."""


@dataclass(frozen=True)
class GroupPartition:
    """Assignment of a layer's ``C_out`` filter columns to regularization groups.

    ``n_groups`` is the requested block count N and ``group_size`` is
    ``C_out // N``.  Inter mode yields N consecutive blocks of ``group_size``
    columns; intra mode yields ``group_size`` strided groups of N columns, one
    column taken from each block.
    """

    mode: str
    n_groups: int
    group_size: int
    groups: tuple[tuple[int, ...], ...]

    @property
    def c_out(self) -> int:
        return self.n_groups * self.group_size

    def index_array(self) -> np.ndarray:
        return np.array(self.groups, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.groups)


def effective_groups(requested_n: int, c_out: int) -> int:
    """Number of groups actually used for a layer with ``c_out`` filters.

    Caps the request at ``c_out // 4`` so that every group keeps at least four
    filters, then rounds down to a divisor of ``c_out``.
    """
    if requested_n < 1 or c_out < 1:
        raise ConfigError(f"need requested_n >= 1 and c_out >= 1, got {requested_n}, {c_out}")
    cap = min(requested_n, c_out // 4)
    for n in range(cap, 1, -1):
        if c_out % n == 0:
            return n
    return 1


def make_partition(mode: str, n: int, c_out: int) -> GroupPartition:
    if mode not in MODES:
        raise ConfigError(f"unknown partition mode {mode!r}; expected one of {MODES}")
    if n < 1 or c_out < 1 or c_out % n:
        raise ConfigError(f"{n} groups do not evenly divide {c_out} filters")
    size = c_out // n
    cols = np.arange(c_out).reshape(n, size)
    if mode == "intra":
        cols = cols.T
    groups = tuple(tuple(int(j) for j in row) for row in cols)
    return GroupPartition(mode=mode, n_groups=n, group_size=size, groups=groups)


def flatten_kernel(kernel: Tensor) -> Tensor:
    """``C_out x c x h x w`` kernel -> ``C_in x C_out`` filter matrix (``C_in = c*h*w``)."""
    if kernel.ndim != 4:
        raise ShapeError(f"flatten_kernel needs a rank-4 kernel, got shape {kernel.shape}")
    return transpose(reshape(kernel, (kernel.shape[0], -1)))


def unflatten_kernel(w: Tensor, kernel_shape: Sequence[int]) -> Tensor:
    c_out = kernel_shape[0]
    if w.ndim != 2 or w.shape[1] != c_out:
        raise ShapeError(f"cannot unflatten {w.shape} into kernel {tuple(kernel_shape)}")
    return reshape(transpose(w), kernel_shape)


def to_whcn_layout(kernel: np.ndarray) -> np.ndarray:
    """``C_out x c x h x w`` -> ``w x h x c x C_out`` storage."""
    return np.transpose(kernel, (3, 2, 1, 0))


def from_whcn_layout(kernel: np.ndarray) -> np.ndarray:
    return np.transpose(kernel, (3, 2, 1, 0))


def gather_group(w: Tensor, indices) -> Tensor:
    return gather_columns(w, indices)
