"""Soft-orthogonality (SO) and group-orthogonality (GOR) penalties.

For a filter matrix ``W`` (``C_in x C_out``) and a partition of its columns,
the layer penalty is ``sum_i ||W_i^T W_i - I||_F^2`` over groups ``W_i``; a
single group covering every column is the whole-layer SO penalty.  The total
training objective adds ``lambda`` times the sum of layer penalties over every
in-scope layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence, Union

import numpy as np

from .grouping import MODES, ConfigError, GroupPartition, effective_groups, make_partition
from .tensor import (
    ShapeError,
    Tensor,
    add,
    batch_frobenius_sq,
    frobenius_sq,
    gather_columns,
    gram,
    scalar_mul,
    sub_identity,
    tensor_sum,
)

if TYPE_CHECKING:
    from .nn import LayerSpec, Model

SCOPES = ("all-conv", "adapter-up-only", "all")
DEFAULT_LAMBDA = 1e-2

Scope = Union[str, Sequence[str]]


@dataclass(frozen=True)
class RegConfig:
    """Regularization strength, requested group count, partition mode and layer scope.

    ``scope`` is one of ``"all-conv"``, ``"adapter-up-only"``, ``"all"`` or an
    explicit sequence of layer names.  Typical strengths are 1e-2 for training
    classifiers from scratch, 1e-4 for ViT adapters and 1e-5/1e-6 for diffusion
    LoRA fine-tuning.
    """

    lam: float = DEFAULT_LAMBDA
    requested_n: int = 32
    mode: str = "inter"
    scope: Scope = "all-conv"

    def __post_init__(self):
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ConfigError(f"lambda must be a finite non-negative number, got {self.lam}")
        if int(self.requested_n) != self.requested_n or self.requested_n < 1:
            raise ConfigError(f"requested group count must be a positive integer, got {self.requested_n}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if isinstance(self.scope, str):
            if self.scope not in SCOPES:
                raise ConfigError(f"unknown scope {self.scope!r}; expected one of {SCOPES} or a list of names")
        else:
            object.__setattr__(self, "scope", tuple(self.scope))

    def includes(self, layer: LayerSpec) -> bool:
        if not isinstance(self.scope, str):
            return layer.name in self.scope
        if self.scope == "all-conv":
            return layer.kind == "conv2d"
        if self.scope == "adapter-up-only":
            return layer.kind == "adapter"
        return layer.kind in ("conv2d", "linear", "adapter")

    def to_dict(self) -> dict:
        scope = self.scope if isinstance(self.scope, str) else list(self.scope)
        return {"lambda": self.lam, "requested_n": self.requested_n, "mode": self.mode, "scope": scope}


@dataclass
class LayerDeviation:
    groups: list[float]
    partition: GroupPartition | None = None

    @property
    def sum(self) -> float:
        return float(np.sum(self.groups))

    @property
    def mean(self) -> float:
        return float(np.mean(self.groups))


@dataclass
class PenaltyReport:
    """Per-layer, per-group deviations ``||W_i^T W_i - I||_F^2`` and their total."""

    lam: float
    layers: dict[str, LayerDeviation] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def total(self) -> float:
        return float(sum(layer.sum for layer in self.layers.values()))

    def mean_group_deviation(self) -> float:
        """Mean over every group of every reported layer (nan if none)."""
        devs = [d for layer in self.layers.values() for d in layer.groups]
        return float(np.mean(devs)) if devs else float("nan")

    def to_dict(self) -> dict:
        out = {
            "layers": {name: {"groups": list(map(float, layer.groups)), "sum": layer.sum}
                       for name, layer in self.layers.items()},
            "total": self.total,
            "lambda": self.lam,
        }
        if self.warnings:
            out["warnings"] = list(self.warnings)
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def group_penalty(w_group: Tensor) -> Tensor:
    """``||W^T W - I||_F^2`` for one group of filters stacked as columns."""
    if w_group.ndim != 2 or w_group.size == 0:
        raise ShapeError(f"group_penalty needs a non-empty C_in x g matrix, got shape {w_group.shape}")
    return frobenius_sq(sub_identity(gram(w_group)))


def group_penalty_grad(w: np.ndarray) -> np.ndarray:
    """Closed-form gradient ``4 W (W^T W - I)`` of :func:`group_penalty`."""
    return 4.0 * w @ (w.T @ w - np.eye(w.shape[1]))


def layer_penalty(w: Tensor, partition: GroupPartition) -> tuple[Tensor, list[float]]:
    """Sum of group penalties over a partition of ``w``'s columns.

    All groups are gathered into one ``k x C_in x g`` stack and their Gram
    matrices formed in a single batched product.  The per-group deviations come
    from the same forward pass.
    """
    if w.ndim != 2:
        raise ShapeError(f"layer_penalty needs a C_in x C_out matrix, got shape {w.shape}")
    if partition.c_out != w.shape[1]:
        raise ShapeError(f"partition covers {partition.c_out} columns but the weight has {w.shape[1]}")
    stack = gather_columns(w, partition.index_array())
    per_group = batch_frobenius_sq(sub_identity(gram(stack)))
    return tensor_sum(per_group), [float(v) for v in per_group.data]


def so_penalty(w: Tensor) -> Tensor:
    """Whole-layer soft orthogonality: one group holding every filter."""
    if w.ndim != 2:
        raise ShapeError(f"so_penalty needs a C_in x C_out matrix, got shape {w.shape}")
    return layer_penalty(w, make_partition("inter", 1, w.shape[1]))[0]


class Regularizer:
    """GOR bound to a model: in-scope layers and their partitions, frozen at construction."""

    def __init__(self, model: Model, config: RegConfig):
        self.model = model
        self.config = config
        self.partitions: dict[str, GroupPartition] = {}
        self.warnings: list[str] = []
        for layer in model.layers:
            if not config.includes(layer):
                continue
            view = model.regularized_weight_view(layer)
            if view is None:
                continue
            c_out = view.shape[1]
            n = effective_groups(config.requested_n, c_out)
            part = make_partition(config.mode, n, c_out)
            self.partitions[layer.name] = part
            if min(len(g) for g in part.groups) == 1:
                self.warnings.append(f"{layer.name}: groups of size 1 only normalize filter norms")
        if not self.partitions:
            self.warnings.append(f"scope {config.to_dict()['scope']!r} matches no regularizable layer")

    def penalty(self) -> tuple[Tensor | None, PenaltyReport]:
        """Unweighted penalty sum over in-scope layers, plus its report."""
        report = PenaltyReport(lam=self.config.lam, warnings=list(self.warnings))
        total: Tensor | None = None
        for layer in self.model.layers:
            part = self.partitions.get(layer.name)
            if part is None:
                continue
            value, groups = layer_penalty(self.model.regularized_weight_view(layer), part)
            report.layers[layer.name] = LayerDeviation(groups, part)
            total = value if total is None else add(total, value)
        return total, report

    def total_loss(self, task_loss: Tensor) -> tuple[Tensor, PenaltyReport]:
        if self.config.lam == 0:
            report = PenaltyReport(lam=0.0, warnings=list(self.warnings) + ["regularizer disabled (lambda = 0)"])
            return task_loss, report
        pen, report = self.penalty()
        if pen is None:
            return task_loss, report
        return add(task_loss, scalar_mul(pen, self.config.lam)), report


def total_loss(task_loss: Tensor, model: Model, config: RegConfig) -> tuple[Tensor, PenaltyReport]:
    """``task_loss + lambda * sum_layers sum_groups ||W_i^T W_i - I||_F^2``."""
    return Regularizer(model, config).total_loss(task_loss)



def threaded_layer_penalty(w: np.ndarray, partition: GroupPartition,
                           workers: int = 1) -> tuple[float, np.ndarray]:
    """Layer penalty and its gradient with one task (and one tape) per group.

    Values are reduced and gradients scattered in group order, so the result
    does not depend on scheduling.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .tensor import backward

    def one(group):
        leaf = Tensor(w[:, list(group)], requires_grad=True)
        value = group_penalty(leaf)
        backward(value)
        return value.item(), leaf.grad

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, partition.groups))
    else:
        parts = [one(g) for g in partition.groups]
    grad = np.zeros_like(w)
    total = 0.0
    for group, (value, g) in zip(partition.groups, parts):
        total += value
        grad[:, list(group)] += g
    return total, grad
