"""Deterministic desk-scale training with synthetic data."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .grouping import ConfigError
from .nn import Model, build_model
from .regularizer import PenaltyReport, RegConfig, Regularizer
from .tensor import ShapeError, Tensor, backward, scalar_mul, add, softmax_cross_entropy

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "loss", "task_loss", "penalty", "acc", "mean_dev")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 3
    samples_per_class: int = 200
    image_size: int = 8
    sigma: float = 0.15

    def __post_init__(self):
        if self.n_classes < 2 or self.samples_per_class < 5 or self.image_size < 1:
            raise ConfigError(f"invalid dataset spec {self}")
        if self.sigma < 0:
            raise ConfigError("noise sigma must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    model: str = "conv-gn-small"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    task_weight: float = 1.0
    reg: RegConfig = field(default_factory=RegConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError(f"invalid optimizer settings lr={self.lr}, momentum={self.momentum}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("reg", "data")}
        d["reg"] = self.reg.to_dict()
        d["data"] = asdict(self.data)
        return d


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def make_synthetic_dataset(spec: DatasetSpec, seed: int, input_shape: Sequence[int] | None = None) -> Dataset:
    """One random template in [0, 1] per class; samples are template + N(0, sigma^2) noise.

    Each class is split 80/20 into train/test, then both sets are shuffled.
    """
    shape = tuple(input_shape) if input_shape is not None else (3, spec.image_size, spec.image_size)
    rng = np.random.default_rng([seed, 7])
    templates = rng.uniform(0.0, 1.0, size=(spec.n_classes,) + shape)
    n_train = int(round(0.8 * spec.samples_per_class))
    xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
    for c in range(spec.n_classes):
        noise = rng.normal(0.0, 1.0, size=(spec.samples_per_class,) + shape) * spec.sigma
        x = templates[c] + noise
        xs_tr.append(x[:n_train])
        xs_te.append(x[n_train:])
        ys_tr.append(np.full(n_train, c))
        ys_te.append(np.full(spec.samples_per_class - n_train, c))
    x_tr, y_tr = np.concatenate(xs_tr), np.concatenate(ys_tr)
    x_te, y_te = np.concatenate(xs_te), np.concatenate(ys_te)
    p_tr, p_te = rng.permutation(len(y_tr)), rng.permutation(len(y_te))
    return Dataset(x_tr[p_tr], y_tr[p_tr], x_te[p_te], y_te[p_te])


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], lr: float, momentum: float,
             velocity: Sequence[np.ndarray]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Heavy-ball SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``.  Returns new arrays."""
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity, strict=True):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"sgd_step: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v = momentum * v + g
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    logits = model(Tensor(x)).data
    return float(np.mean(np.argmax(logits, axis=1) == y))


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    task_loss: float
    penalty: float
    acc: float
    mean_dev: float
    layer_mean_dev: dict[str, float]

    def csv_row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, c))) for c in CSV_COLUMNS[1:]]


@dataclass
class RunReport:
    config: dict
    init_acc: float
    epochs: list[EpochMetrics] = field(default_factory=list)
    steps: list[tuple[float, float, float]] = field(default_factory=list)
    final_penalty: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    @property
    def final(self) -> EpochMetrics:
        return self.epochs[-1]

    def to_dict(self, include_steps: bool = False) -> dict:
        out = {
            "config": self.config,
            "init_acc": self.init_acc,
            "epochs": [asdict(e) for e in self.epochs],
            "final": {"acc": self.final.acc, "penalty": self.final.penalty, "mean_dev": self.final.mean_dev,
                      "penalty_report": self.final_penalty},
            "timing": {"wall_clock_seconds": self.wall_clock_seconds},
        }
        if include_steps:
            out["steps"] = [list(s) for s in self.steps]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for e in self.epochs:
            writer.writerow(e.csv_row())
        return buf.getvalue()


def _model_options(cfg: TrainConfig) -> dict:
    return {"image_size": cfg.data.image_size} if cfg.model == "conv-gn-small" else {}


def build_for(cfg: TrainConfig) -> Model:
    return build_model(cfg.model, cfg.data.n_classes, seed=cfg.seed, **_model_options(cfg))


def run_training(cfg: TrainConfig) -> tuple[RunReport, Model]:
    """Train ``cfg.model`` on the synthetic task; returns the report and trained model."""
    t0 = time.perf_counter()
    model = build_for(cfg)
    data = make_synthetic_dataset(cfg.data, cfg.seed, model.input_shape)
    reg = Regularizer(model, cfg.reg)
    lam = cfg.reg.lam
    keys = model.trainable_keys()
    velocity = [np.zeros(model.params[k].shape) for k in keys]
    shuffle_rng = np.random.default_rng([cfg.seed, 11])
    report = RunReport(config=cfg.to_dict(), init_acc=accuracy(model, data.x_test, data.y_test))

    n = len(data.y_train)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(2)
        n_steps = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            task = softmax_cross_entropy(model(Tensor(data.x_train[idx])), data.y_train[idx])
            objective = scalar_mul(task, cfg.task_weight) if cfg.task_weight != 1.0 else task
            pen_value = 0.0
            if lam > 0:
                pen, pen_report = reg.penalty()
                if pen is not None:
                    objective = add(objective, scalar_mul(pen, lam))
                    pen_value = pen_report.total
            loss = objective.item()
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            backward(objective)
            new_p, velocity = sgd_step([model.params[k].data for k in keys],
                                       [model.params[k].grad for k in keys], cfg.lr, cfg.momentum, velocity)
            for k, p in zip(keys, new_p):
                model.set_param(k, p)
            report.steps.append((loss, task.item(), pen_value))
            sums += (loss, task.item())
            n_steps += 1

        _, diag = reg.penalty()
        metrics = EpochMetrics(
            epoch=epoch,
            loss=float(sums[0] / n_steps),
            task_loss=float(sums[1] / n_steps),
            penalty=diag.total,
            acc=accuracy(model, data.x_test, data.y_test),
            mean_dev=diag.mean_group_deviation(),
            layer_mean_dev={name: layer.mean for name, layer in diag.layers.items()},
        )
        report.epochs.append(metrics)
        log.info("epoch %d loss %.4f acc %.3f penalty %.4g", epoch, metrics.loss, metrics.acc, metrics.penalty)
        report.final_penalty = diag.to_dict()

    report.wall_clock_seconds = time.perf_counter() - t0
    return report, model


def train(cfg: TrainConfig) -> RunReport:
    return run_training(cfg)[0]


@dataclass
class OrthoReport:
    """Penalty report plus min/max Gram eigenvalues of every group."""

    penalty: PenaltyReport
    eigen: dict[str, list[tuple[float, float]]]

    def to_dict(self) -> dict:
        out = self.penalty.to_dict()
        for name, layer in out["layers"].items():
            layer["eigen"] = [{"min": lo, "max": hi} for lo, hi in self.eigen[name]]
        return out


def ortho_report(model: Model, config: RegConfig) -> OrthoReport:
    reg = Regularizer(model, config)
    _, report = reg.penalty()
    eigen: dict[str, list[tuple[float, float]]] = {}
    for name, part in reg.partitions.items():
        w = model.regularized_weight_view(model.layer(name)).data
        vals = []
        for group in part.groups:
            wg = w[:, list(group)]
            ev = np.linalg.eigvalsh(wg.T @ wg)
            vals.append((float(ev[0]), float(ev[-1])))
        eigen[name] = vals
    return OrthoReport(report, eigen)
