"""Composable layers and the small reference models used for experiments.

Parameters live in a flat store keyed ``"<layer>.<param>"``.  Weight layouts:

* linear ``weight``: ``d_in x d_out`` (columns are output neurons), ``bias``: ``d_out``
* conv2d ``weight``: ``C_out x c x h x w``, ``bias``: ``C_out``
* groupnorm ``gamma`` / ``beta``: ``C``
* adapter ``base``: ``d_out x d_in`` (frozen), ``down``: ``r x d_in``, ``up``: ``d_out x r``
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .grouping import ConfigError, flatten_kernel
from .tensor import (
    ShapeError,
    Tensor,
    add,
    conv2d,
    global_avg_pool,
    group_norm,
    matmul,
    relu,
    reshape,
    scalar_mul,
    transpose,
)

KINDS = ("linear", "conv2d", "groupnorm", "relu", "global_avg_pool", "adapter")
GN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_dim: int = 0
    out_dim: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    groups: int = 0
    rank: int = 0
    scale: float = 1.0
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "groupnorm" and (self.groups < 1 or self.in_dim % self.groups):
            raise ConfigError(f"{self.name}: {self.groups} GN groups do not divide {self.in_dim} channels")
        if self.kind == "adapter" and not 1 <= self.rank <= min(self.in_dim, self.out_dim):
            raise ConfigError(f"{self.name}: adapter rank {self.rank} must be in [1, min(d_in, d_out)]")


def linear(name, d_in, d_out, trainable=True) -> LayerSpec:
    return LayerSpec("linear", name, in_dim=d_in, out_dim=d_out, trainable=trainable)


def conv(name, c_in, c_out, k=3, stride=1, padding=1) -> LayerSpec:
    return LayerSpec("conv2d", name, in_dim=c_in, out_dim=c_out, kernel_size=k, stride=stride, padding=padding)


def gn(name, channels, groups) -> LayerSpec:
    return LayerSpec("groupnorm", name, in_dim=channels, out_dim=channels, groups=groups)


def adapter(name, d_in, d_out, rank, scale=1.0) -> LayerSpec:
    return LayerSpec("adapter", name, in_dim=d_in, out_dim=d_out, rank=rank, scale=scale)


@dataclass
class AdapterLayer:
    """Frozen base ``W0`` plus a trainable low-rank residual ``up @ down``."""

    base: Tensor
    down: Tensor
    up: Tensor
    scale: float = 1.0

    def __post_init__(self):
        d_out, d_in = self.base.shape
        r = self.down.shape[0]
        if self.down.shape != (r, d_in) or self.up.shape != (d_out, r):
            raise ShapeError(f"adapter shapes disagree: base {self.base.shape}, "
                             f"down {self.down.shape}, up {self.up.shape}")
        if r > min(d_in, d_out):
            raise ShapeError(f"adapter rank {r} exceeds min(d_in, d_out) = {min(d_in, d_out)}")


def adapter_forward(layer: AdapterLayer, x: Tensor) -> Tensor:
    """``W0 x + scale * up (down x)`` for a batch of row vectors ``x``."""
    if x.ndim != 2 or x.shape[1] != layer.base.shape[1]:
        raise ShapeError(f"adapter expects B x {layer.base.shape[1]} input, got {x.shape}")
    frozen = matmul(x, transpose(layer.base))
    residual = matmul(matmul(x, transpose(layer.down)), transpose(layer.up))
    return add(frozen, scalar_mul(residual, layer.scale))


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """An ordered chain of layers with its parameter store."""

    def __init__(self, name: str, layers: Iterable[LayerSpec], input_shape: tuple[int, ...],
                 seed: int = 0):
        self.name = name
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"layer names must be unique, got {names}")
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        self.output_shape = self._check_shapes()
        self._init_params(np.random.default_rng(seed))

    # -- construction ------------------------------------------------------

    def _check_shapes(self) -> tuple[int, ...]:
        shape = self.input_shape
        for layer in self.layers:
            k = layer.kind
            if k in ("linear", "adapter"):
                flat = int(np.prod(shape))
                if flat != layer.in_dim:
                    raise ShapeError(f"{layer.name}: expects {layer.in_dim} features, gets {shape}")
                shape = (layer.out_dim,)
            elif k == "conv2d":
                if len(shape) != 3 or shape[0] != layer.in_dim:
                    raise ShapeError(f"{layer.name}: expects {layer.in_dim} x H x W input, gets {shape}")
                c, h, w = shape
                p, s, ks = layer.padding, layer.stride, layer.kernel_size
                if h + 2 * p < ks or w + 2 * p < ks:
                    raise ShapeError(f"{layer.name}: kernel {ks} larger than padded input {shape}")
                shape = (layer.out_dim, (h + 2 * p - ks) // s + 1, (w + 2 * p - ks) // s + 1)
            elif k == "groupnorm":
                if shape[0] != layer.in_dim:
                    raise ShapeError(f"{layer.name}: expects {layer.in_dim} channels, gets {shape}")
            elif k == "global_avg_pool":
                if len(shape) != 3:
                    raise ShapeError(f"{layer.name}: expects C x H x W input, gets {shape}")
                shape = (shape[0],)
        return shape

    def _init_params(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            n = layer.name
            if layer.kind == "linear":
                self._add(f"{n}.weight", _kaiming_uniform(rng, (layer.in_dim, layer.out_dim), layer.in_dim),
                          layer.trainable)
                self._add(f"{n}.bias", np.zeros(layer.out_dim), layer.trainable)
            elif layer.kind == "conv2d":
                ks = layer.kernel_size
                fan_in = layer.in_dim * ks * ks
                self._add(f"{n}.weight", _kaiming_uniform(rng, (layer.out_dim, layer.in_dim, ks, ks), fan_in),
                          layer.trainable)
                self._add(f"{n}.bias", np.zeros(layer.out_dim), layer.trainable)
            elif layer.kind == "groupnorm":
                self._add(f"{n}.gamma", np.ones(layer.in_dim), layer.trainable)
                self._add(f"{n}.beta", np.zeros(layer.in_dim), layer.trainable)
            elif layer.kind == "adapter":
                d_in, d_out, r = layer.in_dim, layer.out_dim, layer.rank
                self._add(f"{n}.base", _kaiming_uniform(rng, (d_out, d_in), d_in), False)
                bound = 1.0 / math.sqrt(d_in)
                self._add(f"{n}.down", rng.uniform(-bound, bound, size=(r, d_in)), layer.trainable)
                self._add(f"{n}.up", np.zeros((d_out, r)), layer.trainable)

    def _add(self, key: str, value: np.ndarray, trainable: bool) -> None:
        self.params[key] = Tensor(value, requires_grad=trainable)
        if not trainable:
            self.frozen.add(key)

    # -- parameter access --------------------------------------------------

    def set_param(self, key: str, value: np.ndarray) -> None:
        old = self.params[key]
        if value.shape != old.shape:
            raise ShapeError(f"{key}: expected shape {old.shape}, got {value.shape}")
        self.params[key] = Tensor(value, requires_grad=key not in self.frozen)

    def trainable_keys(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]

    def n_trainable(self) -> int:
        return sum(self.params[k].size for k in self.trainable_keys())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ShapeError(f"parameter names disagree with model {self.name!r}: "
                             f"missing {missing}, unexpected {extra}")
        for k, v in state.items():
            self.set_param(k, np.asarray(v, dtype=np.float64))

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def adapter_layer(self, layer: LayerSpec) -> AdapterLayer:
        p = self.params
        n = layer.name
        return AdapterLayer(p[f"{n}.base"], p[f"{n}.down"], p[f"{n}.up"], layer.scale)

    # -- computation -------------------------------------------------------

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"model {self.name!r} expects B x {self.input_shape} input, got {x.shape}")
        p = self.params
        for layer in self.layers:
            n, k = layer.name, layer.kind
            if k in ("linear", "adapter") and x.ndim > 2:
                x = reshape(x, (x.shape[0], -1))
            if k == "linear":
                x = add(matmul(x, p[f"{n}.weight"]), p[f"{n}.bias"])
            elif k == "conv2d":
                x = conv2d(x, p[f"{n}.weight"], layer.stride, layer.padding)
                x = add(x, reshape(p[f"{n}.bias"], (1, layer.out_dim, 1, 1)))
            elif k == "groupnorm":
                x = group_norm(x, layer.groups, p[f"{n}.gamma"], p[f"{n}.beta"], GN_EPS)
            elif k == "relu":
                x = relu(x)
            elif k == "global_avg_pool":
                x = global_avg_pool(x)
            elif k == "adapter":
                x = adapter_forward(self.adapter_layer(layer), x)
        return x

    __call__ = forward

    def regularized_weight_view(self, layer: LayerSpec) -> Tensor | None:
        """The layer's ``C_in x C_out`` filter matrix, or None if it has none.

        Adapters expose only their up matrix (``C_in = r``, ``C_out = d_out``).
        """
        p = self.params
        if layer.kind == "conv2d":
            return flatten_kernel(p[f"{layer.name}.weight"])
        if layer.kind == "linear":
            return p[f"{layer.name}.weight"]
        if layer.kind == "adapter":
            return transpose(p[f"{layer.name}.up"])
        return None

    def following_groupnorm(self, layer: LayerSpec) -> LayerSpec | None:
        """The first GN layer after ``layer`` that normalizes its output channels."""
        idx = self.layers.index(layer)
        for nxt in self.layers[idx + 1:]:
            if nxt.kind == "groupnorm":
                return nxt if nxt.in_dim == layer.out_dim else None
            if nxt.kind not in ("relu",):
                return None
        return None


# ---------------------------------------------------------------------------
# reference catalog


def conv_gn_small(n_classes: int = 3, image_size: int = 8, seed: int = 0) -> Model:
    layers = [
        conv("conv1", 3, 16), gn("gn1", 16, 4), LayerSpec("relu", "relu1"),
        conv("conv2", 16, 32), gn("gn2", 32, 8), LayerSpec("relu", "relu2"),
        LayerSpec("global_avg_pool", "pool"),
        linear("fc", 32, n_classes),
    ]
    return Model("conv-gn-small", layers, (3, image_size, image_size), seed)


def mlp_small(n_classes: int = 3, seed: int = 0) -> Model:
    layers = [linear("fc1", 48, 64), LayerSpec("relu", "relu1"), linear("fc2", 64, n_classes)]
    return Model("mlp-small", layers, (3, 4, 4), seed)


def adapter_probe(n_classes: int = 3, width: int = 32, rank: int = 4, seed: int = 0) -> Model:
    layers = [adapter("adapter", width, width, rank), LayerSpec("relu", "relu1"),
              linear("head", width, n_classes)]
    return Model("adapter-probe", layers, (width,), seed)


CATALOG: dict[str, Callable[..., Model]] = {
    "conv-gn-small": conv_gn_small,
    "mlp-small": mlp_small,
    "adapter-probe": adapter_probe,
}


def build_model(name: str, n_classes: int = 3, seed: int = 0, **options) -> Model:
    try:
        factory = CATALOG[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; available: {sorted(CATALOG)}") from None
    return factory(n_classes=n_classes, seed=seed, **options)


def build_reference_models(n_classes: int = 3, seed: int = 0) -> dict[str, Model]:
    return {name: build_model(name, n_classes, seed) for name in CATALOG}


def model_from_state(name: str, state: dict[str, np.ndarray]) -> Model:
    """Rebuild a catalog model whose sizes match a saved parameter store, then load it."""
    try:
        if name == "conv-gn-small":
            model = conv_gn_small(n_classes=state["fc.bias"].shape[0])
        elif name == "mlp-small":
            model = mlp_small(n_classes=state["fc2.bias"].shape[0])
        elif name == "adapter-probe":
            model = adapter_probe(n_classes=state["head.bias"].shape[0], width=state["adapter.base"].shape[1],
                                  rank=state["adapter.down"].shape[0])
        else:
            raise ConfigError(f"unknown model {name!r}; available: {sorted(CATALOG)}")
    except KeyError as exc:
        raise ShapeError(f"parameter {exc.args[0]!r} missing for model {name!r}") from None
    model.load_state(state)
    return model
