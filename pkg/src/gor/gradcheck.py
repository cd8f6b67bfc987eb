"""Central finite-difference checks of every differentiable path."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .grouping import flatten_kernel, make_partition
from .nn import AdapterLayer, adapter_forward
from .regularizer import group_penalty, group_penalty_grad, layer_penalty

Case = tuple[str, Callable[..., T.Tensor], dict[str, np.ndarray]]


@dataclass
class CheckResult:
    case: str
    input: str
    rel_err: float
    passed: bool


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_case(name: str, fn: Callable[..., T.Tensor], inputs: dict[str, np.ndarray], eps: float = 1e-5,
               tol: float = 1e-6, corrupt: bool = False) -> list[CheckResult]:
    """Compare tape gradients of ``fn(**inputs)`` with central differences, one input at a time."""
    leaves = {k: T.Tensor(v, requires_grad=True) for k, v in inputs.items()}
    T.backward(fn(**leaves))
    results = []
    for key, value in inputs.items():
        analytic = leaves[key].grad if leaves[key].grad is not None else np.zeros_like(value)
        if corrupt:
            analytic = analytic * (1 + 1e-3)

        def f(x, key=key):
            args = {k: T.Tensor(x if k == key else v) for k, v in inputs.items()}
            return fn(**args).item()

        err = rel_error(analytic, numerical_grad(f, value, eps))
        results.append(CheckResult(name, key, err, err < tol))
    return results


def _proj(out: T.Tensor, target: np.ndarray) -> T.Tensor:
    return T.frobenius_sq(T.sub(out, T.Tensor(target)))


def _away_from_zero(a: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    return np.where(np.abs(a) < margin, np.sign(a) * margin + (a == 0) * margin, a)


def default_cases(seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-1, 1, size=shape)

    # projection targets for ops with non-scalar output
    u0, u1, u2, u3 = u(3, 5), u(5, 3), u(3, 4), u(4, 4)
    u4, u5, u6, u7 = u(2, 2, 3), u(2, 3, 2), u(2, 3, 2), u(1, 3, 4, 4)
    u8, u9, u10, u11 = u(2, 2, 2, 2), u(2, 3), u(2, 4, 3, 3), u(18, 4)
    t34, t45 = u(3, 4), u(4, 5)
    cases: list[Case] = [
        ("matmul", lambda a, b: _proj(T.matmul(a, b), u0), {"a": t34, "b": t45}),
        ("gram", lambda a: _proj(T.gram(a), u3), {"a": u(3, 4)}),
        ("transpose", lambda a: _proj(T.transpose(a), u1), {"a": u(3, 5)}),
        ("frobenius_sq", lambda a: T.frobenius_sq(a), {"a": u(3, 4)}),
        ("add", lambda a, b: _proj(T.add(a, b), u2), {"a": u(3, 4), "b": u(3, 4)}),
        ("add_bias", lambda a, b: _proj(T.add(a, b), u2), {"a": u(3, 4), "b": u(4)}),
        ("sub", lambda a, b: _proj(T.sub(a, b), u2), {"a": u(3, 4), "b": u(3, 4)}),
        ("scalar_mul", lambda a: _proj(T.scalar_mul(a, -2.5), u2), {"a": u(3, 4)}),
        ("relu", lambda a: _proj(T.relu(a), u2), {"a": _away_from_zero(u(3, 4))}),
        ("sub_identity", lambda a: _proj(T.sub_identity(a), u3), {"a": u(4, 4)}),
        ("reshape_permute", lambda a: _proj(T.permute(T.reshape(a, (2, 3, 2)), (2, 0, 1)), u4),
         {"a": u(3, 4)}),
        ("gather_columns", lambda a: _proj(T.gather_columns(a, [[3, 0], [1, 2]]), u5), {"a": u(3, 4)}),
        ("batched_matmul", lambda a, b: _proj(T.matmul(a, b), u6), {"a": u(2, 3, 4), "b": u(2, 4, 2)}),
        ("conv2d", lambda x, k: _proj(T.conv2d(x, k, 1, 1), u7), {"x": u(1, 2, 4, 4), "k": u(3, 2, 3, 3)}),
        ("conv2d_strided", lambda x, k: _proj(T.conv2d(x, k, 2, 0), u8), {"x": u(2, 2, 5, 5), "k": u(2, 2, 3, 3)}),
        ("global_avg_pool", lambda x: _proj(T.global_avg_pool(x), u9), {"x": u(2, 3, 2, 2)}),
        ("group_norm", lambda x, g, b: _proj(T.group_norm(x, 2, g, b), u10),
         {"x": u(2, 4, 3, 3), "g": u(4), "b": u(4)}),
        ("softmax_cross_entropy", lambda z: T.softmax_cross_entropy(z, [0, 2, 1, 2]), {"z": u(4, 3)}),
        ("flatten_kernel", lambda k: _proj(flatten_kernel(k), u11), {"k": u(4, 2, 3, 3)}),
        ("group_penalty", lambda w: group_penalty(w), {"w": u(6, 4)}),
        ("group_penalty_wide", lambda w: group_penalty(w), {"w": u(3, 8)}),
    ]

    w68 = u(6, 8)
    for mode in ("inter", "intra"):
        for n in (1, 2, 4):
            part = make_partition(mode, n, 8)
            cases.append((f"layer_penalty_{mode}_N{n}", lambda w, p=part: layer_penalty(w, p)[0], {"w": w68}))

    base = u(5, 6)
    target = u(3, 5)
    cases.append(("adapter", lambda x, down, up: _proj(
        adapter_forward(AdapterLayer(T.Tensor(base), down, up, 0.7), x), target),
        {"x": u(3, 6), "down": u(2, 6), "up": u(5, 2)}))

    # relu-free composite so larger finite-difference steps never straddle a kink
    xb = rng.uniform(0, 1, size=(2, 3, 4, 4))
    labels = [0, 2]

    def conv_gn_head(kernel, gamma, head):
        h = T.conv2d(T.Tensor(xb), kernel, 1, 1)
        h = T.group_norm(h, 2, gamma, T.Tensor(np.zeros(4)))
        return T.softmax_cross_entropy(T.matmul(T.global_avg_pool(h), head), labels)

    cases.append(("conv_gn_head", conv_gn_head,
                  {"kernel": u(4, 3, 3, 3), "gamma": rng.uniform(0.5, 1.5, size=4), "head": u(4, 3)}))
    return cases


def closed_form_check(eps: float, tol: float, corrupt: bool, seed: int = 0) -> list[CheckResult]:
    """``4 W (W^T W - I)`` against both the tape gradient and finite differences."""
    rng = np.random.default_rng(seed + 1)
    out = []
    for shape in ((6, 4), (3, 8), (1, 1)):
        w = rng.uniform(-1, 1, size=shape)
        closed = group_penalty_grad(w) * ((1 + 1e-3) if corrupt else 1)
        leaf = T.Tensor(w, requires_grad=True)
        T.backward(group_penalty(leaf))
        num = numerical_grad(lambda x: group_penalty(T.Tensor(x)).item(), w, eps)
        err = max(rel_error(closed, num), rel_error(closed, leaf.grad))
        out.append(CheckResult("group_penalty_closed_form", f"w{shape[0]}x{shape[1]}", err, err < tol))
    return out


def run_suite(eps: float = 1e-5, tol: float = 1e-6, corrupt: str | None = None,
              seed: int = 0) -> tuple[list[CheckResult], float]:
    """Run every case; returns results and elapsed seconds.

    ``corrupt`` names a case prefix whose analytic gradient is deliberately
    perturbed, as a negative control.
    """
    t0 = time.perf_counter()
    results: list[CheckResult] = []
    for name, fn, inputs in default_cases(seed):
        bad = corrupt is not None and name.startswith(corrupt)
        results.extend(check_case(name, fn, inputs, eps, tol, bad))
    bad = corrupt is not None and "group_penalty_closed_form".startswith(corrupt)
    results.extend(closed_form_check(eps, tol, bad, seed))
    return results, time.perf_counter() - t0
