"""MAC cost model for SO vs. GOR and a wall-clock benchmark of the penalty."""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .grouping import ConfigError, make_partition
from .regularizer import layer_penalty, threaded_layer_penalty
from .tensor import Tensor, backward, count_macs

DEFAULT_SHAPE = (256, 256, 3, 3)
DEFAULT_NS = (1, 2, 4, 8, 16, 32)
CSV_COLUMNS = ("N", "macs", "ns_median", "ns_p10", "ns_p90", "bytes")


class BenchError(RuntimeError):
    """Counted MACs disagree with the cost model."""


@dataclass(frozen=True)
class CostQuery:
    c_in: int
    c_out: int
    n: int = 1
    mode: str = "grouped"

    def __post_init__(self):
        if self.mode not in ("full", "grouped"):
            raise ConfigError(f"unknown cost mode {self.mode!r}")
        if self.c_in < 1 or self.c_out < 1 or self.n < 1:
            raise ConfigError(f"invalid cost query {self}")
        if self.mode == "grouped" and self.c_out % self.n:
            raise ConfigError(f"{self.n} groups do not evenly divide {self.c_out} filters")


def cost_model(q: CostQuery) -> int:
    """Schoolbook MACs of the Gram products: ``C_out^2 C_in`` whole-layer, ``/ N`` grouped."""
    if q.mode == "full":
        return q.c_out * q.c_out * q.c_in
    g = q.c_out // q.n
    return q.n * g * g * q.c_in


def elementwise_cost(q: CostQuery) -> dict[str, int]:
    """Lower-order terms left out of :func:`cost_model`: diagonal subtractions and squared-sum MACs."""
    n = 1 if q.mode == "full" else q.n
    g = q.c_out // n
    return {"identity_subtractions": q.c_out, "square_sum_macs": n * g * g}


def transient_bytes(q: CostQuery) -> int:
    """Analytic float64 scratch for one forward+backward: Gram stack and its adjoint,
    gathered filter stack and its adjoint."""
    n = 1 if q.mode == "full" else q.n
    g = q.c_out // n
    return 8 * (2 * n * g * g + 2 * q.c_in * q.c_out)


def parse_shape(text: str) -> tuple[int, int, int, int]:
    """``"256x256x3x3"`` -> ``(C_out, c, h, w)``."""
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"bad shape {text!r}; expected C_outxCxHxW") from None
    if len(dims) != 4 or min(dims) < 1:
        raise ConfigError(f"bad shape {text!r}; expected four positive sizes C_outxCxHxW")
    return dims  # type: ignore[return-value]


@dataclass
class BenchResult:
    n: int
    macs: int
    ns_median: float
    ns_p10: float
    ns_p90: float
    bytes: int
    series: str = "batched"

    def row(self) -> list:
        return [self.n, self.macs, self.ns_median, self.ns_p10, self.ns_p90, self.bytes]


def worker_count() -> int:
    env = os.environ.get("GOR_THREADS")
    cores = os.cpu_count() or 1
    if env:
        try:
            return max(1, min(int(env), cores))
        except ValueError:
            raise ConfigError(f"GOR_THREADS must be an integer, got {env!r}") from None
    return cores


def _penalty_step(weights: np.ndarray, part):
    leaf = Tensor(weights, requires_grad=True)

    def step():
        leaf.grad = None
        backward(layer_penalty(leaf, part)[0])

    return step


def _time_interleaved(fns, reps: int, warmup: int) -> list[np.ndarray]:
    """Round-robin timing so drift and allocator state affect every variant alike."""
    for _ in range(warmup):
        for fn in fns:
            fn()
    out = np.empty((len(fns), reps))
    for r in range(reps):
        for i, fn in enumerate(fns):
            t0 = time.perf_counter_ns()
            fn()
            out[i, r] = time.perf_counter_ns() - t0
    return list(out)


def _summary(t: np.ndarray) -> tuple[float, float, float]:
    return float(np.median(t)), float(np.percentile(t, 10)), float(np.percentile(t, 90))


def run_bench(shape=DEFAULT_SHAPE, ns=DEFAULT_NS, reps: int = 30, warmup: int = 3, seed: int = 0,
              parallel: bool | None = None) -> list[BenchResult]:
    """Time penalty forward+backward of one conv layer for each group count.

    Every N sees the same random weights.  The ``threaded`` series (one task per
    group) runs only when more than one worker is available, unless forced.
    """
    c_out, c, h, w = shape
    c_in = c * h * w
    for n in ns:
        CostQuery(c_in, c_out, n)  # validates divisibility
    if reps < 1:
        raise ConfigError("reps must be positive")
    weights = np.random.default_rng(seed).uniform(-1, 1, size=(c_in, c_out)) / np.sqrt(c_in)
    workers = worker_count()
    if parallel is None:
        parallel = workers > 1

    steps, threaded, meta = [], [], []
    for n in ns:
        part = make_partition("inter", n, c_out)
        q = CostQuery(c_in, c_out, n)
        expected = cost_model(q)
        with count_macs() as counter:
            layer_penalty(Tensor(weights), part)
        if counter.macs != expected:
            raise BenchError(f"N={n}: counted {counter.macs} MACs, cost model says {expected}")
        meta.append((n, expected, transient_bytes(q)))
        steps.append(_penalty_step(weights, part))
        threaded.append(lambda part=part: threaded_layer_penalty(weights, part, workers))

    results = [BenchResult(n, macs, *_summary(t), nbytes)
               for (n, macs, nbytes), t in zip(meta, _time_interleaved(steps, reps, warmup))]
    if parallel:
        results += [BenchResult(n, macs, *_summary(t), nbytes, "threaded")
                    for (n, macs, nbytes), t in zip(meta, _time_interleaved(threaded, reps, warmup))]
    return results


def results_csv(results: list[BenchResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in results:
        writer.writerow(r.row())
    return buf.getvalue()


def results_json(results: list[BenchResult], shape) -> dict:
    c_out, c, h, w = shape
    return {"shape": list(shape), "c_in": c * h * w, "c_out": c_out,
            "full_macs": cost_model(CostQuery(c * h * w, c_out, mode="full")),
            "results": [asdict(r) for r in results]}
