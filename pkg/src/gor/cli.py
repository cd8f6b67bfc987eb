"""``gor train|bench|gradcheck|ortho-report``.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .bench import DEFAULT_NS, DEFAULT_SHAPE, BenchError, parse_shape, results_csv, results_json, run_bench
from .grouping import ConfigError
from .gradcheck import run_suite
from .nn import model_from_state
from .regularizer import RegConfig
from .serialize import ModelFileError, load_params, save_params
from .tensor import ShapeError
from .train import DatasetSpec, TrainConfig, TrainingDiverged, ortho_report, run_training

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _out_dir(raw: dict, flag: str | None) -> Path:
    out = flag or raw.get("out") or f"runs/{time.strftime('%Y%m%d-%H%M%S')}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _int_list(text, what: str) -> list[int]:
    if isinstance(text, list):
        values = text
    else:
        try:
            values = [int(v) for v in str(text).split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"{what} must be a comma-separated list of integers, got {text!r}") from None
    if not values:
        raise ConfigError(f"{what} is empty")
    return [int(v) for v in values]


def _reg_config(raw: dict, args) -> RegConfig:
    reg = cfgmod.resolve(raw, "reg", {"lambda": args.lam, "n_groups": args.n_groups, "mode": args.mode,
                                      "scope": args.scope})
    scope = reg.get("scope", "all-conv")
    if isinstance(scope, str) and "," in scope:
        scope = [s.strip() for s in scope.split(",") if s.strip()]
    return RegConfig(lam=float(reg.get("lambda", 1e-2)), requested_n=int(reg.get("n_groups", 32)),
                     mode=reg.get("mode", "inter"), scope=scope)


def _add_reg_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, help="regularization strength (default 1e-2)")
    p.add_argument("--n-groups", type=int, help="requested number of groups N (default 32)")
    p.add_argument("--mode", choices=("inter", "intra"), help="group partition (default inter)")
    p.add_argument("--scope", help="all-conv | adapter-up-only | all | comma-separated layer names")


# ---------------------------------------------------------------------------
# train


def _train_one(cfg: TrainConfig, out: Path, resolved: dict) -> dict:
    report, model = run_training(cfg)
    run_dir = out / f"seed_{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["resolved_config"] = resolved
    (run_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    (run_dir / "metrics.csv").write_text(report.metrics_csv())
    save_params(run_dir / "model.bin", model.state())
    return {"seed": cfg.seed, "acc": report.final.acc, "mean_dev": report.final.mean_dev,
            "penalty": report.final.penalty}


def cmd_train(args, parser) -> int:
    raw = cfgmod.load(args.config)
    train = cfgmod.resolve(raw, "train", {"model": args.model, "epochs": args.epochs, "batch_size": args.batch_size,
                                          "lr": args.lr, "momentum": args.momentum, "seeds": args.seeds,
                                          "task_weight": args.task_weight, "jobs": args.jobs})
    if not train.get("model"):
        parser.print_usage(sys.stderr)
        raise UsageError("a model name is required (--model or train.model in the config)")
    data = cfgmod.resolve(raw, "data", {"n_classes": args.n_classes, "samples_per_class": args.samples_per_class,
                                        "image_size": args.image_size, "sigma": args.sigma})
    reg = _reg_config(raw, args)
    seeds = _int_list(train.get("seeds", "0"), "seeds")
    defaults = TrainConfig()
    configs = [TrainConfig(model=train["model"], epochs=int(train.get("epochs", defaults.epochs)),
                           batch_size=int(train.get("batch_size", defaults.batch_size)),
                           lr=float(train.get("lr", defaults.lr)),
                           momentum=float(train.get("momentum", defaults.momentum)), seed=s,
                           task_weight=float(train.get("task_weight", 1.0)), reg=reg, data=DatasetSpec(**data))
               for s in seeds]
    from .nn import CATALOG
    if configs[0].model not in CATALOG:
        raise ConfigError(f"unknown model {configs[0].model!r}; available: {sorted(CATALOG)}")
    out = _out_dir(raw, args.out)
    resolved = {"train": {**{k: v for k, v in configs[0].to_dict().items() if k not in ("reg", "data", "seed")},
                          "seeds": seeds},
                "reg": reg.to_dict(), "data": configs[0].to_dict()["data"], "out": str(out)}

    jobs = int(train.get("jobs", 1))
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_train_one, configs, [out] * len(configs), [resolved] * len(configs)))
    else:
        rows = [_train_one(c, out, resolved) for c in configs]

    summary = {"runs": rows, "resolved_config": resolved}
    for key in ("acc", "mean_dev", "penalty"):
        vals = np.array([r[key] for r in rows])
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"model {configs[0].model}  lambda {reg.lam:g}  N {reg.requested_n}  mode {reg.mode}  seeds {seeds}")
    for key in ("acc", "mean_dev", "penalty"):
        print(f"  {key:9s} {summary[key]['mean']:.6g} +- {summary[key]['std']:.3g}")
    print(f"  reports in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args, parser) -> int:
    raw = cfgmod.load(args.config)
    b = cfgmod.resolve(raw, "bench", {"shape": args.shape, "n": args.n, "reps": args.reps, "warmup": args.warmup,
                                      "seed": args.seed, "parallel": args.parallel})
    shape = parse_shape(b["shape"]) if "shape" in b else DEFAULT_SHAPE
    ns = _int_list(b.get("n", list(DEFAULT_NS)), "N list")
    results = run_bench(shape, ns, reps=int(b.get("reps", 30)), warmup=int(b.get("warmup", 3)),
                        seed=int(b.get("seed", 0)), parallel=b.get("parallel"))
    out = _out_dir(raw, args.out)
    batched = [r for r in results if r.series == "batched"]
    threaded = [r for r in results if r.series == "threaded"]
    (out / "bench.csv").write_text(results_csv(batched))
    if threaded:
        (out / "bench_threaded.csv").write_text(results_csv(threaded))
    (out / "bench.json").write_text(json.dumps(results_json(results, shape), indent=2) + "\n")
    print(f"{'series':9s} {'N':>4s} {'MACs':>13s} {'median ms':>10s} {'p10 ms':>8s} {'p90 ms':>8s}")
    for r in results:
        print(f"{r.series:9s} {r.n:4d} {r.macs:13d} {r.ns_median / 1e6:10.3f} {r.ns_p10 / 1e6:8.3f} "
              f"{r.ns_p90 / 1e6:8.3f}")
    print(f"results in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args, parser) -> int:
    raw = cfgmod.load(args.config)
    g = cfgmod.resolve(raw, "gradcheck", {"eps": args.eps, "tol": args.tol, "seed": args.seed})
    eps, tol = float(g.get("eps", 1e-5)), float(g.get("tol", 1e-6))
    results, elapsed = run_suite(eps=eps, tol=tol, corrupt=args.corrupt, seed=int(g.get("seed", 0)))
    worst = max(results, key=lambda r: r.rel_err)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.case}[{r.input}] rel. err {r.rel_err:.3e} >= {tol:g}")
    print(f"{len(results)} checks, {len(failed)} failed, eps {eps:g}, tol {tol:g}, {elapsed:.2f}s")
    print(f"worst: {worst.case}[{worst.input}] rel. err {worst.rel_err:.3e}")
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------------------
# ortho-report


def cmd_ortho_report(args, parser) -> int:
    raw = cfgmod.load(args.config)
    o = cfgmod.resolve(raw, "ortho_report", {"model": args.model, "model_file": args.model_file})
    if not o.get("model_file"):
        parser.print_usage(sys.stderr)
        raise UsageError("--model-file is required")
    path = Path(o["model_file"])
    state = load_params(path)
    name = o.get("model")
    if not name:
        sibling = path.with_name("report.json")
        try:
            name = json.loads(sibling.read_text())["config"]["model"]
        except (OSError, ValueError, KeyError):
            raise UsageError("--model is required (no report.json next to the model file)") from None
    try:
        model = model_from_state(name, state)
    except ShapeError as exc:
        raise ModelFileError(str(exc)) from None
    reg = _reg_config(raw, args)
    report = ortho_report(model, reg)
    payload = report.to_dict()
    payload["model"] = name
    payload["mean_dev"] = report.penalty.mean_group_deviation()
    out = _out_dir(raw, args.out)
    (out / "ortho_report.json").write_text(json.dumps(payload, indent=2) + "\n")
    for lname, layer in payload["layers"].items():
        print(f"{lname}: sum {layer['sum']:.6g} over {len(layer['groups'])} groups")
        for i, (dev, ev) in enumerate(zip(layer["groups"], layer["eigen"])):
            print(f"  group {i:3d}  deviation {dev:.6g}  eig [{ev['min']:.3g}, {ev['max']:.3g}]")
    for w in payload.get("warnings", []):
        print(f"warning: {w}")
    print(f"total {payload['total']:.6g}  mean group deviation {payload['mean_dev']:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gor", description="Group orthogonalization regularization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a catalog model on synthetic data")
    p.add_argument("--config")
    p.add_argument("--model", help="conv-gn-small | mlp-small | adapter-probe")
    p.add_argument("--seeds", help="comma-separated seeds (default 0)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--task-weight", type=float)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--jobs", type=int, help="train seeds in parallel processes")
    p.add_argument("--out")
    _add_reg_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="MAC counts and penalty runtime per group count")
    p.add_argument("--config")
    p.add_argument("--shape", help="kernel C_outxCxHxW (default 256x256x3x3)")
    p.add_argument("--n", help="comma-separated group counts (default 1,2,4,8,16,32)")
    p.add_argument("--reps", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--parallel", action=argparse.BooleanOptionalAction, default=None,
                   help="also time one thread-pool task per group")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--config")
    p.add_argument("--eps", type=float, help="finite-difference step (default 1e-5)")
    p.add_argument("--tol", type=float, help="relative error tolerance (default 1e-6)")
    p.add_argument("--seed", type=int)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ortho-report", help="per-group deviations and Gram eigenvalues of a saved model")
    p.add_argument("--config")
    p.add_argument("--model-file")
    p.add_argument("--model")
    p.add_argument("--out")
    _add_reg_flags(p)
    p.set_defaults(func=cmd_ortho_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return args.func(args, sub)
    except (UsageError, ConfigError, ModelFileError, ShapeError) as exc:
        print(f"gor {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"gor {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except BenchError as exc:
        print(f"gor {args.command}: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
