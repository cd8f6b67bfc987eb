import csv
import json

import pytest

from gor.cli import main
from gor.nn import conv_gn_small
from gor.serialize import dumps_params, save_params

FAST = ["--samples-per-class", "20", "--epochs", "2"]


def train(tmp_path, *extra, name="run"):
    out = tmp_path / name
    code = main(["train", "--model", "conv-gn-small", "--out", str(out), *FAST, *extra])
    return code, out


def test_train_writes_reports(tmp_path, capsys):
    code, out = train(tmp_path, "--lambda", "1e-2", "--n-groups", "16", "--mode", "inter", "--seeds", "0,1,2")
    assert code == 0
    for s in (0, 1, 2):
        rep = json.loads((out / f"seed_{s}" / "report.json").read_text())
        assert rep["resolved_config"]["reg"] == {"lambda": 0.01, "requested_n": 16, "mode": "inter",
                                                 "scope": "all-conv"}
        assert (out / f"seed_{s}" / "metrics.csv").exists() and (out / f"seed_{s}" / "model.bin").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["runs"]) == 3 and "mean" in summary["acc"]
    assert "mean_dev" in capsys.readouterr().out


def test_lambda_lowers_summary_deviation(tmp_path):
    _, base = train(tmp_path, "--lambda", "0", "--n-groups", "16", name="base")
    _, reg = train(tmp_path, "--lambda", "1e-2", "--n-groups", "16", name="reg")
    dev = lambda p: json.loads((p / "summary.json").read_text())["mean_dev"]["mean"]
    assert dev(reg) < dev(base)


def test_missing_model_is_usage_error(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_model(tmp_path):
    assert main(["train", "--model", "vgg", "--out", str(tmp_path)]) == 2


def test_config_file_and_unknown_keys(tmp_path):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"train": {"model": "mlp-small", "epochs": 1},
                                "data": {"samples_per_class": 10}, "reg": {"lambda": 0.0}}))
    assert main(["train", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "seed_0" / "report.json").read_text())
    assert rep["config"]["model"] == "mlp-small" and rep["config"]["epochs"] == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"model": "mlp-small", "epochz": 1}}))
    assert main(["train", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"trainer": {}}))
    assert main(["train", "--config", str(bad)]) == 2


def test_flag_overrides_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"model": "mlp-small", "epochs": 3}, "data": {"samples_per_class": 10}}))
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--out", str(tmp_path / "o")]) == 0
    rows = (tmp_path / "o" / "seed_0" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 2


def test_bench_custom_shape(tmp_path):
    code = main(["bench", "--shape", "64x64x3x3", "--reps", "2", "--warmup", "0", "--no-parallel",
                 "--out", str(tmp_path)])
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "bench.csv").open()))
    assert [int(r["N"]) for r in rows] == [1, 2, 4, 8, 16, 32]
    for r in rows:
        assert int(r["macs"]) == 64 * 64 * 64 * 9 // int(r["N"])


def test_bench_non_divisor(tmp_path):
    assert main(["bench", "--n", "3", "--out", str(tmp_path)]) == 2


def test_gradcheck_clean(capsys):
    assert main(["gradcheck"]) == 0
    assert "worst:" in capsys.readouterr().out


def test_gradcheck_loose_step(capsys):
    assert main(["gradcheck", "--eps", "1e-3", "--tol", "1e-4"]) == 0


def test_gradcheck_corrupted(capsys):
    assert main(["gradcheck", "--corrupt", "group_penalty"]) == 1
    assert "group_penalty" in capsys.readouterr().out


def test_ortho_report_matches_training_csv(tmp_path):
    code, out = train(tmp_path, "--n-groups", "16")
    assert code == 0
    rep_dir = tmp_path / "ortho"
    assert main(["ortho-report", "--model-file", str(out / "seed_0" / "model.bin"), "--n-groups", "16",
                 "--out", str(rep_dir)]) == 0
    report = json.loads((rep_dir / "ortho_report.json").read_text())
    last = list(csv.DictReader((out / "seed_0" / "metrics.csv").open()))[-1]
    assert report["model"] == "conv-gn-small"
    assert report["total"] == pytest.approx(float(last["penalty"]), rel=1e-12)
    assert report["mean_dev"] == pytest.approx(float(last["mean_dev"]), rel=1e-12)


def test_ortho_report_zero_adapter(tmp_path):
    from gor.nn import adapter_probe
    path = tmp_path / "a.bin"
    save_params(path, adapter_probe(width=64).state())
    assert main(["ortho-report", "--model-file", str(path), "--model", "adapter-probe", "--scope",
                 "adapter-up-only", "--n-groups", "4", "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "ortho_report.json").read_text())
    assert report["layers"]["adapter"]["groups"] == [16.0] * 4


def test_ortho_report_bad_files(tmp_path):
    assert main(["ortho-report", "--model-file", str(tmp_path / "nope.bin"), "--model", "conv-gn-small"]) == 2
    corrupt = tmp_path / "bad.bin"
    corrupt.write_bytes(dumps_params(conv_gn_small().state())[:100])
    assert main(["ortho-report", "--model-file", str(corrupt), "--model", "conv-gn-small"]) == 2
    wrong = tmp_path / "wrong.bin"
    save_params(wrong, {"x": conv_gn_small().state()["conv1.weight"]})
    assert main(["ortho-report", "--model-file", str(wrong), "--model", "conv-gn-small"]) == 2


def test_unknown_subcommand():
    assert main(["serve"]) == 2
