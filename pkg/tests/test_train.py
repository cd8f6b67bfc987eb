import numpy as np
import pytest

from gor.grouping import ConfigError
from gor.nn import Model, adapter_probe, linear
from gor.regularizer import RegConfig
from gor.tensor import ShapeError
from gor.train import (DatasetSpec, TrainConfig, make_synthetic_dataset, ortho_report, run_training,
                       sgd_step)

SMALL = DatasetSpec(samples_per_class=40)


class TestDataset:
    def test_sizes(self):
        d = make_synthetic_dataset(DatasetSpec(), seed=0)
        assert len(d.y_train) == 480 and len(d.y_test) == 120
        assert d.x_train.shape == (480, 3, 8, 8)
        assert np.bincount(d.y_test).tolist() == [40, 40, 40]

    def test_deterministic(self):
        a, b = make_synthetic_dataset(SMALL, 4), make_synthetic_dataset(SMALL, 4)
        assert a.x_train.tobytes() == b.x_train.tobytes() and a.y_test.tobytes() == b.y_test.tobytes()

    def test_seed_matters(self):
        a, b = make_synthetic_dataset(SMALL, 4), make_synthetic_dataset(SMALL, 5)
        assert not np.array_equal(a.x_train, b.x_train)

    def test_noiseless_samples_are_templates(self):
        d = make_synthetic_dataset(DatasetSpec(sigma=0.0, samples_per_class=10), 0)
        for c in range(3):
            xs = np.concatenate([d.x_train[d.y_train == c], d.x_test[d.y_test == c]])
            assert np.all(xs == xs[0])

    def test_noiseless_is_learnable(self):
        cfg = TrainConfig(epochs=6, data=DatasetSpec(sigma=0.0), reg=RegConfig(lam=0.0))
        report, _ = run_training(cfg)
        assert report.final.acc == 1.0

    def test_invalid(self):
        with pytest.raises(ConfigError):
            DatasetSpec(sigma=-1.0)


class TestSGD:
    def test_plain_descent(self):
        (p,), _ = sgd_step([np.array([1.0, 2.0])], [np.array([0.5, -1.0])], 0.1, 0.0, [np.zeros(2)])
        np.testing.assert_allclose(p, [0.95, 2.1])

    def test_fixed_point(self):
        p0 = np.array([3.0])
        (p,), (v,) = sgd_step([p0], [np.zeros(1)], 0.1, 0.9, [np.zeros(1)])
        assert p[0] == 3.0 and v[0] == 0.0

    def test_two_momentum_steps(self):
        w, v = np.array([1.0]), [np.zeros(1)]
        (w,), v = sgd_step([w], [2 * w], 0.1, 0.9, v)
        assert w[0] == pytest.approx(0.8, abs=1e-15)
        (w,), v = sgd_step([w], [2 * w], 0.1, 0.9, v)
        assert w[0] == pytest.approx(0.46, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step([np.zeros(2)], [np.zeros(3)], 0.1, 0.0, [np.zeros(2)])


class TestRunTraining:
    def test_frozen_run(self):
        cfg = TrainConfig(epochs=1, lr=0.0, data=SMALL)
        report, model = run_training(cfg)
        init = run_training(TrainConfig(epochs=1, lr=0.0, data=SMALL))[1]
        for k in model.params:
            assert model.params[k].data.tobytes() == init.params[k].data.tobytes()
        from gor.train import build_for
        fresh = build_for(cfg)
        for k in model.params:
            assert np.array_equal(model.params[k].data, fresh.params[k].data)
        assert report.final.acc == report.init_acc

    def test_step_objective_decomposes(self):
        cfg = TrainConfig(epochs=2, data=SMALL, reg=RegConfig(lam=1e-2, requested_n=16))
        report, _ = run_training(cfg)
        for loss, task, pen in report.steps:
            assert pen > 0
            assert abs(loss - (task + 1e-2 * pen)) <= 1e-12 * max(1.0, abs(loss))

    def test_epoch_columns(self):
        report, _ = run_training(TrainConfig(epochs=2, data=SMALL))
        lines = report.metrics_csv().splitlines()
        assert lines[0] == "epoch,loss,task_loss,penalty,acc,mean_dev"
        assert len(lines) == 3

    def test_timing_kept_out_of_csv(self):
        report, _ = run_training(TrainConfig(epochs=1, data=SMALL))
        assert "wall_clock" not in report.metrics_csv()
        assert report.to_dict()["timing"]["wall_clock_seconds"] > 0

    def test_divergence_detected(self):
        from gor.train import TrainingDiverged
        cfg = TrainConfig(epochs=3, lr=1e6, momentum=0.0, data=SMALL, reg=RegConfig(lam=1.0))
        with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match="epoch"):
            run_training(cfg)

    def test_regularization_lowers_deviation(self):
        base = run_training(TrainConfig(epochs=4, data=SMALL, reg=RegConfig(lam=0.0, requested_n=16)))[0]
        reg = run_training(TrainConfig(epochs=4, data=SMALL, reg=RegConfig(lam=1e-2, requested_n=16)))[0]
        assert reg.final.mean_dev < base.final.mean_dev


class TestOrthoReport:
    def test_zero_adapter(self):
        model = adapter_probe(width=64)
        rep = ortho_report(model, RegConfig(scope="adapter-up-only", requested_n=4))
        assert rep.penalty.layers["adapter"].groups == [16.0] * 4
        assert all(lo == 0.0 and hi == 0.0 for lo, hi in rep.eigen["adapter"])

    def test_orthonormal_layer(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
        model = Model("o", [linear("fc", 16, 16)], (16,))
        model.set_param("fc.weight", q)
        rep = ortho_report(model, RegConfig(scope="all", requested_n=4))
        assert max(rep.penalty.layers["fc"].groups) < 1e-12
        for lo, hi in rep.eigen["fc"]:
            assert abs(lo - 1) < 1e-12 and abs(hi - 1) < 1e-12

    def test_wide_group_has_null_direction(self, rng):
        model = Model("w", [linear("fc", 3, 16)], (3,))
        model.set_param("fc.weight", rng.normal(size=(3, 16)))
        rep = ortho_report(model, RegConfig(scope="all", requested_n=2))
        for (lo, _), dev in zip(rep.eigen["fc"], rep.penalty.layers["fc"].groups):
            assert abs(lo) < 1e-10
            assert dev >= 8 - 3 - 1e-9
