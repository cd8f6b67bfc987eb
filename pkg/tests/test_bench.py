import numpy as np
import pytest
from hypothesis import given, strategies as st

from gor.bench import (BenchError, CostQuery, cost_model, elementwise_cost, parse_shape, results_csv,
                       run_bench, transient_bytes)
from gor.grouping import ConfigError, make_partition
from gor.regularizer import layer_penalty
from gor.tensor import Tensor, count_macs


def schoolbook_gram_macs(w, groups):
    """Independent oracle: explicit triple loop over each group's Gram entries."""
    macs = 0
    for g in groups:
        cols = w[:, list(g)]
        for i in range(cols.shape[1]):
            for j in range(cols.shape[1]):
                for k in range(cols.shape[0]):
                    macs += 1
    return macs


class TestCostModel:
    def test_full_default_shape(self):
        assert cost_model(CostQuery(2304, 256, mode="full")) == 150_994_944

    def test_sixteen_groups(self):
        assert cost_model(CostQuery(2304, 256, 16)) == 9_437_184
        assert 16 * cost_model(CostQuery(2304, 256, 16)) == cost_model(CostQuery(2304, 256, mode="full"))

    @given(st.integers(1, 64), st.integers(1, 64))
    def test_single_group_is_full(self, c_in, c_out):
        assert cost_model(CostQuery(c_in, c_out, 1)) == cost_model(CostQuery(c_in, c_out, mode="full"))

    def test_exact_halving(self):
        macs = [cost_model(CostQuery(2304, 256, n)) for n in (1, 2, 4, 8, 16, 32)]
        assert all(a == 2 * b for a, b in zip(macs, macs[1:]))

    def test_non_divisor(self):
        with pytest.raises(ConfigError):
            CostQuery(2304, 256, 3)

    @pytest.mark.parametrize("n", [1, 2, 4])
    def test_matches_schoolbook_oracle(self, rng, n):
        w = rng.normal(size=(5, 8))
        part = make_partition("inter", n, 8)
        assert cost_model(CostQuery(5, 8, n)) == schoolbook_gram_macs(w, part.groups)

    def test_instrumented_counter(self, rng):
        w = rng.normal(size=(576, 64))
        for n in (1, 4, 16):
            with count_macs() as c:
                layer_penalty(Tensor(w), make_partition("inter", n, 64))
            assert c.macs == cost_model(CostQuery(576, 64, n))

    def test_lower_order_terms(self):
        assert elementwise_cost(CostQuery(2304, 256, 16)) == {"identity_subtractions": 256,
                                                              "square_sum_macs": 16 * 16 * 16}
        assert transient_bytes(CostQuery(10, 4, 2)) == 8 * (2 * 2 * 4 + 2 * 40)


class TestBench:
    def test_parse_shape(self):
        assert parse_shape("64x64x3x3") == (64, 64, 3, 3)
        for bad in ("64x64x3", "axbxcxd", "0x1x1x1"):
            with pytest.raises(ConfigError):
                parse_shape(bad)

    def test_small_run(self):
        res = run_bench((16, 4, 3, 3), (1, 2, 4), reps=3, warmup=1, parallel=True)
        batched = [r for r in res if r.series == "batched"]
        threaded = [r for r in res if r.series == "threaded"]
        assert [r.n for r in batched] == [1, 2, 4] == [r.n for r in threaded]
        assert [r.macs for r in batched] == [16 * 16 * 36, 8 * 16 * 36, 4 * 16 * 36]
        assert all(r.ns_p10 <= r.ns_median <= r.ns_p90 for r in res)
        lines = results_csv(batched).splitlines()
        assert lines[0] == "N,macs,ns_median,ns_p10,ns_p90,bytes" and len(lines) == 4

    def test_rejects_non_divisor(self):
        with pytest.raises(ConfigError):
            run_bench((256, 256, 3, 3), (3,), reps=1)
