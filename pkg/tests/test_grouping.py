import numpy as np
import pytest
from hypothesis import given, strategies as st

from gor.grouping import (ConfigError, effective_groups, flatten_kernel, from_whcn_layout, gather_group,
                          make_partition, to_whcn_layout, unflatten_kernel)
from gor.tensor import ShapeError, Tensor, backward, frobenius_sq


def brute_effective(n, c_out):
    cap = min(n, c_out // 4)
    return max([d for d in range(1, cap + 1) if c_out % d == 0], default=1)


class TestFlatten:
    def test_two_filters_1x1(self):
        k = Tensor(np.array([5.0, 7.0]).reshape(2, 1, 1, 1))
        assert np.array_equal(flatten_kernel(k).data, [[5.0, 7.0]])

    def test_shape(self):
        assert flatten_kernel(Tensor(np.zeros((4, 2, 3, 3)))).shape == (18, 4)

    def test_roundtrip_bit_identical(self, rng):
        k = rng.normal(size=(4, 2, 3, 3))
        back = unflatten_kernel(flatten_kernel(Tensor(k)), k.shape).data
        assert back.tobytes() == k.tobytes()

    def test_column_is_filter(self, rng):
        k = rng.normal(size=(5, 2, 3, 3))
        w = flatten_kernel(Tensor(k)).data
        for o in range(5):
            np.testing.assert_array_equal(w[:, o], k[o].ravel())

    def test_rank_checked(self):
        with pytest.raises(ShapeError):
            flatten_kernel(Tensor(np.zeros((4, 3, 3))))

    def test_layout_converters_inverse(self, rng):
        k = rng.normal(size=(4, 2, 3, 5))
        assert to_whcn_layout(k).shape == (5, 3, 2, 4)
        assert np.array_equal(from_whcn_layout(to_whcn_layout(k)), k)


class TestEffectiveGroups:
    @pytest.mark.parametrize("n,c_out,expected", [(32, 256, 32), (32, 16, 4), (1, 7, 1), (1, 256, 1),
                                                 (16, 32, 8), (16, 16, 4), (32, 3, 1), (5, 40, 5), (6, 40, 5)])
    def test_values(self, n, c_out, expected):
        assert effective_groups(n, c_out) == expected

    @given(st.integers(1, 64), st.integers(1, 512))
    def test_matches_divisor_scan(self, n, c_out):
        got = effective_groups(n, c_out)
        assert got == brute_effective(n, c_out)
        assert c_out % got == 0

    def test_invalid(self):
        with pytest.raises(ConfigError):
            effective_groups(0, 16)


class TestPartition:
    # indices are 0-based throughout the package
    def test_inter(self):
        assert make_partition("inter", 3, 6).groups == ((0, 1), (2, 3), (4, 5))

    def test_intra(self):
        assert make_partition("intra", 3, 6).groups == ((0, 2, 4), (1, 3, 5))

    def test_single_group(self):
        assert make_partition("inter", 1, 5).groups == ((0, 1, 2, 3, 4),)

    def test_non_divisor(self):
        with pytest.raises(ConfigError, match="divide"):
            make_partition("inter", 3, 8)

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            make_partition("diagonal", 2, 8)

    @given(st.sampled_from(["inter", "intra"]), st.integers(1, 8), st.integers(1, 8))
    def test_is_partition(self, mode, n, g):
        part = make_partition(mode, n, n * g)
        flat = sorted(i for grp in part.groups for i in grp)
        assert flat == list(range(n * g))
        size = part.group_size if mode == "inter" else part.n_groups
        assert all(len(grp) == size for grp in part.groups)

    @given(st.integers(1, 12))
    def test_extremes_are_dual(self, c_out):
        # intra groups have N members, so inter N matches intra C_out/N
        for n in (1, c_out):
            inter = {frozenset(g) for g in make_partition("inter", n, c_out).groups}
            intra = {frozenset(g) for g in make_partition("intra", c_out // n, c_out).groups}
            assert inter == intra


class TestGather:
    def test_all_columns(self, rng):
        w = rng.normal(size=(3, 4))
        assert np.array_equal(gather_group(Tensor(w), [0, 1, 2, 3]).data, w)

    def test_single(self):
        w = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(gather_group(w, [1]).data, [[2.0], [4.0]])

    def test_grad_zero_off_group(self, rng):
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        backward(frobenius_sq(gather_group(w, [0])))
        assert np.all(w.grad[:, 1:] == 0)
        np.testing.assert_allclose(w.grad[:, 0], 2 * w.data[:, 0])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            gather_group(Tensor(np.ones((2, 2))), [2])

    @pytest.mark.parametrize("mode", ["inter", "intra"])
    def test_stacked_matches_loop(self, rng, mode):
        w = rng.normal(size=(5, 12))
        part = make_partition(mode, 3, 12)
        got = gather_group(Tensor(w), part.index_array()).data
        for i, grp in enumerate(part.groups):
            np.testing.assert_array_equal(got[i], w[:, list(grp)])
