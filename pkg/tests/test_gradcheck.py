import numpy as np

from gor.gradcheck import closed_form_check, numerical_grad, rel_error, run_suite


def test_numerical_grad_quadratic():
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    np.testing.assert_allclose(numerical_grad(lambda v: float(np.sum(v ** 2)), x), 2 * x, atol=1e-9)


def test_rel_error_zero_safe():
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0


def test_suite_covers_required_cases():
    results, _ = run_suite()
    cases = {r.case for r in results}
    for needed in ("matmul", "transpose", "frobenius_sq", "conv2d", "group_norm", "adapter",
                   "group_penalty", "layer_penalty_inter_N1", "layer_penalty_inter_N2", "layer_penalty_inter_N4",
                   "layer_penalty_intra_N4", "softmax_cross_entropy"):
        assert needed in cases, needed
    assert all(r.passed for r in results)
    assert max(r.rel_err for r in results) < 1e-6


def test_corruption_is_caught():
    results, _ = run_suite(corrupt="group_penalty")
    failed = {r.case for r in results if not r.passed}
    assert failed and all(c.startswith("group_penalty") for c in failed)


def test_closed_form_against_tape():
    assert all(r.passed for r in closed_form_check(1e-5, 1e-6, corrupt=False))
