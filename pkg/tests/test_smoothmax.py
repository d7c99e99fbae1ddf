import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acon.smoothmax import SmoothMaxConfig, smooth_max2, smooth_max2_grad, smooth_max_n
from acon.verify import central_diff5, check_smooth_max_grad, rel_err

finite = st.floats(-50, 50, allow_nan=False)


def naive_smooth_max(values, beta):
    """Direct weighted mean without the shift; only valid for small beta*x."""
    w = [math.exp(beta * v) for v in values]
    return math.fsum(v * wi for v, wi in zip(values, w)) / math.fsum(w)


class TestSmoothMaxN:
    def test_matches_naive_in_safe_range(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            v = rng.uniform(-3, 3, 5)
            beta = rng.uniform(-2, 2)
            assert smooth_max_n(v, beta) == pytest.approx(naive_smooth_max(v, beta), rel=1e-12, abs=1e-14)

    def test_beta_zero_is_mean(self):
        v = [1.0, 2.0, 6.0]
        assert smooth_max_n(v, 0.0) == pytest.approx(3.0, rel=1e-15)

    def test_large_beta_no_overflow(self):
        with np.errstate(over="raise", invalid="raise"):
            assert smooth_max_n([1000.0, 999.0, -1000.0], 50.0) == pytest.approx(1000.0, abs=1e-12)

    def test_negative_beta_tends_to_min(self):
        assert smooth_max_n([3.0, -2.0, 1.0], -1e3) == pytest.approx(-2.0, abs=1e-12)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            smooth_max_n([], 1.0)

    def test_two_values_agree_with_two_arg_form(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b = rng.uniform(-5, 5, 2)
            beta = rng.uniform(-3, 3)
            assert smooth_max2(a, b, beta) == pytest.approx(smooth_max_n([a, b], beta), rel=1e-12, abs=1e-13)

    @settings(max_examples=200)
    @given(st.lists(finite, min_size=1, max_size=8), st.floats(0, 20))
    def test_between_mean_and_max(self, values, beta):
        s = smooth_max_n(values, beta)
        tol = 1e-9 * (1 + max(abs(v) for v in values))
        assert float(np.mean(values)) - tol <= s <= max(values) + tol


class TestSmoothMax2:
    def test_symmetric_bitwise(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=1000), rng.normal(size=1000)
        beta = rng.uniform(-4, 4, 1000)
        np.testing.assert_array_equal(smooth_max2(a, b, beta), smooth_max2(b, a, beta))

    def test_limits(self):
        assert smooth_max2(3.0, -1.0, 0.0) == 1.0
        assert smooth_max2(3.0, -1.0, 1e3) == 3.0
        assert smooth_max2(3.0, -1.0, -1e3) == -1.0

    def test_equal_arguments(self):
        assert smooth_max2(0.7, 0.7, 5.0) == 0.7

    def test_float32_preserved(self):
        a = np.ones(3, np.float32)
        assert smooth_max2(a, 2 * a, np.float32(1.0)).dtype == np.float32

    def test_python_scalars_do_not_downcast(self):
        assert np.asarray(smooth_max2(1.0, np.float32(0.1), 1.0)).dtype == np.float64

    def test_scalar_result(self):
        assert np.ndim(smooth_max2(1.0, 2.0, 1.0)) == 0

    def test_config_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            SmoothMaxConfig(float("nan"))

    @given(finite, finite, st.floats(-5, 5))
    def test_mean_identity_at_zero_and_bounds(self, a, b, beta):
        s = float(smooth_max2(a, b, beta))
        assert min(a, b) - 1e-12 <= s <= max(a, b) + 1e-12
        # (a - b)/2 + b rounds relative to the inputs, not to the (possibly tiny) mean.
        scale = max(abs(a), abs(b), 1.0)
        assert abs(float(smooth_max2(a, b, 0.0)) - (a + b) / 2) <= 4 * np.finfo(float).eps * scale


class TestGrad:
    def test_partials_sum_to_one(self):
        rng = np.random.default_rng(3)
        a, b, beta = rng.normal(size=100), rng.normal(size=100), rng.normal(size=100)
        ga, gb, _ = smooth_max2_grad(a, b, beta)
        np.testing.assert_allclose(ga + gb, 1.0, atol=1e-15)

    def test_against_finite_differences(self):
        assert check_smooth_max_grad(seed=5).passed

    def test_beta_partial_single_point(self):
        a, b, beta = 0.8, -0.3, 1.7
        num = central_diff5(lambda t: smooth_max2(a, b, t), beta)
        assert rel_err(smooth_max2_grad(a, b, beta)[2], num) < 1e-9
