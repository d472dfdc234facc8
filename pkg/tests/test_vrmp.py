import numpy as np
import pytest

from ldacp.vrmp import (
    PCOC_MAX,
    PCOC_MIN,
    infer_yg,
    pcoc_from_raw,
    pcoc_label,
    pcoc_raw_grad,
    vrmp_loss,
)


class TestPcocLabel:
    def test_ratio_for_converted(self):
        assert pcoc_label(50.0, 25) == 2.0

    def test_zero_conversions_default_to_one(self):
        assert pcoc_label(3.7, 0) == 1.0

    def test_unbiased_campaign(self):
        assert pcoc_label(7.0, 7) == 1.0

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            pcoc_label(-1.0, 2)


class TestPcocFromRaw:
    def test_zero_raw_is_ln_two(self):
        assert np.isclose(pcoc_from_raw(0.0), np.log(2.0), atol=1e-12)

    def test_lower_clamp(self):
        assert pcoc_from_raw(-100.0) == PCOC_MIN

    def test_upper_clamp(self):
        assert pcoc_from_raw(100.0) == PCOC_MAX

    def test_gradient_zero_in_clamped_regions(self):
        assert pcoc_raw_grad(np.array([-100.0]))[0] == 0.0
        assert pcoc_raw_grad(np.array([100.0]))[0] == 0.0
        assert pcoc_raw_grad(np.array([0.0]))[0] == 0.5  # sigmoid(0)


class TestVrmpLoss:
    def test_perfect_fit(self):
        loss, grad = vrmp_loss(np.array([1.0]), np.array([1.0]))
        assert loss == 0.0
        assert grad[0] == 0.0

    def test_direct_value(self):
        loss, _ = vrmp_loss(np.array([2.0]), np.array([0.5]))
        assert loss == 1.5

    def test_clamp_boundary_worst_case(self):
        loss, _ = vrmp_loss(np.array([0.1]), np.array([10.0]))
        assert np.isclose(loss, 9.9)

    def test_batch_mean_and_sign_gradient(self):
        loss, grad = vrmp_loss(np.array([2.0, 0.5]), np.array([1.0, 1.0]))
        assert np.isclose(loss, 0.75)
        assert np.allclose(grad, [0.5, -0.5])


class TestInferYg:
    def test_zero_aggregate(self):
        assert infer_yg(0.0, 1.0) == 0.0

    def test_direct_division(self):
        assert infer_yg(30.0, 2.0) == 15.0

    def test_round_trip_identity(self):
        rng = np.random.default_rng(0)
        y = rng.integers(1, 33_492, size=100_000).astype(np.float64)
        z = y * np.exp(rng.normal(0, 0.35, size=y.size))
        back = infer_yg(z, pcoc_label(z, y))
        # two chained IEEE divisions: exact up to a couple of ulps
        assert np.all(np.abs(back - y) <= 4 * np.finfo(np.float64).eps * y)

    def test_range_bound_from_clamp(self):
        rng = np.random.default_rng(1)
        z = rng.uniform(0, 100, 1000)
        pcoc_hat = pcoc_from_raw(rng.normal(scale=5, size=1000))
        y_g = infer_yg(z, pcoc_hat)
        assert np.all(y_g >= z / 10 - 1e-12)
        assert np.all(y_g <= 10 * z + 1e-12)

    def test_out_of_clamp_rejected(self):
        with pytest.raises(ValueError):
            infer_yg(1.0, 0.01)
