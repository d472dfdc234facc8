import numpy as np
import pytest
from hypothesis import given, strategies as st

from ldacp.nn import (
    AdamState,
    DenseLayer,
    DenseNet,
    EmbeddingTable,
    GradientError,
    SELU_ALPHA,
    SELU_SCALE,
    adam_step,
    grad_check,
    selu,
    sigmoid,
    softplus,
)


class TestDenseForward:
    def test_identity_layer(self):
        net = DenseNet([DenseLayer(np.eye(2), np.zeros(2), "linear")])
        out = net.forward(np.array([[1.0, 2.0]]))
        assert np.array_equal(out, [[1.0, 2.0]])

    def test_zero_net_gives_zero(self):
        net = DenseNet([
            DenseLayer(np.zeros((3, 2)), np.zeros(3), "linear"),
            DenseLayer(np.zeros((1, 3)), np.zeros(1), "linear"),
        ])
        assert np.array_equal(net.forward([[5.0, -1.0]]), [[0.0]])

    def test_hand_computed_affine(self):
        net = DenseNet([DenseLayer(np.array([[2.0]]), np.array([1.0]), "linear")])
        assert net.forward([[3.0]])[0, 0] == 7.0

    def test_dimension_mismatch_rejected(self):
        net = DenseNet([DenseLayer(np.ones((2, 3)), np.zeros(2), "linear")])
        with pytest.raises(ValueError):
            net.forward(np.ones((1, 4)))

    def test_layers_must_chain(self):
        with pytest.raises(ValueError):
            DenseNet([
                DenseLayer(np.ones((2, 3)), np.zeros(2), "linear"),
                DenseLayer(np.ones((2, 5)), np.zeros(2), "linear"),
            ])

    def test_forward_deterministic(self):
        a = DenseNet.build(np.random.default_rng(3), (5, 8, 2))
        b = DenseNet.build(np.random.default_rng(3), (5, 8, 2))
        x = np.random.default_rng(1).normal(size=(4, 5))
        assert np.array_equal(a.forward(x), b.forward(x))


class TestSelu:
    def test_zero_is_fixed_point(self):
        assert selu(0.0) == 0.0

    def test_positive_branch(self):
        assert np.isclose(selu(1.0), 1.0507, atol=1e-4)
        assert np.isclose(selu(1.0), SELU_SCALE)

    def test_negative_asymptote(self):
        assert np.isclose(selu(-20.0), -SELU_SCALE * SELU_ALPHA, atol=1e-6)
        assert np.isclose(selu(-20.0), -1.7581, atol=1e-4)

    @given(st.floats(-50, 50), st.floats(-50, 50))
    def test_monotone(self, a, b):
        if a < b:
            assert selu(a) < selu(b)

    def test_monotone_on_random_pairs(self):
        rng = np.random.default_rng(0)
        pairs = np.sort(rng.normal(scale=10, size=(1000, 2)), axis=1)
        distinct = pairs[:, 0] < pairs[:, 1]
        assert np.all(selu(pairs[distinct, 0]) < selu(pairs[distinct, 1]))


def test_sigmoid_softplus_stable_extremes():
    assert sigmoid(800.0) == 1.0
    assert sigmoid(-800.0) == 0.0
    assert np.isfinite(softplus(800.0))
    assert softplus(-800.0) == 0.0
    assert np.isclose(softplus(0.0), np.log(2.0))


class TestAdam:
    def _scalar(self, value=0.0):
        return {"x": np.array([value])}

    def test_zero_gradient_is_fixed_point(self):
        params = self._scalar(1.5)
        state = AdamState.for_params(params)
        adam_step(params, {"x": np.zeros(1)}, state)
        assert params["x"][0] == 1.5

    def test_zero_lr_freezes_params(self):
        params = self._scalar(1.5)
        state = AdamState.for_params(params, lr=0.0)
        adam_step(params, {"x": np.ones(1)}, state)
        assert params["x"][0] == 1.5

    def test_first_step_closed_form(self):
        # Bias correction makes the first update lr * g / (|g| + eps).
        params = self._scalar(0.0)
        state = AdamState.for_params(params, lr=1e-3)
        adam_step(params, {"x": np.ones(1)}, state)
        expected = -1e-3 * 1.0 / (1.0 + state.eps)
        assert np.isclose(params["x"][0], expected, rtol=1e-12)
        assert np.isclose(params["x"][0], -1e-3, rtol=1e-6)

    def test_step_counter_increments(self):
        params = self._scalar()
        state = AdamState.for_params(params)
        for expected in (1, 2, 3):
            adam_step(params, {"x": np.ones(1)}, state)
            assert state.step == expected

    def test_nonfinite_gradient_rejected(self):
        params = self._scalar()
        state = AdamState.for_params(params)
        with pytest.raises(GradientError):
            adam_step(params, {"x": np.array([np.nan])}, state)
        assert params["x"][0] == 0.0  # untouched

    def test_params_stay_finite_over_many_steps(self):
        rng = np.random.default_rng(5)
        params = {"w": rng.normal(size=(4, 3))}
        state = AdamState.for_params(params)
        for _ in range(200):
            adam_step(params, {"w": rng.normal(size=(4, 3))}, state)
        assert np.all(np.isfinite(params["w"]))


class TestGradCheck:
    def test_quadratic_exact(self):
        params = {"x": np.array([3.0, -1.0, 0.5])}

        def loss():
            return float(0.5 * np.sum(params["x"] ** 2))

        def grads():
            return {"x": params["x"].copy()}

        err = grad_check(loss, grads, params, n_probes=3, fd_eps=1e-5)
        assert err < 1e-8

    def test_rejects_bad_epsilon(self):
        params = {"x": np.zeros(1)}
        with pytest.raises(ValueError):
            grad_check(lambda: 0.0, lambda: {"x": np.zeros(1)}, params, fd_eps=1.0)

    def test_detects_wrong_gradient(self):
        params = {"x": np.array([2.0])}
        err = grad_check(lambda: float(params["x"][0] ** 2),
                         lambda: {"x": np.array([1.0])},  # truth is 2x = 4
                         params, n_probes=1)
        assert err > 0.5


class TestEmbedding:
    def test_unknown_ids_map_to_row_zero(self):
        table = EmbeddingTable.init(np.random.default_rng(0), vocab_size=5, dim=3)
        looked = table.lookup(np.array([0, 4, 7, -2]))
        assert np.array_equal(looked[2], table.rows[0])
        assert np.array_equal(looked[3], table.rows[0])
        assert np.array_equal(looked[1], table.rows[4])

    def test_lookup_width(self):
        table = EmbeddingTable.init(np.random.default_rng(0), vocab_size=4, dim=8)
        assert table.lookup(np.array([1, 2])).shape == (2, 8)
