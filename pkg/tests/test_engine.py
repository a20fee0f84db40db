"""Tests for the NumPy network engine: shapes, forward values, gradients and loss."""

from __future__ import annotations

import math
from types import ModuleType

import numpy as np
import pytest  # type: ignore[import-untyped]


def _spec(lab: ModuleType, kind: str, **kw):
    return lab.LayerSpec(kind=kind, **kw)


def _net(lab: ModuleType, layers, input_shape, classes=3, seed=0, dtype=np.float64):
    return lab.build_network(layers, input_shape, classes, seed, dtype=dtype)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


class TestForward:
    def test_dense_forward_example(self, ouidecay_lab: ModuleType) -> None:
        net = _net(ouidecay_lab, [_spec(ouidecay_lab, "dense", out_features=2)], (2,), classes=2)
        net.params["dense0"]["weight"][...] = np.eye(2)
        net.params["dense0"]["bias"][...] = [0.5, -0.5]
        trace = ouidecay_lab.forward(net, np.array([[1.0, 2.0]]))
        np.testing.assert_array_equal(trace.logits, [[1.5, 1.5]])

    def test_two_layer_mlp_matches_straight_line_oracle(self, ouidecay_lab: ModuleType) -> None:
        layers = [
            _spec(ouidecay_lab, "dense", out_features=4),
            _spec(ouidecay_lab, "relu"),
            _spec(ouidecay_lab, "dense", out_features=3),
        ]
        net = _net(ouidecay_lab, layers, (5,), seed=9)
        x = np.random.default_rng(9).standard_normal((6, 5))
        w0, b0 = net.params["dense0"]["weight"], net.params["dense0"]["bias"]
        w1, b1 = net.params["dense2"]["weight"], net.params["dense2"]["bias"]
        expected = np.zeros((6, 3))
        for n in range(6):
            hidden = [max(0.0, sum(x[n, i] * w0[i, h] for i in range(5)) + b0[h]) for h in range(4)]
            for o in range(3):
                expected[n, o] = sum(hidden[h] * w1[h, o] for h in range(4)) + b1[o]
        logits = ouidecay_lab.forward(net, x).logits
        np.testing.assert_allclose(logits, expected, rtol=0, atol=1e-10)

    def test_float32_dense_accumulates_in_float64(self, ouidecay_lab: ModuleType) -> None:
        layers = [_spec(ouidecay_lab, "dense", out_features=3)]
        net = _net(ouidecay_lab, layers, (512,), seed=4, dtype=np.float32)
        x = np.random.default_rng(4).standard_normal((8, 512)).astype(np.float32)
        w, b = net.params["dense0"]["weight"], net.params["dense0"]["bias"]
        expected = (x.astype(np.float64) @ w.astype(np.float64) + b).astype(np.float32)
        logits = ouidecay_lab.forward(net, x).logits
        assert logits.dtype == np.float32
        np.testing.assert_array_equal(logits, expected)
        grads = ouidecay_lab.backward(net, ouidecay_lab.forward(net, x), np.zeros(8, dtype=int))
        assert grads["dense0"]["weight"].dtype == np.float32
        assert grads["dense0"]["bias"].dtype == np.float32

    def test_relu_zero_preactivation_is_inactive(self, ouidecay_lab: ModuleType) -> None:
        layers = [
            _spec(ouidecay_lab, "dense", out_features=3),
            _spec(ouidecay_lab, "relu", monitored=True),
            _spec(ouidecay_lab, "dense", out_features=2),
        ]
        net = _net(ouidecay_lab, layers, (3,), classes=2)
        net.params["dense0"]["weight"][...] = np.eye(3)
        net.params["dense0"]["bias"][...] = 0.0
        trace = ouidecay_lab.forward(net, np.array([[-1.0, 0.0, 2.0]]), capture=True)
        np.testing.assert_array_equal(trace.preacts["dense0"], [[-1.0, 0.0, 2.0]])
        relu_mask = trace.caches[1]
        assert relu_mask.tolist() == [[False, False, True]]

    def test_maxpool_picks_window_maximum(self, ouidecay_lab: ModuleType) -> None:
        pool = ouidecay_lab.MaxPool2d("maxpool0", _spec(ouidecay_lab, "maxpool2d", kernel_size=2))
        pool.bind((1, 4, 4))
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        y, _ = pool.forward(x, {})
        np.testing.assert_array_equal(y[0, 0], [[5, 7], [13, 15]])

    def test_conv_matches_direct_correlation(self, ouidecay_lab: ModuleType) -> None:
        spec = _spec(ouidecay_lab, "conv2d", out_channels=2, kernel_size=3, padding=1)
        conv = ouidecay_lab.Conv2d("conv2d0", spec)
        conv.bind((2, 5, 5))
        rng = np.random.default_rng(3)
        params = conv.init_params(rng, np.dtype(np.float64))
        params["bias"][...] = rng.standard_normal(2)
        x = rng.standard_normal((2, 2, 5, 5))
        y, _ = conv.forward(x, params)

        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 2, 5, 5))
        for b in range(2):
            for o in range(2):
                for i in range(5):
                    for j in range(5):
                        patch = xp[b, :, i : i + 3, j : j + 3]
                        value = np.sum(patch * params["weight"][o]) + params["bias"][o]
                        expected[b, o, i, j] = value
        np.testing.assert_allclose(y, expected, rtol=1e-12, atol=1e-12)

    def test_capture_does_not_change_logits_or_params(self, ouidecay_lab: ModuleType) -> None:
        layers = [
            _spec(ouidecay_lab, "dense", out_features=6),
            _spec(ouidecay_lab, "relu", monitored=True),
            _spec(ouidecay_lab, "dense", out_features=3),
        ]
        net = _net(ouidecay_lab, layers, (4,))
        before = {k: {n: p.copy() for n, p in v.items()} for k, v in net.params.items()}
        x = np.random.default_rng(0).standard_normal((5, 4))
        plain = ouidecay_lab.forward(net, x).logits
        captured = ouidecay_lab.forward(net, x, capture=True)
        np.testing.assert_array_equal(plain, captured.logits)
        assert set(captured.preacts) == {"dense0"}
        for layer_id, layer_params in net.params.items():
            for name, p in layer_params.items():
                np.testing.assert_array_equal(p, before[layer_id][name])

    def test_conv_preacts_flattened_per_unit(self, ouidecay_lab: ModuleType) -> None:
        layers = [
            _spec(ouidecay_lab, "conv2d", out_channels=2, kernel_size=3),
            _spec(ouidecay_lab, "relu"),
            _spec(ouidecay_lab, "flatten"),
            _spec(ouidecay_lab, "dense", out_features=3),
        ]
        net = _net(ouidecay_lab, layers, (1, 5, 5))
        trace = ouidecay_lab.forward(net, np.zeros((4, 1, 5, 5)), capture=True)
        assert trace.preacts["conv2d0"].shape == (4, 2 * 3 * 3)

    def test_predict_and_evaluate(self, ouidecay_lab: ModuleType) -> None:
        net = _net(ouidecay_lab, [_spec(ouidecay_lab, "dense", out_features=2)], (2,), classes=2)
        net.params["dense0"]["weight"][...] = [[1.0, -1.0], [0.0, 0.0]]
        net.params["dense0"]["bias"][...] = 0.0
        x = np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 5.0]])
        y = np.array([0, 1, 1])
        np.testing.assert_array_equal(ouidecay_lab.predict(net, x), [0, 1, 0])
        loss, acc = ouidecay_lab.evaluate(net, x, y, batch_size=2)
        assert acc == pytest.approx(2 / 3)
        assert loss == pytest.approx(ouidecay_lab.loss(ouidecay_lab.forward(net, x).logits, y))


# ---------------------------------------------------------------------------
# Construction + shape errors
# ---------------------------------------------------------------------------


class TestBuildNetwork:
    def test_same_seed_same_params(self, ouidecay_lab: ModuleType) -> None:
        layers = [_spec(ouidecay_lab, "dense", out_features=4), _spec(ouidecay_lab, "relu"),
                  _spec(ouidecay_lab, "dense", out_features=3)]
        a = _net(ouidecay_lab, layers, (5,), seed=7)
        b = _net(ouidecay_lab, layers, (5,), seed=7)
        c = _net(ouidecay_lab, layers, (5,), seed=8)
        for layer_id in a.params:
            np.testing.assert_array_equal(
                a.params[layer_id]["weight"], b.params[layer_id]["weight"]
            )
        assert not np.array_equal(a.params["dense0"]["weight"], c.params["dense0"]["weight"])

    def test_kaiming_uniform_bounds_and_zero_bias(self, ouidecay_lab: ModuleType) -> None:
        layers = [_spec(ouidecay_lab, "conv2d", out_channels=4, kernel_size=3),
                  _spec(ouidecay_lab, "flatten"), _spec(ouidecay_lab, "dense", out_features=3)]
        net = _net(ouidecay_lab, layers, (2, 6, 6))
        conv_w = net.params["conv2d0"]["weight"]
        assert np.abs(conv_w).max() <= math.sqrt(6.0 / (2 * 9))
        dense_w = net.params["dense2"]["weight"]
        assert dense_w.shape == (4 * 4 * 4, 3)
        assert np.abs(dense_w).max() <= math.sqrt(6.0 / 64)
        assert not net.params["conv2d0"]["bias"].any()

    def test_layer_ids_and_decay_targets(self, ouidecay_lab: ModuleType) -> None:
        layers = [_spec(ouidecay_lab, "dense", out_features=4), _spec(ouidecay_lab, "relu"),
                  _spec(ouidecay_lab, "dense", out_features=3)]
        net = _net(ouidecay_lab, layers, (2,))
        assert [layer.layer_id for layer in net.layers] == ["dense0", "relu1", "dense2"]
        assert net.decayed_layers == ["dense0", "dense2"]
        assert net.oui_layers == []

    def test_default_float32(self, ouidecay_lab: ModuleType) -> None:
        net = ouidecay_lab.build_network(
            [_spec(ouidecay_lab, "dense", out_features=2)], (3,), 2, seed=0
        )
        assert net.params["dense0"]["weight"].dtype == np.float32

    def test_in_features_mismatch_names_layer(self, ouidecay_lab: ModuleType) -> None:
        layers = [_spec(ouidecay_lab, "dense", out_features=4), _spec(ouidecay_lab, "relu"),
                  _spec(ouidecay_lab, "dense", in_features=5, out_features=3)]
        with pytest.raises(ouidecay_lab.ConfigError, match="dense2"):
            _net(ouidecay_lab, layers, (2,))

    def test_dense_on_image_input_rejected(self, ouidecay_lab: ModuleType) -> None:
        with pytest.raises(ouidecay_lab.ConfigError, match="dense0"):
            _net(ouidecay_lab, [_spec(ouidecay_lab, "dense", out_features=3)], (1, 4, 4))

    def test_kernel_larger_than_input(self, ouidecay_lab: ModuleType) -> None:
        layers = [_spec(ouidecay_lab, "conv2d", out_channels=2, kernel_size=5),
                  _spec(ouidecay_lab, "flatten"), _spec(ouidecay_lab, "dense", out_features=3)]
        with pytest.raises(ouidecay_lab.ConfigError, match="conv2d0"):
            _net(ouidecay_lab, layers, (1, 3, 3))

    def test_output_width_must_match_classes(self, ouidecay_lab: ModuleType) -> None:
        with pytest.raises(ouidecay_lab.ConfigError, match="classes"):
            _net(ouidecay_lab, [_spec(ouidecay_lab, "dense", out_features=4)], (2,), classes=3)

    def test_monitored_relu_must_follow_parametric_layer(self, ouidecay_lab: ModuleType) -> None:
        layers = [_spec(ouidecay_lab, "conv2d", out_channels=2, kernel_size=2),
                  _spec(ouidecay_lab, "maxpool2d", kernel_size=2),
                  _spec(ouidecay_lab, "relu", monitored=True),
                  _spec(ouidecay_lab, "flatten"), _spec(ouidecay_lab, "dense", out_features=3)]
        with pytest.raises(ouidecay_lab.ConfigError, match="relu2"):
            _net(ouidecay_lab, layers, (1, 5, 5))

    def test_only_relu_may_be_monitored(self, ouidecay_lab: ModuleType) -> None:
        with pytest.raises(ouidecay_lab.ConfigError):
            ouidecay_lab.LayerSpec(kind="dense", out_features=3, monitored=True)

    def test_forward_rejects_wrong_sample_shape(self, ouidecay_lab: ModuleType) -> None:
        net = _net(ouidecay_lab, [_spec(ouidecay_lab, "dense", out_features=3)], (4,))
        with pytest.raises(ouidecay_lab.ConfigError, match="dense0"):
            ouidecay_lab.forward(net, np.zeros((2, 5)))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


class TestLoss:
    def test_uniform_logits_give_log_classes(self, ouidecay_lab: ModuleType) -> None:
        assert ouidecay_lab.loss(np.zeros((4, 3)), np.array([0, 1, 2, 0])) == pytest.approx(
            math.log(3), abs=1e-12
        )

    def test_large_logits_stay_finite(self, ouidecay_lab: ModuleType) -> None:
        logits = np.array([[1000.0, 0.0]])
        assert ouidecay_lab.loss(logits, np.array([0])) == pytest.approx(0.0, abs=1e-12)
        assert ouidecay_lab.loss(logits, np.array([1])) == pytest.approx(1000.0)

    def test_duplicated_batch_same_loss(self, ouidecay_lab: ModuleType) -> None:
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((6, 4))
        labels = rng.integers(0, 4, size=6)
        single = ouidecay_lab.loss(logits, labels)
        doubled = ouidecay_lab.loss(
            np.concatenate([logits, logits]), np.concatenate([labels, labels])
        )
        assert doubled == pytest.approx(single, rel=1e-12)

    def test_duplicated_batch_same_gradients(self, ouidecay_lab: ModuleType) -> None:
        layers = [
            _spec(ouidecay_lab, "dense", out_features=6),
            _spec(ouidecay_lab, "relu", monitored=True),
            _spec(ouidecay_lab, "dense", out_features=4),
        ]
        net = _net(ouidecay_lab, layers, (3,), classes=4, seed=2)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 3))
        y = rng.integers(0, 4, size=5)
        single = ouidecay_lab.backward(net, ouidecay_lab.forward(net, x), y)
        x2, y2 = np.concatenate([x, x]), np.concatenate([y, y])
        doubled = ouidecay_lab.backward(net, ouidecay_lab.forward(net, x2), y2)
        for layer_id, grads in single.items():
            for name, g in grads.items():
                np.testing.assert_allclose(doubled[layer_id][name], g, rtol=1e-12, atol=1e-15)

    def test_label_out_of_range(self, ouidecay_lab: ModuleType) -> None:
        with pytest.raises(ouidecay_lab.InputError):
            ouidecay_lab.loss(np.zeros((2, 3)), np.array([0, 3]))

    def test_empty_batch(self, ouidecay_lab: ModuleType) -> None:
        with pytest.raises(ouidecay_lab.InputError):
            ouidecay_lab.loss(np.zeros((0, 3)), np.array([], dtype=np.int64))


# ---------------------------------------------------------------------------
# Gradients vs central finite differences
# ---------------------------------------------------------------------------

_FD_STEP = 1e-4
_FD_RTOL = 1e-3
_FD_INSTANCES = 20


def _architectures(lab: ModuleType):
    s = lab.LayerSpec
    return {
        "dense": ([s(kind="dense", out_features=3)], (4,)),
        "relu": (
            [s(kind="dense", out_features=5), s(kind="relu"), s(kind="dense", out_features=3)],
            (4,),
        ),
        "conv2d": (
            [s(kind="conv2d", out_channels=2, kernel_size=3, padding=1), s(kind="flatten"),
             s(kind="dense", out_features=3)],
            (2, 4, 4),
        ),
        "maxpool2d": (
            [s(kind="conv2d", out_channels=2, kernel_size=2), s(kind="maxpool2d", kernel_size=2),
             s(kind="flatten"), s(kind="dense", out_features=3)],
            (1, 5, 5),
        ),
        "flatten": (
            [s(kind="conv2d", out_channels=2, kernel_size=3, stride=2), s(kind="flatten"),
             s(kind="dense", out_features=3)],
            (1, 5, 5),
        ),
    }


def _max_relative_error(lab: ModuleType, net, x, y, rng) -> float:
    grads = lab.backward(net, lab.forward(net, x), y)
    worst = 0.0
    for layer_id, layer_params in net.params.items():
        for name, p in layer_params.items():
            flat = p.reshape(-1)
            picks = rng.choice(flat.size, size=min(flat.size, 12), replace=False)
            numeric = np.empty(picks.size)
            for n, i in enumerate(picks):
                orig = flat[i]
                flat[i] = orig + _FD_STEP
                up = lab.loss(lab.forward(net, x).logits, y)
                flat[i] = orig - _FD_STEP
                down = lab.loss(lab.forward(net, x).logits, y)
                flat[i] = orig
                numeric[n] = (up - down) / (2 * _FD_STEP)
            analytic = grads[layer_id][name].reshape(-1)[picks]
            denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-10)
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst


@pytest.mark.parametrize("kind", ["dense", "relu", "conv2d", "maxpool2d", "flatten"])
def test_gradients_match_finite_differences(ouidecay_lab: ModuleType, kind: str) -> None:
    layers, input_shape = _architectures(ouidecay_lab)[kind]
    rng = np.random.default_rng(100)
    for instance in range(_FD_INSTANCES):
        net = _net(ouidecay_lab, layers, input_shape, seed=instance)
        for layer_params in net.params.values():
            layer_params["bias"][...] = rng.normal(0.0, 0.1, size=layer_params["bias"].shape)
        x = rng.standard_normal((3, *input_shape))
        y = rng.integers(0, 3, size=3)
        err = _max_relative_error(ouidecay_lab, net, x, y, rng)
        assert err < _FD_RTOL, f"{kind} instance {instance}: relative error {err:.2e}"


def test_bias_gradient_is_summed_upstream(ouidecay_lab: ModuleType) -> None:
    layers = [ouidecay_lab.LayerSpec(kind="dense", out_features=2)]
    net = _net(ouidecay_lab, layers, (2,), classes=2)
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([0, 1])
    trace = ouidecay_lab.forward(net, x)
    probs = np.exp(trace.logits - trace.logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(2), y] -= 1.0
    grads = ouidecay_lab.backward(net, trace, y)
    np.testing.assert_allclose(grads["dense0"]["bias"], probs.sum(axis=0) / 2, atol=1e-12)


class TestClipGradNorm:
    def test_scales_to_max_norm(self, ouidecay_lab: ModuleType) -> None:
        grads = {"dense0": {"weight": np.array([[3.0]]), "bias": np.array([4.0])}}
        total = ouidecay_lab.clip_grad_norm(grads, 1.0)
        assert total == pytest.approx(5.0)
        assert grads["dense0"]["weight"][0, 0] == pytest.approx(0.6)
        assert grads["dense0"]["bias"][0] == pytest.approx(0.8)

    def test_below_threshold_untouched(self, ouidecay_lab: ModuleType) -> None:
        grads = {"dense0": {"weight": np.array([[0.3]]), "bias": np.array([0.4])}}
        ouidecay_lab.clip_grad_norm(grads, 1.0)
        assert grads["dense0"]["weight"][0, 0] == 0.3
