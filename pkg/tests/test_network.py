import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ticnet.network import (
    Activation,
    DimensionError,
    LabeledDataset,
    NetworkSpec,
    ParamVector,
    batch_mean_loss,
    forward,
    init_params,
    loss,
    losses,
    mean_loss,
)


def straight_line_forward(spec, theta, x):
    """Independent forward pass that slices the flat vector by hand."""
    h = np.asarray(x, dtype=float)
    offset = 0
    sizes = [spec.input_dim, *spec.hidden_widths, spec.num_classes]
    for layer in range(len(sizes) - 1):
        fan_in, fan_out = sizes[layer], sizes[layer + 1]
        w = theta[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = theta[offset:offset + fan_out]
        offset += fan_out
        z = [sum(w[i, j] * h[j] for j in range(fan_in)) + b[i] for i in range(fan_out)]
        z = np.array(z)
        if layer == len(sizes) - 2:
            return z
        a = np.maximum(z, 0) if spec.activation is Activation.RELU else z
        h = a + h if spec.skip_connections and layer > 0 else a


specs = st.builds(
    lambda inp, depth, width, k, relu, skip: NetworkSpec(
        inp, (width,) * depth, k, Activation.RELU if relu else Activation.IDENTITY, skip and depth > 1),
    st.integers(1, 5), st.integers(0, 3), st.integers(1, 6), st.integers(2, 5), st.booleans(), st.booleans())


class TestNetworkSpec:
    def test_param_count(self):
        spec = NetworkSpec(3, (4, 5), 2)
        assert spec.num_params == (3 * 4 + 4) + (4 * 5 + 5) + (5 * 2 + 2)

    @given(specs)
    def test_layout_partitions_range(self, spec):
        covered = []
        for seg in spec.layout():
            covered.extend(range(seg.start, seg.stop))
            assert seg.bias_offset == seg.weight_offset + seg.fan_in * seg.fan_out
        assert covered == list(range(spec.num_params))

    def test_skip_requires_equal_widths(self):
        with pytest.raises(ValueError):
            NetworkSpec(2, (3, 4), 2, skip_connections=True)

    @pytest.mark.parametrize("kwargs", [dict(input_dim=0), dict(num_classes=1), dict(hidden_widths=(0,))])
    def test_invalid(self, kwargs):
        base = dict(input_dim=2, hidden_widths=(3,), num_classes=2)
        with pytest.raises(ValueError):
            NetworkSpec(**{**base, **kwargs})

    def test_dict_roundtrip(self):
        spec = NetworkSpec(3, (4, 4), 5, Activation.IDENTITY, True)
        assert NetworkSpec.from_dict(spec.to_dict()) == spec


class TestForward:
    def test_zero_params(self):
        spec = NetworkSpec(4, (3,), 5)
        np.testing.assert_array_equal(forward(spec, ParamVector.zeros(spec), np.ones(4)), np.zeros(5))

    def test_identity_composition(self):
        spec = NetworkSpec(2, (2,), 2, Activation.IDENTITY)
        theta = np.array([1, 0, 0, 1, 0, 0, 1, 0, 0, 1, 0, 0], dtype=float)
        np.testing.assert_array_equal(forward(spec, ParamVector.for_spec(spec, theta), [1.0, 2.0]), [1.0, 2.0])

    @settings(max_examples=40, deadline=None)
    @given(specs, st.integers(0, 2**32 - 1))
    def test_matches_straight_line(self, spec, seed):
        rng = np.random.default_rng(seed)
        params = init_params(spec, seed)
        params.values[:] += 0.1 * rng.standard_normal(len(params))
        x = rng.standard_normal(spec.input_dim)
        np.testing.assert_allclose(forward(spec, params, x), straight_line_forward(spec, params.values, x),
                                   rtol=1e-12, atol=1e-13)

    def test_linear_network_collapses(self):
        spec = NetworkSpec(3, (4, 5), 2, Activation.IDENTITY)
        params = init_params(spec, 1)
        params.values[:] += 0.1
        (w1, b1), (w2, b2), (w3, b3) = params.layers()
        w = w3 @ w2 @ w1
        b = w3 @ (w2 @ b1 + b2) + b3
        x = np.random.default_rng(1).standard_normal((6, 3))
        np.testing.assert_allclose(forward(spec, params, x), x @ w.T + b, rtol=1e-10)

    def test_batch_matches_rows(self):
        spec = NetworkSpec(3, (4, 4), 3, skip_connections=True)
        params = init_params(spec, 2)
        x = np.random.default_rng(2).standard_normal((5, 3))
        batch = forward(spec, params, x)
        for i in range(5):
            np.testing.assert_allclose(batch[i], forward(spec, params, x[i]), rtol=1e-14, atol=1e-15)
        np.testing.assert_array_equal(batch, forward(spec, params, x))

    def test_dimension_errors(self):
        spec = NetworkSpec(3, (4,), 2)
        with pytest.raises(DimensionError):
            forward(spec, init_params(spec, 0), np.ones(4))
        other = NetworkSpec(3, (5,), 2)
        with pytest.raises(DimensionError):
            forward(spec, init_params(other, 0), np.ones(3))

    def test_init_deterministic_and_scaled(self):
        spec = NetworkSpec(400, (300,), 2)
        a, b = init_params(spec, 7), init_params(spec, 7)
        np.testing.assert_array_equal(a.values, b.values)
        w1, b1 = next(a.layers())
        assert abs(w1.var() - 2.0 / 400) < 0.05 * 2.0 / 400
        assert not b1.any()


class TestLoss:
    def test_uniform(self):
        assert loss(np.zeros(10), 3) == pytest.approx(math.log(10), abs=1e-15)

    def test_saturation(self):
        value = loss(np.array([1000.0, 0.0]), 0)
        assert math.isfinite(value) and value == pytest.approx(0.0, abs=1e-300)
        assert math.isfinite(loss(np.array([-1000.0, 1000.0]), 0))

    def test_high_precision(self):
        mpmath.mp.dps = 50
        expected = -mpmath.log(mpmath.e ** 2 / (mpmath.e + mpmath.e ** 2 + mpmath.e ** 3))
        assert loss(np.array([1.0, 2.0, 3.0]), 1) == pytest.approx(float(expected), rel=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            loss(np.zeros(3), 3)
        with pytest.raises(ValueError):
            losses(np.zeros((2, 3)), np.array([0, 5]))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8), st.data())
    def test_nonnegative(self, logits, data):
        label = data.draw(st.integers(0, len(logits) - 1))
        assert loss(np.array(logits), label) >= 0.0


def small_dataset(n=12, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset.from_fractions(rng.standard_normal((n, 3)), rng.integers(0, 3, n), seed=seed)


class TestDataset:
    def test_split_partition(self):
        ds = small_dataset(20)
        joined = np.concatenate([ds.split[s] for s in ("train", "validation", "test")])
        assert sorted(joined) == list(range(20))
        assert ds.size("train") == 14

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((3, 1)), [0, 1, 0], {"train": [0, 1], "test": [1, 2]})

    def test_missing_index_rejected(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((3, 1)), [0, 1, 0], {"train": [0, 1]})

    def test_negative_label_rejected(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 1)), [0, -1])


class TestMeanLoss:
    spec = NetworkSpec(3, (4,), 3)

    def test_single_example(self):
        params = init_params(self.spec, 0)
        ds = LabeledDataset(np.array([[0.5, -1.0, 2.0]]), [2])
        assert mean_loss(self.spec, params, ds) == loss(forward(self.spec, params, ds.features[0]), 2)

    def test_hand_summed(self):
        rng = np.random.default_rng(3)
        params = init_params(self.spec, 3)
        x, y = rng.standard_normal((5, 3)), rng.integers(0, 3, 5)
        total = sum(loss(forward(self.spec, params, x[i]), int(y[i])) for i in range(5))
        assert batch_mean_loss(self.spec, params, x, y) == pytest.approx(total / 5, rel=1e-12)

    def test_duplication_and_permutation(self):
        rng = np.random.default_rng(4)
        params = init_params(self.spec, 4)
        x, y = rng.standard_normal((9, 3)), rng.integers(0, 3, 9)
        base = batch_mean_loss(self.spec, params, x, y)
        assert batch_mean_loss(self.spec, params, np.repeat(x, 2, axis=0), np.repeat(y, 2)) == pytest.approx(base, rel=1e-12)
        perm = rng.permutation(9)
        assert batch_mean_loss(self.spec, params, x[perm], y[perm]) == pytest.approx(base, rel=1e-12)

    def test_empty_split(self):
        ds = LabeledDataset(np.zeros((2, 3)), [0, 1])
        with pytest.raises(ValueError):
            mean_loss(self.spec, init_params(self.spec, 0), ds, "test")
