import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ticnet import curvature as cv
from ticnet.grad import grad, per_sample_grads
from ticnet.network import Activation, NetworkSpec, ParamVector, init_params, softmax, forward

DENSE, BLOCK, DIAG = cv.Representation.DENSE, cv.Representation.BLOCK, cv.Representation.DIAG


def case(seed, relu=True, skip=False, depth=2, n=8, k=3):
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(3, (4,) * depth, k, Activation.RELU if relu else Activation.IDENTITY, skip)
    params = init_params(spec, seed)
    params.values[:] += 0.1 * rng.standard_normal(len(params))
    return spec, params, rng.standard_normal((n, 3)), rng.integers(0, k, n)


def bias_only_spec():
    # Zero input dimension is not allowed, so a model whose weights see a zero input acts as bias-only.
    return NetworkSpec(1, (), 2, Activation.IDENTITY)


class TestGgn:
    def test_uniform_bias_only(self):
        spec = bias_only_spec()
        g = cv.ggn(spec, ParamVector.zeros(spec), np.zeros((1, 1))).values
        np.testing.assert_allclose(g[2:, 2:], [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)
        assert not g[:2].any()

    def test_representations_are_extractions(self):
        spec, params, x, _ = case(0, skip=True)
        dense = cv.ggn(spec, params, x, representation=DENSE)
        block = cv.ggn(spec, params, x, representation=BLOCK)
        diag = cv.ggn(spec, params, x, representation=DIAG)
        np.testing.assert_array_equal(diag.values, dense.diagonal())
        for seg, b in zip(spec.layout(), block.blocks):
            np.testing.assert_array_equal(b, dense.values[seg.start:seg.stop, seg.start:seg.stop])
        assert dense.trace() == block.trace() == diag.trace()
        assert sum(b.shape[0] for b in block.blocks) == len(params)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.booleans(), st.booleans(), st.integers(0, 3))
    def test_symmetric_psd(self, seed, relu, skip, depth):
        spec, params, x, _ = case(seed, relu, skip and depth > 1, depth)
        g = cv.ggn(spec, params, x)
        np.testing.assert_array_equal(g.values, g.values.T)
        assert g.is_psd()

    def test_cap(self):
        spec, params, x, _ = case(1)
        with pytest.raises(cv.ResourceCapError):
            cv.ggn(spec, params, x, cap=10)
        cv.ggn(spec, params, x, representation=DIAG, cap=10)

    def test_empty_batch(self):
        spec, params, x, _ = case(2)
        with pytest.raises(ValueError):
            cv.ggn(spec, params, x[:0])


class TestFisher:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.booleans(), st.booleans(), st.integers(0, 3))
    def test_equals_ggn(self, seed, relu, skip, depth):
        spec, params, x, _ = case(seed, relu, skip and depth > 1, depth)
        f = cv.fisher_exact(spec, params, x).values
        g = cv.ggn(spec, params, x).values
        assert np.linalg.norm(f - g) <= 1e-10 * np.linalg.norm(g)

    def test_closed_sum_oracle(self):
        spec, params, x, _ = case(3)
        p = softmax(forward(spec, params, x))
        expected = np.zeros((len(params), len(params)))
        for i in range(len(x)):
            for label in range(spec.num_classes):
                g = grad(spec, params, x[i], label)
                expected += p[i, label] * np.outer(g, g)
        np.testing.assert_allclose(cv.fisher_exact(spec, params, x).values, expected / len(x), atol=1e-13)

    def test_uniform_trace(self):
        spec = bias_only_spec()
        assert cv.fisher_exact(spec, ParamVector.zeros(spec), np.zeros((1, 1))).trace() == pytest.approx(0.5)

    def test_saturated(self):
        spec = bias_only_spec()
        params = ParamVector.for_spec(spec, [0.0, 0.0, 30.0, -30.0])
        assert np.abs(cv.fisher_exact(spec, params, np.zeros((1, 1))).values).max() < 1e-24


class TestFisherMc:
    def test_seeded(self):
        spec, params, x, _ = case(4)
        a = cv.fisher_mc(spec, params, x, m=3, seed=9).values
        np.testing.assert_array_equal(a, cv.fisher_mc(spec, params, x, m=3, seed=9).values)

    def test_m_zero(self):
        spec, params, x, _ = case(4)
        with pytest.raises(ValueError):
            cv.fisher_mc(spec, params, x, m=0)

    def test_degenerate_categorical(self):
        spec = NetworkSpec(2, (), 2, Activation.IDENTITY)
        params = ParamVector.for_spec(spec, [0.0, 0.0, 0.0, 0.0, 40.0, -40.0])
        x = np.random.default_rng(5).standard_normal((6, 2))
        np.testing.assert_allclose(cv.fisher_mc(spec, params, x, m=1, seed=1).values,
                                   cv.fisher_exact(spec, params, x).values, atol=1e-30)

    def test_converges(self):
        spec, params, x, _ = case(6, n=20)
        exact = cv.fisher_exact(spec, params, x).values
        est = cv.fisher_mc(spec, params, x, m=5000, seed=3).values
        assert np.linalg.norm(est - exact) < 0.05 * np.linalg.norm(exact)

    def test_unbiased_with_many_seeds(self):
        # With enough seeds the sample standard errors are reliable and no
        # entry should stray far from the exact Fisher.
        spec = NetworkSpec(2, (3,), 2, Activation.RELU)
        params = init_params(spec, 7)
        x = np.random.default_rng(7).standard_normal((10, 2))
        exact = cv.fisher_exact(spec, params, x).values
        draws = np.stack([cv.fisher_mc(spec, params, x, m=1, seed=s).values for s in range(3000)])
        se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
        z = np.abs(draws.mean(axis=0) - exact) / np.where(se > 0, se, np.inf)
        assert z.max() < 4.0


class TestGradCovariance:
    def test_single_example(self):
        spec, params, x, y = case(8)
        g = grad(spec, params, x[0], y[0])
        c = cv.grad_covariance(spec, params, x[:1], y[:1])
        np.testing.assert_allclose(c.values, np.outer(g, g), atol=1e-15)
        assert c.trace() == pytest.approx(g @ g, rel=1e-13)

    def test_identical_gradients(self):
        spec, params, x, y = case(9)
        xs, ys = np.repeat(x[:1], 5, axis=0), np.repeat(y[:1], 5)
        g = grad(spec, params, x[0], y[0])
        np.testing.assert_allclose(cv.grad_covariance(spec, params, xs, ys).values, np.outer(g, g), atol=1e-14)

    def test_double_loop(self):
        spec, params, x, y = case(10, skip=True)
        rows = per_sample_grads(spec, params, x, y)
        d = len(params)
        expected = np.zeros((d, d))
        for i in range(len(x)):
            for a in range(d):
                for b in range(d):
                    expected[a, b] += rows[i, a] * rows[i, b]
        np.testing.assert_allclose(cv.grad_covariance(spec, params, x, y).values, expected / len(x), atol=1e-12)

    def test_uncentered(self):
        spec, params, x, y = case(11)
        rows = per_sample_grads(spec, params, x, y)
        c = cv.grad_covariance(spec, params, x, y).values
        centered = np.cov(rows.T, bias=True)
        np.testing.assert_allclose(c - centered, np.outer(rows.mean(0), rows.mean(0)), atol=1e-12)


@pytest.mark.parametrize("name", ["ggn", "fisher_exact", "fisher_mc", "grad_covariance"])
def test_permutation_invariance(name):
    spec, params, x, y = case(12, n=10)
    perm = np.random.default_rng(12).permutation(10)
    if name == "grad_covariance":
        a = cv.grad_covariance(spec, params, x, y).values
        b = cv.grad_covariance(spec, params, x[perm], y[perm]).values
    elif name == "fisher_mc":
        # resampled labels follow the rows, so compare the exact label-count form instead
        a = cv.fisher_mc(spec, params, x, m=1000, seed=0).values
        b = cv.fisher_mc(spec, params, x[perm], m=1000, seed=0).values
        np.testing.assert_allclose(a, b, atol=0.05 * np.abs(a).max())
        return
    else:
        fn = getattr(cv, name)
        a, b = fn(spec, params, x).values, fn(spec, params, x[perm]).values
    np.testing.assert_allclose(a, b, atol=1e-12)


class TestNtk:
    def test_bias_block(self):
        spec = NetworkSpec(2, (), 3, Activation.IDENTITY)
        gram = cv.ntk_gram(spec, init_params(spec, 0), np.zeros((1, 2)))
        np.testing.assert_array_equal(gram, np.eye(3))

    def test_psd(self):
        spec, params, x, _ = case(13, skip=True)
        gram = cv.ntk_gram(spec, params, x)
        assert gram.shape == (len(x) * 3,) * 2
        assert np.linalg.eigvalsh(gram)[0] >= -1e-8 * np.trace(gram) / gram.shape[0]

    def test_drift_self_zero(self):
        spec, params, x, _ = case(14)
        gram = cv.ntk_gram(spec, params, x)
        assert cv.kernel_drift(gram, gram) == 0.0

    def test_cap(self):
        spec, params, _, _ = case(15)
        with pytest.raises(cv.ResourceCapError):
            cv.ntk_gram(spec, params, np.zeros((cv.MAX_NTK_SIZE, 3)))


@pytest.mark.parametrize("rep", [DENSE, BLOCK, DIAG])
def test_dump_load_roundtrip(tmp_path, rep):
    spec, params, x, _ = case(16)
    m = cv.fisher_exact(spec, params, x, representation=rep)
    path = tmp_path / "m.bin"
    cv.dump_matrix(m, path)
    back = cv.load_matrix(path)
    assert type(back) is type(m)
    if rep is BLOCK:
        for a, b in zip(m.blocks, back.blocks):
            np.testing.assert_array_equal(a, b)
    else:
        np.testing.assert_array_equal(m.values, back.values)


def test_diag_clamp():
    assert cv.DiagVector(np.array([-1e-15, 1.0])).values[0] == 0.0
    with pytest.raises(ValueError):
        cv.DiagVector(np.array([-1e-3, 1.0]))
