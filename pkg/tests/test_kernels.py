import numpy as np
import pytest

from dtrec import kernels
from dtrec.kernels import _fallback

compiled = pytest.mark.skipif(kernels.BACKEND != "compiled", reason="extension not built")


def cases(rng):
    x = rng.normal(size=(3, 5, 8)).astype(np.float32)
    g = rng.normal(size=x.shape).astype(np.float32)
    gamma = (1 + 0.1 * rng.normal(size=8)).astype(np.float32)
    beta = (0.1 * rng.normal(size=8)).astype(np.float32)
    _, xhat, inv = _fallback.layer_norm_forward(x, gamma, beta, 1e-5)
    X = rng.normal(size=(60, 4))
    C = X[:6].copy()
    labels = _fallback.assign_nearest(X, C)[0]
    scores = rng.normal(size=(7, 20)).astype(np.float32)
    scores[0, 5] = scores[0, 3]
    return {
        "all_finite": (x,),
        "layer_norm_forward": (x, gamma, beta, 1e-5),
        "layer_norm_backward": (g, xhat, inv, gamma),
        "gelu_forward": (x,),
        "gelu_backward": (g, x),
        "scatter_add_rows": (10, rng.integers(0, 10, size=(3, 5)), x),
        "assign_nearest": (X, C),
        "accumulate_centers": (X, labels, 6),
        "count_ranks": (scores, np.array([3, 1, 19, 2, 2, 7, 10])),
        "hartigan_refine": (X, labels, 6),
    }


def flatten(out):
    return out if isinstance(out, tuple) else (out,)


def test_every_kernel_has_a_case():
    assert set(cases(np.random.default_rng(0))) == set(kernels.NAMES)


@compiled
@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("name", kernels.NAMES)
def test_backends_agree(name, seed):
    args = cases(np.random.default_rng(seed))[name]
    py = flatten(kernels.implementation(name, "python")(*args))
    cc = flatten(kernels.implementation(name, "compiled")(*args))
    assert len(py) == len(cc)
    for a, b in zip(py, cc):
        if isinstance(a, np.ndarray):
            assert a.shape == np.shape(b)
            if a.dtype.kind in "iub":
                np.testing.assert_array_equal(a, b)
            else:
                np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)
        else:
            assert a == b


@compiled
def test_all_finite_detects_nan_and_inf():
    for backend in ("python", "compiled"):
        fn = kernels.implementation("all_finite", backend)
        x = np.ones((4, 4), np.float32)
        assert fn(x)
        x[2, 1] = np.nan
        assert not fn(x)
        x[2, 1] = -np.inf
        assert not fn(x)


def test_routing_prefers_numpy_where_it_is_faster():
    for name in kernels.NAMES:
        chosen = kernels.implementation(name)
        if kernels.BACKEND == "python" or name in kernels.NUMPY_PREFERRED:
            assert chosen is getattr(_fallback, name)
        else:
            assert chosen is not getattr(_fallback, name)
    with pytest.raises(KeyError):
        kernels.implementation("nope")


def test_hartigan_refine_lowers_sse_and_leaves_input_alone():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(80, 3))
    labels = rng.integers(0, 5, size=80)
    before = labels.copy()
    centers, out, moves = kernels.hartigan_refine(X, labels, 5)
    np.testing.assert_array_equal(labels, before)

    def sse(lab):
        return sum(((X[lab == j] - X[lab == j].mean(0)) ** 2).sum() for j in range(5))

    assert moves > 0 and sse(out) < sse(before)
    np.testing.assert_allclose(centers, [X[out == j].mean(0) for j in range(5)])
