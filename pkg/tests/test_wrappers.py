import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from esegeta import tensor as T
from esegeta.tensor import Tensor
from esegeta.wrappers import (
    DegenerateInputError,
    PixelwiseWrapper,
    ThresholdWrapper,
    make_wrapper,
    normalize,
    otsu_threshold,
    wrap_pixelwise,
    wrap_threshold,
)


def otsu_oracle(v):
    """Exhaustive 256-bin search written independently: bins ((k-1)/256, k/256], centre (k-0.5)/256."""
    v = np.asarray(v, dtype=np.float64).ravel()
    hist = np.zeros(256)
    for val in v:
        k = 0 if val == 0 else int(np.ceil(val * 256)) - 1
        hist[min(k, 255)] += 1
    centres = (np.arange(256) + 0.5) / 256
    best, best_k = -1.0, None
    for k in range(1, 256):
        w0, w1 = hist[:k].sum(), hist[k:].sum()
        if w0 == 0 or w1 == 0:
            continue
        m0 = (hist[:k] * centres[:k]).sum() / w0
        m1 = (hist[k:] * centres[k:]).sum() / w1
        var = w0 * w1 * (m0 - m1) ** 2
        if var > best + 1e-12:
            best, best_k = var, k
    return None if best_k is None else best_k / 256


def test_normalize_examples():
    np.testing.assert_allclose(normalize(np.array([0.0, 5.0, 10.0])), [0, 0.5, 1])
    a = np.array([0.0, 0.3, 1.0])
    np.testing.assert_array_equal(normalize(a), a)
    with pytest.raises(DegenerateInputError, match="degenerate range"):
        normalize(np.full(4, 2.0))


def test_otsu_examples():
    th = otsu_threshold(np.array([0.1, 0.1, 0.9, 0.9]))
    assert 0.1 < th < 0.9
    th01 = otsu_threshold(np.array([0.0, 1.0, 0.0, 1.0]))
    assert 0 < th01 < 1 and th01 == 1 / 256  # smallest qualifying threshold
    with pytest.raises(ValueError):
        otsu_threshold(np.full(3, 0.5))
    with pytest.raises(DegenerateInputError, match="one histogram bin"):
        otsu_threshold(np.array([0.0, 1 / 256]))


@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(0, 1)))
def test_otsu_matches_oracle_and_permutation(v):
    if len(np.unique(v)) < 2:
        return
    expect = otsu_oracle(v)
    if expect is None:
        with pytest.raises(DegenerateInputError):
            otsu_threshold(v)
        return
    th = otsu_threshold(v)
    assert th == expect
    assert otsu_threshold(v[::-1].copy()) == th
    assert 0 <= th <= 1


def test_pixelwise_example():
    s = Tensor(np.array([[[[1.0, 1.0], [1.0, 1.0]], [[2.0, 0.0], [0.0, 0.0]]]]))
    r1, r0 = wrap_pixelwise(s, 1), wrap_pixelwise(s, 0)
    assert float(r1.scalar.data) == 2.0 and float(r0.scalar.data) == 3.0
    np.testing.assert_array_equal(r1.mask, [[[1, 0], [0, 0]]])
    np.testing.assert_array_equal(r1.counts, [3, 1])
    with pytest.raises(ValueError):
        PixelwiseWrapper(2).bind(s.data)


def test_pixelwise_ties_go_to_class_zero():
    s = Tensor(np.ones((1, 2, 2, 2)))
    assert float(wrap_pixelwise(s, 1).scalar.data) == 0.0
    assert not wrap_pixelwise(s, 1).mask.any()


@given(arrays(np.float64, (1, 3, 3, 3), elements=st.floats(-5, 5)), st.randoms())
def test_pixelwise_invariants(scores, rnd):
    outs = [float(wrap_pixelwise(Tensor(scores, dtype=np.float64), c).scalar.data) for c in range(3)]
    assert np.isclose(sum(outs), scores.max(axis=1).sum())
    perm = list(range(9))
    rnd.shuffle(perm)
    shuffled = scores.reshape(1, 3, 9)[..., perm].reshape(scores.shape)
    outs2 = [float(wrap_pixelwise(Tensor(shuffled, dtype=np.float64), c).scalar.data) for c in range(3)]
    np.testing.assert_allclose(outs, outs2)


def test_threshold_example():
    s = Tensor(np.array([[[[0.1, 0.1], [0.9, 0.9]]]]), dtype=np.float64)
    assert np.isclose(float(wrap_threshold(s, 1).scalar.data), 1.8)
    assert np.isclose(float(wrap_threshold(s, 0).scalar.data), 0.2)
    doubled = Tensor(s.data * 2, dtype=np.float64)
    np.testing.assert_array_equal(wrap_threshold(doubled, 1).mask, wrap_threshold(s, 1).mask)
    assert np.isclose(float(wrap_threshold(doubled, 1).scalar.data), 3.6)
    one = Tensor(np.array([[[[0.2, 0.2], [0.2, 0.7]]]]))
    assert wrap_threshold(one, 1).mask.sum() == 1
    with pytest.raises(DegenerateInputError):
        wrap_threshold(Tensor(np.ones((1, 1, 2, 2))), 1)


def test_mask_is_constant_under_backward():
    x = Tensor(np.array([[[[1.0, 3.0], [2.0, 0.0]], [[2.0, 1.0], [0.0, 5.0]]]]), requires_grad=True, dtype=np.float64)
    bound = make_wrapper("pixelwise", 1).bind(x.data)
    (g,) = T.grad(bound.score(x), [x])
    np.testing.assert_array_equal(g[0, 1], bound.region[0])
    np.testing.assert_array_equal(g[0, 0], 0)


def test_threshold_wrapper_checks():
    with pytest.raises(ValueError):
        ThresholdWrapper(1).bind(np.ones((1, 2, 2, 2)))
    with pytest.raises(ValueError):
        make_wrapper("soft", 0)
