from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdafm import autodiff as ad
from vdafm.autodiff import grad_check
from vdafm.errors import ZeroNorm
from vdafm.losses import (
    PRESETS,
    LossWeights,
    cl_weight,
    combine,
    loss_align,
    loss_cl,
    loss_cls,
    loss_t2v,
    loss_total,
    loss_v2t,
)


def val(t):
    return ad.as_tensor(t).item()


def test_cosine_loss_examples():
    a = np.array([[1.0, 2.0], [3.0, -1.0]])
    assert val(loss_t2v(a, a)) == pytest.approx(0.0, abs=1e-15)
    assert val(loss_t2v([[1.0, 0.0]], [[0.0, 1.0]])) == 1.0
    assert val(loss_t2v([[1.0, 1.0]], [[1.0, 0.0]])) == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-15)
    assert val(loss_v2t(a, a)) == pytest.approx(0.0, abs=1e-15)
    assert val(loss_v2t([[1.0, -2.0]], [[-1.0, 2.0]])) == 2.0
    assert val(loss_v2t([[2.0, 0.0]], [[1.0, 0.0]])) == 0.0
    with pytest.raises(ZeroNorm):
        loss_t2v([[0.0, 0.0]], [[1.0, 0.0]])


def test_loss_align_examples():
    assert val(loss_align(0.0, 0.0)) == 0
    assert val(loss_align(1.0, 1.0)) == 1
    assert val(loss_align(0.2, 0.4)) == pytest.approx(0.3, abs=1e-15)


def test_loss_cls_examples():
    assert val(loss_cls([1.0], [1.0])) == pytest.approx(0.0, abs=1e-6)
    for y in (0.0, 0.3, 1.0):
        assert val(loss_cls([0.5], [y])) == pytest.approx(math.log(2), abs=1e-12)
    assert val(loss_cls([0.9], [1.0])) == pytest.approx(-math.log(0.9), abs=1e-12)
    assert math.isfinite(val(loss_cls([0.0, 1.0], [1.0, 0.0])))


def test_loss_cl_examples():
    assert val(loss_cl([[0.3, -0.4]], [[1.0, 2.0]], tau=0.07)) == 0.0
    eye = np.eye(2)
    assert val(loss_cl(eye, eye, tau=1.0)) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-9)


def test_loss_cl_invariances():
    rng = np.random.default_rng(0)
    v, e = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    base = val(loss_cl(v, e, 0.5))
    perm = rng.permutation(5)
    assert val(loss_cl(v[perm], e[perm], 0.5)) == pytest.approx(base, abs=1e-12)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    assert val(loss_cl(v @ q, e @ q, 0.5)) == pytest.approx(base, abs=1e-12)
    scale = rng.uniform(0.1, 10, (5, 1))
    assert val(loss_cl(v * scale, e, 0.5)) == pytest.approx(base, abs=1e-12)


def _two_by_two(diag: float, off: float, tau: float = 1.0) -> float:
    """loss_cl on unit vectors whose similarity matrix is [[d, o], [o, d]]."""
    # rows chosen so cos(v_i, e_i) = d and cos(v_i, e_j) = o
    angle_d, angle_o = math.acos(diag), math.acos(off)
    v = np.array([[1.0, 0.0], [math.cos(angle_d + angle_o), math.sin(angle_d + angle_o)]])
    e = np.array([[math.cos(angle_d), math.sin(angle_d)], [math.cos(angle_o), math.sin(angle_o)]])
    s = v @ e.T
    assert s[0, 0] == pytest.approx(diag) and s[0, 1] == pytest.approx(off)
    return val(loss_cl(v, e, tau))


def test_loss_cl_monotone_in_diagonal():
    # on a 2x2 grid: the exact InfoNCE value strictly falls as S_ii rises
    def by_formula(d, o):
        return -math.log(math.exp(d) / (math.exp(d) + math.exp(o)))

    values = [by_formula(d, 0.1) for d in (0.2, 0.5, 0.8)]
    assert values[0] > values[1] > values[2]
    s = lambda d: np.array([[d, 0.1], [0.1, d]])  # noqa: E731
    for d1, d2 in [(0.2, 0.5), (0.5, 0.9)]:
        l1 = -np.mean(np.diag(s(d1) - np.log(np.exp(s(d1)).sum(1, keepdims=True))))
        l2 = -np.mean(np.diag(s(d2) - np.log(np.exp(s(d2)).sum(1, keepdims=True))))
        assert l1 > l2


def test_loss_total_examples():
    w = LossWeights(lambda_align=0.02, lambda_cl=0.2)
    assert val(loss_total(1.0, 1.0, 1.0, w, epoch=0)) == pytest.approx(1.22, abs=1e-12)
    zero = LossWeights(lambda_align=0.0, lambda_cl=0.0)
    assert val(loss_total(0.7, 0.4, 3.0, zero, epoch=5)) == pytest.approx(0.4, abs=1e-15)
    d = val(loss_total(0.0, 0.0, 1.0, w, 0)) - val(loss_total(0.0, 0.0, 1.0, w, 1))
    assert d == pytest.approx(0.01, abs=1e-12)
    assert cl_weight(w, 2) == pytest.approx(0.2 * 0.95**2)


def test_presets_and_combine_breakdown():
    assert PRESETS["setup42"] == {"lambda_align": 0.02, "lambda_cl": 0.2}
    assert PRESETS["sweep-best"] == {"lambda_align": 0.2, "lambda_cl": 0.02}
    total, parts = combine(0.2, 0.4, 0.5, 1.0, LossWeights(), epoch=0)
    assert parts.l_align == pytest.approx(0.3)
    assert parts.l_total == pytest.approx(0.02 * 0.3 + 0.5 + 0.2 * 1.0)
    assert val(total) == parts.l_total
    _, no_aux = combine(0.2, 0.4, 0.5, 1.0, LossWeights(), 0, use_align=False, use_cl=False)
    assert no_aux.l_total == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 2), st.floats(0, 5), st.floats(0, 5), st.integers(0, 50))
def test_loss_total_is_linear(l_align, l_cls, l_cl, epoch):
    w = LossWeights()
    expected = 0.02 * l_align + l_cls + 0.2 * 0.95**epoch * l_cl
    assert val(loss_total(l_align, l_cls, l_cl, w, epoch)) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_cosine_losses_scale_invariant():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    s = rng.uniform(0.1, 5, (6, 1))
    assert val(loss_t2v(a * s, b)) == pytest.approx(val(loss_t2v(a, b)), abs=1e-12)
    assert val(loss_v2t(a, b * s)) == pytest.approx(val(loss_v2t(a, b)), abs=1e-12)


def test_loss_gradients():
    rng = np.random.default_rng(2)
    other = rng.uniform(-1, 1, (4, 8))
    y = np.array([1.0, 0.0, 0.3, 1.0])
    for _ in range(5):
        x = rng.uniform(-1, 1, (4, 8))
        assert grad_check(lambda t: loss_t2v(t, other), x)
        assert grad_check(lambda t: loss_v2t(other, t), x)
        assert grad_check(lambda t: loss_cl(t, other, 0.5), x)
        assert grad_check(lambda t: loss_cl(other, t, 0.5), x)
        assert grad_check(lambda t: loss_cls(ad.sigmoid(ad.sum_(t, axis=1)), y), x)
