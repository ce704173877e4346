from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import legendre as npleg

from attnpot import diffcore as dc
from attnpot.encodings import (
    DegreeAllocation,
    FrequencyBank,
    build_lae_code,
    erope_bias,
    lae_expand_head,
    legendre_polynomial,
    real_spherical_harmonics,
    self_token_code,
    sinc_kernel,
    spherical_harmonics_flat,
)
from attnpot.training import random_rotation


def unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.mark.parametrize("degree", range(7))
def test_legendre_matches_numpy_series(degree):
    x = np.linspace(-1, 1, 41)
    coef = np.zeros(degree + 1)
    coef[-1] = 1.0
    np.testing.assert_allclose(legendre_polynomial(degree, x), npleg.legval(x, coef), atol=1e-13)


def test_legendre_rejects_out_of_range():
    with pytest.raises(ValueError):
        legendre_polynomial(2, np.array([1.5]))
    with pytest.raises(ValueError):
        legendre_polynomial(-1, np.array([0.5]))


def test_low_degree_harmonics_closed_form(rng):
    d = unit(rng, 10)
    x, y, z = d.T
    blocks = real_spherical_harmonics(2, d)
    c0 = 0.5 / math.sqrt(math.pi)
    c1 = math.sqrt(3 / (4 * math.pi))
    np.testing.assert_allclose(blocks[0][:, 0], c0)
    np.testing.assert_allclose(blocks[1], c1 * np.stack([y, z, x], 1), atol=1e-14)
    c2 = 0.5 * math.sqrt(15 / math.pi)
    expected = np.stack([c2 * x * y, c2 * y * z, 0.25 * math.sqrt(5 / math.pi) * (3 * z * z - 1),
                         c2 * x * z, 0.5 * c2 * (x * x - y * y)], 1)
    np.testing.assert_allclose(blocks[2], expected, atol=1e-14)


def test_harmonics_orthonormal_by_quadrature():
    # Gauss-Legendre in cos(theta) times uniform phi is exact for these polynomials
    ct, wt = npleg.leggauss(12)
    phi = np.linspace(0, 2 * np.pi, 24, endpoint=False)
    st_ = np.sqrt(1 - ct**2)
    d = np.stack([np.outer(st_, np.cos(phi)), np.outer(st_, np.sin(phi)), np.outer(ct, np.ones_like(phi))], -1)
    w = np.outer(wt, np.full(len(phi), 2 * np.pi / len(phi)))
    y = spherical_harmonics_flat(4, d.reshape(-1, 3))
    gram = (y * w.reshape(-1, 1)).T @ y
    np.testing.assert_allclose(gram, np.eye(25), atol=1e-12)


def test_addition_theorem_thousand_pairs(rng):
    a, b = unit(rng, 1000), unit(rng, 1000)
    cos = np.clip((a * b).sum(1), -1, 1)
    ya, yb = real_spherical_harmonics(4, a), real_spherical_harmonics(4, b)
    for l in range(5):
        lhs = (ya[l] * yb[l]).sum(1)
        rhs = (2 * l + 1) / (4 * math.pi) * legendre_polynomial(l, cos)
        assert np.abs(lhs - rhs).max() < 1e-10


def test_harmonics_reject_bad_directions():
    with pytest.raises(ValueError):
        real_spherical_harmonics(2, np.array([[0.0, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        real_spherical_harmonics(2, np.array([[2.0, 0.0, 0.0]]))


def test_tensor_harmonics_match_numpy_and_differentiate(rng):
    d = unit(rng, 4)
    probe = rng.normal(size=(4, 16))
    with dc.no_grad():
        t = spherical_harmonics_flat(3, dc.Tensor(d)).data
    np.testing.assert_allclose(t, spherical_harmonics_flat(3, d), atol=1e-14)
    _, g = dc.evaluate_with_gradients(
        lambda v: dc.sum_(dc.mul(spherical_harmonics_flat(3, v["d"], check_norm=False), probe)), {"d": d})
    fd = dc.finite_difference_gradient(lambda x: float((spherical_harmonics_flat(3, x, False) * probe).sum()), d, 1e-6)
    np.testing.assert_allclose(g["d"], fd, atol=1e-7)


def test_balanced_allocation():
    a = DegreeAllocation.balanced(10, 3)
    assert a.repeats == (3, 3, 2, 2)
    assert a.head_dim == 10
    assert a.expanded_dim == 3 * 1 + 3 * 3 + 2 * 5 + 2 * 7
    assert len(a.expand_index) == len(a.code_index) == a.expanded_dim
    with pytest.raises(ValueError):
        DegreeAllocation(())


def lae_logit(q, k, di, dj, alloc):
    return float((lae_expand_head(q, alloc) * build_lae_code(di, alloc) * lae_expand_head(k, alloc)
                  * build_lae_code(dj, alloc)).sum())


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_lae_logit_reduces_to_legendre_sum(seed):
    rng = np.random.default_rng(seed)
    alloc = DegreeAllocation((2, 1, 2, 1))
    q, k = rng.normal(size=6), rng.normal(size=6)
    di, dj = unit(rng, 1)[0], unit(rng, 1)[0]
    cos = float(np.clip(di @ dj, -1, 1))
    deg = alloc.channel_degree
    expected = sum(q[c] * k[c] * (2 * deg[c] + 1) / (4 * math.pi) * float(legendre_polynomial(int(deg[c]), cos))
                   for c in range(6))
    assert lae_logit(q, k, di, dj, alloc) == pytest.approx(expected, abs=1e-12)


def test_lae_logits_invariant_under_rotation(rng):
    alloc = DegreeAllocation.balanced(8, 3)
    q, k = rng.normal(size=(20, 8)), rng.normal(size=(20, 8))
    di, dj = unit(rng, 20), unit(rng, 20)
    rot = random_rotation(rng)
    worst = max(abs(lae_logit(q[i], k[i], di[i], dj[i], alloc) - lae_logit(q[i], k[i], di[i] @ rot.T, dj[i] @ rot.T, alloc))
                for i in range(20))
    assert worst < 1e-9


def test_self_token_code_is_degree_zero_only():
    alloc = DegreeAllocation((2, 1, 1))
    code = self_token_code(alloc)
    np.testing.assert_allclose(code[:2], 1 / math.sqrt(4 * math.pi))
    assert not code[2:].any()


def test_sinc_kernel_matches_numpy_and_is_one_at_zero(rng):
    bank = FrequencyBank(8)
    r = np.concatenate([[0.0], rng.uniform(0, 20, 30)])
    ref = np.sinc(r[:, None] * bank.frequencies / np.pi)
    np.testing.assert_allclose(sinc_kernel(r, bank), ref, atol=1e-15)
    with dc.no_grad():
        np.testing.assert_allclose(sinc_kernel(dc.Tensor(r), bank).data, ref, atol=1e-14)
    assert sinc_kernel(np.array([0.0]), bank)[0].tolist() == [1.0] * 8


def test_frequency_bank_is_log_spaced():
    bank = FrequencyBank(5, 1.0, 16.0)
    np.testing.assert_allclose(bank.frequencies, [1, 2, 4, 8, 16])
    with pytest.raises(ValueError):
        FrequencyBank(0)


def test_erope_bias_shape_and_zero_weights(rng):
    bank = FrequencyBank(4)
    r = np.abs(rng.normal(size=(5, 5)))
    assert erope_bias(r, np.zeros((3, 4)), bank).shape == (3, 5, 5)
    assert not erope_bias(r, np.zeros((3, 4)), bank).any()
    w = rng.normal(size=(3, 4))
    b = erope_bias(r, w, bank)
    np.testing.assert_allclose(b[1, 2, 3], (w[1] * sinc_kernel(r[2, 3], bank)).sum(), atol=1e-14)
    with pytest.raises(ValueError):
        erope_bias(-r, w, bank)
