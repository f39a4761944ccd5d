from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import concave_two_block, random_three_block, semicircle

from varprof.errors import DomainError
from varprof.freeprob import build_transforms, g_bar, r_transform, spherical_j, stieltjes, stieltjes_quadrature
from varprof.profile import BlockProfile
from varprof.qve import density


@pytest.fixture(scope="module")
def t_sc():
    return build_transforms(semicircle())


@pytest.fixture(scope="module")
def t_three():
    return build_transforms(random_three_block())


def test_stieltjes_semicircle(t_sc) -> None:
    assert stieltjes(t_sc, 3.0) == pytest.approx((3 - math.sqrt(5)) / 2, abs=1e-12)
    assert stieltjes(t_sc, 2.5) == pytest.approx(0.5, abs=1e-12)
    assert 1e6 * stieltjes(t_sc, 1e6) == pytest.approx(1.0, abs=1e-10)


def test_stieltjes_decreasing_positive(t_three) -> None:
    xs = np.linspace(t_three.r + 1e-4, t_three.r + 20, 400)
    G = t_three.G(xs)
    assert np.all(G > 0) and np.all(np.diff(G) < 0)


def test_stieltjes_domain(t_sc) -> None:
    with pytest.raises(DomainError):
        stieltjes(t_sc, 1.5)


@pytest.mark.parametrize("p", [semicircle(), concave_two_block()])
def test_stieltjes_matches_quadrature(p) -> None:
    t = build_transforms(p, density(p, 20001))
    for x in t.r + np.array([0.1, 0.5, 1.0, 2.0]):
        assert abs(stieltjes_quadrature(t, x) - t.G(x)) <= 1e-6


def test_r_transform_semicircle(t_sc) -> None:
    assert r_transform(t_sc, 0.5) == pytest.approx(0.5, abs=1e-12)
    ws = np.linspace(0.01, 0.99, 30)
    assert np.allclose(r_transform(t_sc, ws), ws, atol=1e-12)
    assert abs(r_transform(t_sc, 1e-6)) <= 1e-5


@pytest.mark.parametrize("c", [0.5, 2.0])
def test_r_transform_scaling(c) -> None:
    t = build_transforms(BlockProfile([[c]], [1.0]))
    ws = np.linspace(0.05, 0.9 * t.g_edge, 10)
    assert np.allclose(t.R(ws), c * c * ws, atol=1e-10)


def test_r_transform_domain(t_sc) -> None:
    with pytest.raises(DomainError):
        r_transform(t_sc, 1.5)
    with pytest.raises(DomainError):
        r_transform(t_sc, 0.0)


@pytest.mark.parametrize("p", [semicircle(), concave_two_block(), random_three_block()])
def test_dense_inverse_round_trips(p) -> None:
    t = build_transforms(p)
    xs = np.linspace(t.r + 1e-3, t.r + 10.0, 300)
    assert np.abs(t.K(t.G(xs)) - xs).max() <= 1e-8
    ws = np.linspace(1e-3, t.g_edge * (1 - 1e-6), 300)
    assert np.abs(t.G(t.K(ws)) - ws).max() <= 1e-8


def test_g_edge_semicircle(t_sc) -> None:
    assert t_sc.g_edge == pytest.approx(1.0, abs=1e-6)


def test_g_bar_semicircle(t_sc) -> None:
    assert g_bar(t_sc, 2.5) == pytest.approx(2.0, abs=1e-10)
    xs = np.linspace(2.01, 5.0, 25)
    assert np.allclose(t_sc.g_bar(xs), (xs + np.sqrt(xs**2 - 4)) / 2, atol=1e-10)
    assert t_sc.g_bar(2.0 + 1e-10) == pytest.approx(1.0, abs=1e-4)


@pytest.mark.parametrize("c", [0.5, 3.0])
def test_g_bar_scaling(t_sc, c) -> None:
    t = build_transforms(BlockProfile([[c]], [1.0]))
    xs = c * np.linspace(2.1, 4.0, 8)
    assert np.allclose(t.g_bar(xs), t_sc.g_bar(xs / c) / c, atol=1e-9)


@pytest.mark.parametrize("p", [concave_two_block(), random_three_block()])
def test_g_bar_inverts_extension(p) -> None:
    t = build_transforms(p)
    xs = np.linspace(t.r + 0.05, t.r + 3.0, 20)
    ok, reason = t.check_monotone(float(xs.max()))
    assert ok, reason
    gb = t.g_bar(xs)
    assert np.all(gb >= t.G(xs))
    assert np.abs(t.K_ext(gb) - xs).max() <= 1e-8


def test_extension_matches_annealed_derivative(t_three) -> None:
    from varprof.annealed import annealed_f

    p = random_three_block()
    for w in (0.5 * t_three.g_edge, 1.3 * t_three.g_edge, 2.0 * t_three.g_edge):
        theta = w / 2.0
        psi = annealed_f(p, theta, 1).psi
        assert float(t_three.R(w, extend=True)) == pytest.approx(w * psi @ p.s2 @ psi, abs=1e-8)


def test_spherical_j_zero_and_small_branch(t_sc) -> None:
    assert spherical_j(t_sc, 0.0, 2.5, 1) == 0.0
    for theta in (0.05, 0.2, 0.25):
        assert spherical_j(t_sc, theta, 2.5, 1) == pytest.approx(theta**2, abs=1e-10)


def test_spherical_j_regression(t_sc) -> None:
    # theta = 1 above threshold: 2 - (1/2) int log(5 - 2y) dmu_sc(y), by scipy quad
    from scipy.integrate import quad

    ref = 2.0 - 0.5 * quad(lambda y: math.log(5 - 2 * y) * math.sqrt(4 - y * y) / (2 * math.pi), -2, 2)[0]
    assert spherical_j(t_sc, 1.0, 2.5, 1) == pytest.approx(ref, abs=1e-9)
    assert spherical_j(t_sc, 1.0, 2.5, 1, method="density") == pytest.approx(ref, abs=1e-5)


@pytest.mark.parametrize("beta", [1, 2])
def test_spherical_j_derivative_is_v(t_three, beta) -> None:
    lam = t_three.r + 0.7
    h = 1e-5
    thr = 0.5 * beta * t_three.G(lam)
    for theta in (0.3 * thr, 0.8 * thr, 1.5 * thr, 3.0 * thr):
        fd = (spherical_j(t_three, theta + h, lam, beta) - spherical_j(t_three, theta - h, lam, beta)) / (2 * h)
        tp = 2 * theta / beta
        v = t_three.R(tp) if tp <= t_three.G(lam) else lam - 1.0 / tp
        assert fd == pytest.approx(v, abs=1e-5)


def test_spherical_j_continuous_at_threshold(t_three) -> None:
    lam = t_three.r + 0.7
    thr = 0.5 * t_three.G(lam)
    below = spherical_j(t_three, thr * (1 - 1e-9), lam, 1)
    above = spherical_j(t_three, thr * (1 + 1e-9), lam, 1)
    assert abs(below - above) <= 1e-7


def test_spherical_j_monotone_convex_in_lambda(t_three) -> None:
    lams = np.linspace(t_three.r, t_three.r + 3, 31)
    J = np.array([spherical_j(t_three, 1.0, lam, 1) for lam in lams])
    assert np.all(np.diff(J) >= -1e-12)
    assert np.all(np.diff(J, 2) >= -1e-9)


def test_spherical_j_domain(t_sc) -> None:
    with pytest.raises(DomainError):
        spherical_j(t_sc, 1.0, 1.9, 1)
    with pytest.raises(DomainError):
        spherical_j(t_sc, -1.0, 2.5, 1)
