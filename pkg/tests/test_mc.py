from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import concave_two_block, semicircle

from varprof.errors import DomainError
from varprof.mc import (
    EntryLaw,
    deformation,
    deformed_sample,
    esd_check,
    lambda_max_samples,
    norm_tightness,
    sample_matrix,
    tail_estimate,
    trial_rng,
    wilson_interval,
)
from varprof.profile import BlockProfile, GridProfile, materialize
from varprof.qve import density


@pytest.mark.parametrize("kind", ["gaussian", "rademacher", "uniform_sqrt3"])
def test_entry_moments_real(kind) -> None:
    law = EntryLaw(kind, 1)
    off, diag = law.draw(trial_rng(1, 0), 200000, 200000)
    assert abs(off.mean()) <= 0.01 and abs(off.var() - 1) <= 0.02
    assert abs(diag.var() - 2) <= 0.04


def test_entry_moments_complex() -> None:
    off, diag = EntryLaw("gaussian", 2).draw(trial_rng(2, 0), 200000, 200000)
    assert abs(off.real.var() - 0.5) <= 0.01 and abs(off.imag.var() - 0.5) <= 0.01
    assert abs(np.mean(np.abs(off) ** 2) - 1) <= 0.02
    assert np.isrealobj(diag) and abs(diag.var() - 1) <= 0.02


def test_bad_law() -> None:
    with pytest.raises(DomainError):
        EntryLaw("cauchy", 1)
    with pytest.raises(DomainError):
        EntryLaw("gaussian", 4)


def test_sample_symmetric_and_scaled() -> None:
    p = BlockProfile([[1.0, 0.0], [0.0, 3.0]], [0.5, 0.5])
    X = sample_matrix(p, 40, EntryLaw("gaussian", 1), 7)
    assert np.array_equal(X, X.T)
    assert np.all(X[:20, 20:] == 0)
    H = sample_matrix(p, 40, EntryLaw("gaussian", 2), 7)
    assert np.array_equal(H, H.conj().T)
    assert np.all(np.diag(H).imag == 0)


def test_trials_are_reproducible_individually() -> None:
    p = semicircle()
    law = EntryLaw("rademacher", 1)
    lam = lambda_max_samples(p, 30, law, 6, 99)
    single = np.linalg.eigvalsh(sample_matrix(p, 30, law, 99, trial=4))[-1]
    assert abs(single - lam[4]) <= 1e-12
    assert np.array_equal(lam, lambda_max_samples(p, 30, law, 6, 99))
    assert not np.array_equal(lam, lambda_max_samples(p, 30, law, 6, 100))


def test_parallel_matches_serial() -> None:
    p = concave_two_block()
    law = EntryLaw("gaussian", 2)
    serial = lambda_max_samples(p, 25, law, 7, 3)
    assert np.array_equal(serial, lambda_max_samples(p, 25, law, 7, 3, threads=2))


def test_size_cap() -> None:
    with pytest.raises(DomainError):
        sample_matrix(semicircle(), 5000, EntryLaw(), 0)


def test_grid_profile_sampling() -> None:
    g = GridProfile.from_function(lambda x, y: 1.0 + x * y, 32)
    X = sample_matrix(g, 50, EntryLaw(), 1)
    assert np.array_equal(X, X.T)
    assert np.all((X == 0) | (materialize(g, 50).entries > 0))


def test_deformation_structure() -> None:
    p = concave_two_block()
    psi = np.array([0.3, 0.7])
    M = deformation(p, 10, psi)
    sm = materialize(p, 10)
    sizes = np.array(sm.block_sizes)
    e = np.repeat(np.sqrt(psi / sizes), sizes)
    assert np.allclose(M, sm.entries**2 * np.outer(e, e))
    with pytest.raises(DomainError):
        deformation(p, 10, np.array([0.5, 0.6]))


def test_deformed_sample_shift() -> None:
    p = semicircle()
    law = EntryLaw()
    X = sample_matrix(p, 20, law, 5)
    Y = deformed_sample(p, 20, law, 0.8, np.array([1.0]), 1, 5)
    assert np.allclose(Y - X, 1.6 / 20 * np.ones((20, 20)))


def test_esd_distance_small_and_shrinking() -> None:
    p = semicircle()
    d = density(p, 8001)
    law = EntryLaw()
    a = esd_check(p, 200, law, 20, 4, spectral_density=d)
    b = esd_check(p, 400, law, 20, 4, spectral_density=d)
    assert a.distance <= 0.02 and b.distance < a.distance
    assert a.histogram_counts.sum() == 200 * 20


def test_norm_tightness() -> None:
    rep = norm_tightness(concave_two_block(), 100, EntryLaw("uniform_sqrt3", 1), 10, 2)
    assert rep["violations"] == 0


def test_wilson_interval() -> None:
    lo, hi = wilson_interval(0, 100)
    assert lo == 0.0 and 0.03 < hi < 0.04
    lo, hi = wilson_interval(50, 100)
    assert lo < 0.5 < hi and hi - 0.5 == pytest.approx(0.5 - lo)
    with pytest.raises(DomainError):
        wilson_interval(1, 0)


def test_tail_estimate_report() -> None:
    p = semicircle()
    reports = tail_estimate(p, [20, 40], EntryLaw(), [2.1, 2.5], 400, 8, rates={2.5: 0.24435})
    assert [r.N for r in reports] == [20, 40]
    e = reports[0].tail_estimates[2.1]
    assert e["wilson_low"] <= e["p_hat"] <= e["wilson_high"]
    assert e["count"] == int(np.count_nonzero(reports[0].lambda_max_samples > 2.1))
    assert reports[1].tail_estimates[2.5]["rate"] == 0.24435
    for r in reports:
        for x, est in r.tail_estimates.items():
            if est["count"]:
                assert est["log_rate"] == pytest.approx(-math.log(est["p_hat"]) / r.N)
            else:
                assert est["log_rate"] is None and est["log_rate_bound"] > 0


def test_tail_threshold_inside_bulk() -> None:
    with pytest.raises(DomainError):
        tail_estimate(semicircle(), [20], EntryLaw(), [1.5], 10, 0)
