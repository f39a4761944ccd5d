"""Monte Carlo sampling of variance-profile Wigner matrices.

``X = Sigma_N * A / sqrt(N)`` (entrywise) with ``A`` self-adjoint and
independent entries up to symmetry.  For ``beta = 1`` off-diagonal entries
have variance 1 and diagonal entries variance 2; for ``beta = 2``
off-diagonal real and imaginary parts have variance 1/2 each and the real
diagonal has variance 1.

Every trial draws from its own counter-based stream, seeded by
``SeedSequence(seed, spawn_key=(trial,))``, so any subset of trials can be
reproduced on its own and parallel runs match serial ones bit for bit.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError
from .profile import BlockProfile, GridProfile, ScalingMatrix, materialize
from .qve import SpectralDensity, density as _density, edges as _edges

__all__ = [
    "EntryLaw",
    "SimulationReport",
    "EsdReport",
    "trial_rng",
    "sample_matrix",
    "deformation",
    "deformed_sample",
    "lambda_max_samples",
    "esd_check",
    "tail_estimate",
    "wilson_interval",
    "norm_tightness",
    "MAX_N",
]

MAX_N = 4000
KINDS = ("gaussian", "rademacher", "uniform_sqrt3")
_CHUNK_ELEMENTS = 2 * 10**7


@dataclass(frozen=True)
class EntryLaw:
    """Law of the standardised entries ``a_ij``."""

    kind: str = "gaussian"
    beta: int = 1

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DomainError(f"entry law must be one of {KINDS}, got {self.kind!r}")
        if self.beta not in (1, 2):
            raise DomainError("beta must be 1 or 2")

    def _unit(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Real draws with mean 0 and variance 1."""
        if self.kind == "gaussian":
            return rng.standard_normal(size)
        if self.kind == "rademacher":
            return rng.integers(0, 2, size=size) * 2.0 - 1.0
        return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=size)

    def draw(self, rng: np.random.Generator, n_off: int, n_diag: int) -> tuple[np.ndarray, np.ndarray]:
        """Off-diagonal and diagonal entries in a fixed draw order."""
        if self.beta == 1:
            off = self._unit(rng, n_off)
            diag = math.sqrt(2.0) * self._unit(rng, n_diag)
        else:
            re = self._unit(rng, n_off)
            im = self._unit(rng, n_off)
            off = (re + 1j * im) / math.sqrt(2.0)
            diag = self._unit(rng, n_diag)
        return off, diag


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent Philox stream of trial ``trial`` under master ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(trial),))))


def _scaling(p, N: int) -> ScalingMatrix:
    if N > MAX_N:
        raise DomainError(f"N = {N} exceeds the cap {MAX_N}")
    return materialize(p, N)


def _build(scale: np.ndarray, law: EntryLaw, rng: np.random.Generator) -> np.ndarray:
    N = scale.shape[0]
    iu = np.triu_indices(N, 1)
    off, diag = law.draw(rng, iu[0].size, N)
    A = np.zeros((N, N), dtype=complex if law.beta == 2 else float)
    A[iu] = off
    A = A + A.conj().T
    A[np.diag_indices(N)] = diag
    return scale * A / math.sqrt(N)


def sample_matrix(p: BlockProfile | GridProfile, N: int, law: EntryLaw, seed: int, trial: int = 0) -> np.ndarray:
    """One matrix ``Sigma_N * A / sqrt(N)``; exactly symmetric or Hermitian."""
    return _build(_scaling(p, N).entries, law, trial_rng(seed, trial))


def deformation(p: BlockProfile, N: int, psi: np.ndarray, scale: ScalingMatrix | None = None) -> np.ndarray:
    """Matrix ``E S E*`` with entries ``Sigma_N(i,j)^2 e_i e_j``.

    ``e`` is flat within blocks with ``||e restricted to block k||^2 = psi_k``.
    """
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (p.n,) or np.any(psi < 0) or abs(psi.sum() - 1.0) > 1e-9:
        raise DomainError("psi must be a probability vector with one weight per block")
    sm = scale if scale is not None else materialize(p, N)
    sizes = np.array(sm.block_sizes)
    e = np.repeat(np.sqrt(psi / sizes), sizes)
    return sm.entries**2 * np.outer(e, e)


def deformed_sample(
    p: BlockProfile,
    N: int,
    law: EntryLaw,
    theta: float,
    psi: np.ndarray,
    beta: int,
    seed: int,
    trial: int = 0,
) -> np.ndarray:
    """Sample ``X + (2 theta / beta) E S E*``."""
    if beta != law.beta:
        raise DomainError("beta must match the entry law")
    sm = _scaling(p, N)
    X = _build(sm.entries, law, trial_rng(seed, trial))
    if theta == 0:
        return X
    return X + (2.0 * theta / beta) * deformation(p, N, psi, sm)


def _worker(args) -> np.ndarray:
    scale, law, seed, trials, shift, extremes = args
    N = scale.shape[0]
    chunk = max(1, min(len(trials), _CHUNK_ELEMENTS // (N * N)))
    out = []
    for s in range(0, len(trials), chunk):
        batch = np.stack([_build(scale, law, trial_rng(seed, t)) for t in trials[s : s + chunk]])
        if shift is not None:
            batch = batch + shift
        ev = np.linalg.eigvalsh(batch)
        out.append(ev[:, [0, -1]] if extremes else ev)
    return np.concatenate(out)


def _run(scale, law, seed, trials, shift, extremes, threads):
    idx = list(range(trials))
    if threads <= 1 or trials < 2:
        return _worker((scale, law, seed, idx, shift, extremes))
    parts = [idx[k::threads] for k in range(threads)]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        res = list(ex.map(_worker, [(scale, law, seed, part, shift, extremes) for part in parts]))
    out = np.empty((trials,) + res[0].shape[1:])
    for k, part in enumerate(parts):
        out[part] = res[k]
    return out


def lambda_max_samples(
    p: BlockProfile | GridProfile,
    N: int,
    law: EntryLaw,
    trials: int,
    seed: int,
    *,
    theta: float = 0.0,
    psi: np.ndarray | None = None,
    threads: int = 1,
) -> np.ndarray:
    """Largest eigenvalue of ``trials`` independent samples (optionally deformed)."""
    sm = _scaling(p, N)
    shift = None
    if theta:
        if not isinstance(p, BlockProfile) or psi is None:
            raise DomainError("deformed sampling needs a block profile and psi")
        shift = (2.0 * theta / law.beta) * deformation(p, N, psi, sm)
    ev = _run(sm.entries, law, seed, int(trials), shift, True, threads)
    return ev[:, 1].copy()


def wilson_interval(count: int, trials: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion (95% by default)."""
    if trials <= 0:
        raise DomainError("trials must be positive")
    phat = count / trials
    den = 1.0 + z * z / trials
    centre = (phat + z * z / (2 * trials)) / den
    half = z * math.sqrt(phat * (1 - phat) / trials + z * z / (4 * trials * trials)) / den
    lo = 0.0 if count == 0 else max(0.0, centre - half)
    hi = 1.0 if count == trials else min(1.0, centre + half)
    return lo, hi


@dataclass(frozen=True, eq=False)
class EsdReport:
    """Kolmogorov distance between the pooled spectrum and the limit CDF."""

    N: int
    trials: int
    seed: int
    distance: float
    histogram_edges: np.ndarray
    histogram_counts: np.ndarray


def esd_check(
    p: BlockProfile,
    N: int,
    law: EntryLaw,
    trials: int,
    seed: int,
    *,
    spectral_density: SpectralDensity | None = None,
    bins: int = 100,
    threads: int = 1,
) -> EsdReport:
    """Pooled empirical spectrum against the limiting density's CDF."""
    d = spectral_density if spectral_density is not None else _density(p, 8001)
    ev = np.sort(_run(_scaling(p, N).entries, law, seed, int(trials), None, False, threads).ravel())
    F = d.cdf(ev)
    k = np.arange(1, ev.size + 1)
    dist = float(max(np.max(k / ev.size - F), np.max(F - (k - 1) / ev.size)))
    lim = max(abs(ev[0]), abs(ev[-1]), d.r)
    counts, edges_ = np.histogram(ev, bins=bins, range=(-lim, lim))
    return EsdReport(N, int(trials), int(seed), dist, edges_, counts)


@dataclass(frozen=True, eq=False)
class SimulationReport:
    """Largest-eigenvalue samples and tail estimates at one ``N``.

    ``tail_estimates[threshold]`` holds ``count``, ``p_hat``, the Wilson
    interval and ``log_rate = -(1/N) log p_hat`` (``None`` when the count is
    zero; ``log_rate_bound`` then gives the value implied by the upper end of
    the interval).
    """

    N: int
    trials: int
    seed: int
    lambda_max_samples: np.ndarray
    esd_histogram: tuple[np.ndarray, np.ndarray] | None = None
    tail_estimates: dict[float, dict] = field(default_factory=dict)


def tail_estimate(
    p: BlockProfile,
    N_list: Sequence[int],
    law: EntryLaw,
    thresholds: Sequence[float],
    trials: int,
    seed: int,
    *,
    rates: dict[float, float] | None = None,
    threads: int = 1,
) -> list[SimulationReport]:
    """Estimate ``P(lambda_max > threshold)`` for each ``N`` and threshold.

    ``rates`` optionally maps thresholds to the limiting rate, copied into
    the report next to the empirical log-rate.
    """
    r = _edges(p)[1] if isinstance(p, BlockProfile) else None
    thresholds = [float(x) for x in thresholds]
    if r is not None and any(x <= r for x in thresholds):
        raise DomainError(f"mc.tail_estimate: thresholds must exceed the right edge r = {r:.17g}")
    reports = []
    for N in N_list:
        lam = lambda_max_samples(p, int(N), law, trials, seed, threads=threads)
        est: dict[float, dict] = {}
        for x in thresholds:
            count = int(np.count_nonzero(lam > x))
            lo, hi = wilson_interval(count, trials)
            entry = {
                "count": count,
                "p_hat": count / trials,
                "wilson_low": lo,
                "wilson_high": hi,
                "log_rate": -math.log(count / trials) / N if count > 0 else None,
                "log_rate_bound": -math.log(hi) / N if hi > 0 else None,
            }
            if rates is not None and x in rates:
                entry["rate"] = rates[x]
            est[x] = entry
        reports.append(SimulationReport(int(N), int(trials), int(seed), lam, None, est))
    return reports


def norm_tightness(p: BlockProfile | GridProfile, N: int, law: EntryLaw, trials: int, seed: int, threads: int = 1) -> dict:
    """Count samples with operator norm above ``4 max sigma + 1``."""
    sm = _scaling(p, N)
    ev = _run(sm.entries, law, seed, int(trials), None, True, threads)
    norms = np.abs(ev).max(axis=1)
    bound = 4.0 * float(sm.entries.max()) + 1.0
    return {"bound": bound, "violations": int(np.count_nonzero(norms > bound)), "max_norm": float(norms.max())}
