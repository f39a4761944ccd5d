"""Annealed spherical-integral limit as a simplex optimisation.

For a block profile with ``S = sigma^2`` the annealed limit is

    F(theta) = max over the simplex of
        Psi(psi) = (theta^2 / beta) <psi, S psi> + (beta/2) sum_i alpha_i log(psi_i / alpha_i).

``Psi`` is smooth on the open simplex and tends to ``-inf`` at its boundary,
but it can have several local maxima, so the maximisation runs projected
gradient ascent from a battery of starts and polishes every candidate with
Newton's method on the Lagrange system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError
from .profile import BlockProfile, GridProfile, check_concavity, discretize

__all__ = [
    "AnnealedResult",
    "MaximizerPath",
    "TwoBlockClassification",
    "psi_objective",
    "quadratic_form",
    "dirichlet_rate",
    "annealed_f",
    "maximizer_path",
    "classify_2x2",
    "small_theta_check",
    "derivative_check",
    "project_simplex",
]

CLIP = 1e-12
N_RANDOM_STARTS = 32
VALUE_TIE = 1e-12
PATH_TOL = 1e-3
DEFAULT_DISCRETIZATION = 64


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex."""
    v = np.atleast_2d(v)
    n = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, n + 1)
    cond = u - css / k > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(v.shape[0]), rho] / (rho + 1)
    return np.maximum(v - tau[:, None], 0.0)


def quadratic_form(p: BlockProfile, psi: np.ndarray) -> np.ndarray:
    """``<psi, sigma^2 psi>`` for one vector or a batch of rows."""
    psi = np.asarray(psi, dtype=float)
    return np.einsum("...i,ij,...j->...", psi, p.s2, psi)


def dirichlet_rate(alpha: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Relative entropy ``sum_i alpha_i log(alpha_i / psi_i) >= 0``."""
    alpha = np.asarray(alpha, dtype=float)
    psi = np.asarray(psi, dtype=float)
    return np.sum(alpha * (np.log(alpha) - np.log(psi)), axis=-1)


def psi_objective(p: BlockProfile, theta: float, beta: int, psi: np.ndarray) -> np.ndarray:
    """``Psi(theta, psi)``; ``-inf`` when some weight is not positive."""
    psi = np.asarray(psi, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = (theta**2 / beta) * quadratic_form(p, psi) - 0.5 * beta * dirichlet_rate(p.alpha, psi)
    return np.where(np.all(psi > 0, axis=-1), val, -np.inf)


def _gradient(p, theta, beta, psi):
    return (2.0 * theta**2 / beta) * psi @ p.s2 + 0.5 * beta * p.alpha / psi


def _projected_defect(p, theta, beta, psi):
    g = _gradient(p, theta, beta, psi)
    return np.abs(g - g.mean(axis=-1, keepdims=True)).max(axis=-1)


def _ascent(p, theta, beta, psi, iters=300, tol=1e-5):
    """Projected gradient ascent with Armijo backtracking, batched over rows.

    Rows stop once their projected gradient is below ``tol``; the Newton
    polish that follows takes them to full accuracy.
    """
    psi = np.clip(np.array(psi, dtype=float), CLIP, None)
    psi /= psi.sum(axis=1, keepdims=True)
    val = psi_objective(p, theta, beta, psi)
    step = np.full(psi.shape[0], 0.1)
    active = _projected_defect(p, theta, beta, psi) >= tol
    for _ in range(iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        x, v, h = psi[idx], val[idx], step[idx]
        g = _gradient(p, theta, beta, x)
        moved = np.zeros(idx.size, dtype=bool)
        for _ in range(30):
            trial = project_simplex(x + h[:, None] * g)
            trial = np.clip(trial, CLIP, None)
            trial /= trial.sum(axis=1, keepdims=True)
            tv = psi_objective(p, theta, beta, trial)
            gain = np.sum(g * (trial - x), axis=1)
            ok = (tv >= v + 1e-4 * gain) & ~moved
            x = np.where(ok[:, None], trial, x)
            v = np.where(ok, tv, v)
            moved |= ok
            if moved.all():
                break
            h = np.where(moved, h, h * 0.5)
        psi[idx], val[idx] = x, v
        step[idx] = np.where(moved, h * 2.0, h)
        active[idx] = moved & (_projected_defect(p, theta, beta, x) >= tol)
    return psi


def _newton_polish(p, theta, beta, psi, iters=50):
    """Newton on ``grad Psi = lambda 1``, ``sum psi = 1`` from ``psi``."""
    n = p.n
    a = 2.0 * theta**2 / beta
    psi = psi.copy()
    g = _gradient(p, theta, beta, psi)
    lam = float(psi @ g)
    best = psi.copy()
    best_def = _projected_defect(p, theta, beta, psi)
    for _ in range(iters):
        g = _gradient(p, theta, beta, psi)
        F = np.concatenate([g - lam, [psi.sum() - 1.0]])
        J = np.zeros((n + 1, n + 1))
        J[:n, :n] = a * p.s2 - np.diag(0.5 * beta * p.alpha / psi**2)
        J[:n, n] = -1.0
        J[n, :n] = 1.0
        try:
            d = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            break
        dpsi = d[:n]
        # keep the iterate inside the open simplex
        t = 1.0
        neg = dpsi < 0
        if neg.any():
            t = min(1.0, 0.9 * float(np.min(-psi[neg] / dpsi[neg])))
        psi = psi + t * dpsi
        psi /= psi.sum()
        lam = lam + t * d[n]
        dfct = _projected_defect(p, theta, beta, psi)
        if dfct < best_def:
            best, best_def = psi.copy(), dfct
        if dfct < 1e-14 * (1.0 + abs(lam)) or np.abs(t * dpsi).max() < 1e-16:
            break
    return best, float(best_def)


def _is_local_max(p, theta, beta, psi) -> bool:
    n = p.n
    if n == 1:
        return True
    H = (2.0 * theta**2 / beta) * p.s2 - np.diag(0.5 * beta * p.alpha / psi**2)
    B = np.eye(n)[:, :-1] - np.eye(n)[:, [-1]]
    return bool(np.linalg.eigvalsh(B.T @ H @ B).max() <= 1e-9 * (1.0 + np.abs(H).max()))


@dataclass(frozen=True, eq=False)
class AnnealedResult:
    """Maximum of ``Psi`` at one ``theta``.

    ``multistart_spread`` is the difference between the best and the worst
    distinct local maximum found; ``n_local_maxima`` counts them.
    ``discretization_change`` is filled for grid profiles with the change of
    the corrected value when the block count is doubled.
    """

    theta: float
    beta: int
    value: float
    psi: np.ndarray
    multistart_spread: float
    critical_defect: float
    n_local_maxima: int = 1
    discretization_change: float | None = None


def _starts(p: BlockProfile, rng: np.random.Generator) -> np.ndarray:
    n = p.n
    rows = [np.asarray(p.alpha), np.full(n, 1.0 / n)]
    rows.extend(rng.dirichlet(np.ones(n), size=N_RANDOM_STARTS))
    for k in range(n):
        conc = np.ones(n)
        conc[k] = 10.0 * n
        rows.append(rng.dirichlet(conc))
    return np.array(rows)


def _local_maxima(p, theta, beta, starts):
    """Distinct polished local maxima (value, psi, defect), best first."""
    psis = _ascent(p, theta, beta, starts)
    found: list[tuple[float, np.ndarray, float]] = []
    polished: list[np.ndarray] = []
    for row in psis:
        # rows that ascended into the same basin are polished once
        if any(np.abs(row - q).max() < 1e-4 for q in polished):
            continue
        polished.append(row)
        psi, dfct = _newton_polish(p, theta, beta, row)
        if not _is_local_max(p, theta, beta, psi):
            continue
        val = float(psi_objective(p, theta, beta, psi))
        if any(np.abs(psi - q).max() < 1e-7 for _, q, _ in found):
            continue
        found.append((val, psi, dfct))
    if not found:
        # degenerate Hessians (e.g. a flat direction): keep the best ascent point
        vals = psi_objective(p, theta, beta, psis)
        k = int(np.argmax(vals))
        psi, dfct = _newton_polish(p, theta, beta, psis[k])
        found.append((float(psi_objective(p, theta, beta, psi)), psi, dfct))
    return _ordered(found)


def _ordered(found):
    """Best value first; near-ties broken lexicographically on ``psi``."""
    top = max(v for v, _, _ in found)
    tol = VALUE_TIE * (1.0 + abs(top))
    tied = sorted((f for f in found if f[0] >= top - tol), key=lambda f: tuple(f[1]))
    rest = sorted((f for f in found if f[0] < top - tol), key=lambda f: -f[0])
    return tied + rest


def _block_annealed(p, theta, beta, warm=None, seed=0, concave=None):
    if concave is None:
        concave = bool(check_concavity(p))
    if theta == 0.0:
        psi = np.array(p.alpha, dtype=float)
        return AnnealedResult(0.0, beta, 0.0, psi, 0.0, float(_projected_defect(p, 0.0, beta, psi)))
    if concave:
        starts = np.atleast_2d(warm if warm is not None else p.alpha)
    else:
        starts = _starts(p, np.random.default_rng(seed))
        if warm is not None:
            starts = np.vstack([warm, starts])
    found = _local_maxima(p, theta, beta, starts)
    vals = [f[0] for f in found]
    val, psi, dfct = found[0]
    return AnnealedResult(
        float(theta), beta, float(val), psi, float(max(vals) - min(vals)), dfct, len(found)
    )


def annealed_f(
    p: BlockProfile | GridProfile,
    theta: float,
    beta: int,
    *,
    n_blocks: int = DEFAULT_DISCRETIZATION,
    warm: np.ndarray | None = None,
    seed: int = 0,
) -> AnnealedResult:
    """Annealed limit ``F(sigma, theta)`` and its maximiser.

    Parameters
    ----------
    p : BlockProfile or GridProfile
        Grid profiles are discretised into ``n_blocks`` uniform blocks and
        the exact shift ``theta^2 / ((n_blocks + 1) beta)`` is removed.
    theta : float
        Nonnegative tilt.
    beta : {1, 2}
    warm : ndarray, optional
        Extra start (e.g. the maximiser at a nearby ``theta``).
    seed : int
        Seed of the random multistart battery.

    Examples
    --------
    >>> from varprof.profile import BlockProfile
    >>> round(annealed_f(BlockProfile([[1.0]], [1.0]), 1.5, 1).value, 12)
    2.25
    """
    if beta not in (1, 2):
        raise DomainError("beta must be 1 or 2")
    if theta < 0:
        raise DomainError("theta must be nonnegative")
    theta = float(theta)
    if isinstance(p, GridProfile):
        res = _block_annealed(discretize(p, n_blocks), theta, beta, warm, seed)
        fine = _block_annealed(discretize(p, 2 * n_blocks), theta, beta, None, seed)
        shift = theta**2 / ((n_blocks + 1) * beta)
        shift2 = theta**2 / ((2 * n_blocks + 1) * beta)
        val = res.value - shift
        return AnnealedResult(
            res.theta, beta, val, res.psi, res.multistart_spread, res.critical_defect,
            res.n_local_maxima, abs((fine.value - shift2) - val),
        )
    return _block_annealed(p, theta, beta, warm, seed)


@dataclass(frozen=True, eq=False)
class MaximizerPath:
    """Maximisers along an increasing ``theta`` grid."""

    thetas: np.ndarray
    psis: np.ndarray
    values: np.ndarray
    jump_locations: tuple[float, ...] = field(default=())

    @property
    def continuous(self) -> bool:
        return len(self.jump_locations) == 0

    def psi_at(self, theta: float) -> np.ndarray:
        """Linear interpolation of the path (meaningful on continuous paths)."""
        out = np.array([np.interp(theta, self.thetas, self.psis[:, k]) for k in range(self.psis.shape[1])])
        return out / out.sum()


def _path_step(p, theta, beta, prev, concave, seed):
    """Maximiser at ``theta``; near-ties prefer the candidate nearest ``prev``."""
    if theta == 0.0:
        return np.array(p.alpha, dtype=float), 0.0
    if concave:
        starts = np.atleast_2d(prev)
    else:
        starts = np.vstack([prev, _starts(p, np.random.default_rng(seed))])
    found = _local_maxima(p, theta, beta, starts)
    top = found[0][0]
    tol = 1e-10 * (1.0 + abs(top))
    tied = [f for f in found if f[0] >= top - tol]
    best = min(tied, key=lambda f: np.abs(f[1] - prev).max())
    return best[1], best[0]


def maximizer_path(
    p: BlockProfile,
    theta_grid: Sequence[float],
    beta: int,
    *,
    seed: int = 0,
    max_depth: int = 6,
) -> MaximizerPath:
    """Track the maximiser along ``theta_grid`` and locate jumps.

    Adjacent maximisers further apart than ``1e-3`` in sup-norm trigger a
    10x local refinement of the interval, repeated on the worst
    sub-interval up to ``max_depth`` times; a gap that survives the last
    refinement is reported as a jump at the midpoint of the final interval.
    """
    thetas = np.asarray(theta_grid, dtype=float)
    if thetas.ndim != 1 or thetas.size < 2 or np.any(np.diff(thetas) <= 0):
        raise DomainError("theta grid must be strictly increasing with at least two points")
    if thetas[0] < 0:
        raise DomainError("theta grid must start at a nonnegative value")
    concave = bool(check_concavity(p))
    psis = np.empty((thetas.size, p.n))
    vals = np.empty(thetas.size)
    prev = np.array(p.alpha, dtype=float)
    for k, th in enumerate(thetas):
        prev, vals[k] = _path_step(p, th, beta, prev, concave, seed)
        psis[k] = prev
    jumps: list[float] = []
    for k in range(thetas.size - 1):
        if np.abs(psis[k + 1] - psis[k]).max() <= PATH_TOL:
            continue
        lo, hi, psi_lo = thetas[k], thetas[k + 1], psis[k]
        jumped = True
        for _ in range(max_depth):
            sub = np.linspace(lo, hi, 11)
            sp = [psi_lo]
            q = psi_lo
            for th in sub[1:]:
                q, _ = _path_step(p, th, beta, q, concave, seed)
                sp.append(q)
            diffs = [np.abs(sp[i + 1] - sp[i]).max() for i in range(10)]
            worst = int(np.argmax(diffs))
            if diffs[worst] <= PATH_TOL:
                jumped = False
                break
            lo, hi, psi_lo = sub[worst], sub[worst + 1], sp[worst]
        if jumped:
            jumps.append(float(0.5 * (lo + hi)))
    return MaximizerPath(thetas, psis, vals, tuple(jumps))


@dataclass(frozen=True)
class TwoBlockClassification:
    """Case analysis of a two-block profile ``[[a, c], [c, b]]``.

    After the normalisation ``alpha <= 1/2`` (blocks swapped if needed),
    ``swapped`` records whether a swap happened.  ``theta_crit`` is filled in
    the symmetric case with ``beta sqrt(2 / D)``; ``theta_bifurcation`` is
    ``beta / sqrt(D)``, where the second derivative of the objective at
    ``psi = (1/2, 1/2)`` changes sign.  ``D = a^2 + b^2 - 2 c^2``.
    """

    a: float
    b: float
    c: float
    alpha: float
    x_min: float | None
    case_tag: str
    theta_crit: float | None = None
    theta_bifurcation: float | None = None
    swapped: bool = False

    @property
    def D(self) -> float:
        return self.a**2 + self.b**2 - 2.0 * self.c**2

    def profile(self) -> BlockProfile:
        return BlockProfile([[self.a, self.c], [self.c, self.b]], [self.alpha, 1.0 - self.alpha])


CASE_TAGS = ("concave", "xmin_ge_half", "xmin_le_alpha", "symmetric_critical", "pathological")


def classify_2x2(a: float, b: float, c: float, alpha: float, beta: int = 1, tol: float = 1e-12) -> TwoBlockClassification:
    """Classify ``[[a, c], [c, b]]`` with weights ``(alpha, 1 - alpha)``.

    Examples
    --------
    >>> classify_2x2(2, 2, 1, 0.5).case_tag
    'symmetric_critical'
    >>> classify_2x2(3, 4, 0, 2 / 3).case_tag
    'pathological'
    """
    if min(a, b, c) < 0:
        raise DomainError("a, b, c must be nonnegative")
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    swapped = False
    if alpha > 0.5:
        a, b, alpha, swapped = b, a, 1.0 - alpha, True
    a, b, c, alpha = float(a), float(b), float(c), float(alpha)
    D = a * a + b * b - 2.0 * c * c
    if D <= tol:
        x_min = (b * b - c * c) / D if abs(D) > tol else None
        return TwoBlockClassification(a, b, c, alpha, x_min, "concave", swapped=swapped)
    x_min = (c * c - b * b) / (2.0 * c * c - a * a - b * b)
    if abs(alpha - 0.5) <= tol and abs(x_min - 0.5) <= tol:
        return TwoBlockClassification(
            a, b, c, alpha, x_min, "symmetric_critical",
            theta_crit=beta * math.sqrt(2.0 / D), theta_bifurcation=beta / math.sqrt(D), swapped=swapped,
        )
    if x_min >= 0.5:
        tag = "xmin_ge_half"
    elif x_min <= alpha:
        tag = "xmin_le_alpha"
    else:
        tag = "pathological"
    return TwoBlockClassification(a, b, c, alpha, x_min, tag, swapped=swapped)


def _gl_cumulative_r(t, ws: np.ndarray, nodes: int = 40) -> np.ndarray:
    """``int_0^w R(s) ds`` for each ``w`` by Gauss-Legendre."""
    u, wt = np.polynomial.legendre.leggauss(nodes)
    out = np.empty(ws.size)
    for k, w in enumerate(ws):
        s = 0.5 * w * (u + 1.0)
        out[k] = 0.5 * w * float(np.sum(wt * t.R(s)))
    return out


def small_theta_check(p: BlockProfile, t, beta: int, thetas: Sequence[float] | None = None) -> float:
    """Largest ``|F(theta) - (beta/2) int_0^{2 theta/beta} R|`` on a grid.

    The default grid has 16 points in ``(0, 0.8 beta g_edge / 2]``.
    """
    if thetas is None:
        top = 0.8 * beta * min(t.g_edge, 1e3) / 2.0
        thetas = np.linspace(top / 16, top, 16)
    thetas = np.asarray(thetas, dtype=float)
    tps = 2.0 * thetas / beta
    if np.any(tps > t.g_edge):
        raise DomainError("theta grid must stay below beta g_edge / 2")
    rhs = 0.5 * beta * _gl_cumulative_r(t, tps)
    lhs = np.array([annealed_f(p, th, beta).value for th in thetas])
    return float(np.abs(lhs - rhs).max())


def derivative_check(p: BlockProfile, t, beta: int, thetas: Sequence[float]) -> float:
    """Largest ``|R(2theta/beta) - dF/dtheta|`` with the continued ``R``.

    ``dF/dtheta = (2 theta / beta) <psi, S psi>`` at the maximiser, by the
    envelope theorem.
    """
    thetas = np.asarray(thetas, dtype=float)
    worst = 0.0
    for th in thetas:
        res = annealed_f(p, th, beta)
        tp = 2.0 * th / beta
        dF = tp * float(quadratic_form(p, res.psi))
        worst = max(worst, abs(float(t.R(tp, extend=True)) - dF))
    return worst
