"""Real-axis transforms of the limiting spectral measure.

On ``(r, inf)`` right of the support

* ``G(x) = int dmu(t)/(x - t)`` comes from the real-axis vector equation,
* ``K`` is the inverse of ``G`` on ``(0, G(r+)]``,
* ``R(w) = K(w) - 1/w``,
* ``Gbar`` inverts ``w -> R(w) + 1/w`` on the branch ``w >= G(r+)``.

Past ``G(r+)`` the function ``K`` is continued along the second branch of
the system ``g_i (x - (S_alpha g)_i) = 1``, ``sum_i alpha_i g_i = w``, solved
by Newton continuation in ``w``.  At ``w = G(r+)`` the two branches meet
with ``K'(w) = 0`` so the continuation is regular there.

The spherical limit ``J`` needs ``int log(u - y) dmu(y)`` for ``u >= r``;
it is computed from ``G`` through
``log u - int_u^inf (G(s) - 1/s) ds`` (default) or by quadrature against the
density grid (``method="density"``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConvergenceError, DomainError
from .profile import BlockProfile
from .qve import SpectralDensity, density as _density, edges as _edges, real_axis_g

__all__ = [
    "TransformTable",
    "build_transforms",
    "stieltjes",
    "stieltjes_quadrature",
    "r_transform",
    "g_bar",
    "spherical_j",
    "G_EDGE_INF",
]

G_EDGE_INF = 1e6
BISECTION_STEPS = 200
_EDGE_DELTAS = (1e-6, 4e-6, 1.6e-5)
_GL_U, _GL_W = np.polynomial.legendre.leggauss(120)


def _bisect(fun, lo, hi, target, increasing, steps=BISECTION_STEPS):
    """Vectorised bisection for ``fun(x) = target`` on ``[lo, hi]``."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if np.all((mid <= lo) | (mid >= hi)):
            break
        above = fun(mid) > target
        if increasing:
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        else:
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
    return 0.5 * (lo + hi)


@dataclass(frozen=True, eq=False)
class _Branch:
    """Second solution branch ``w -> (g(w), K(w))`` for ``w >= g_edge``."""

    w: np.ndarray
    g: np.ndarray
    x: np.ndarray
    ok_until: float
    reason: str


class TransformTable:
    """Evaluators for ``G``, ``K``, ``R``, ``Gbar`` and the log potential.

    Parameters
    ----------
    profile : BlockProfile
    spectral_density : SpectralDensity, optional
        Used by the density-quadrature route of :func:`spherical_j` and by
        quadrature cross-checks; computed lazily when omitted.
    """

    def __init__(self, profile: BlockProfile, spectral_density: SpectralDensity | None = None) -> None:
        self.profile = profile
        self._density = spectral_density
        if spectral_density is not None:
            self.l, self.r = spectral_density.edges
        else:
            self.l, self.r = _edges(profile)
        self._branch_cache: _Branch | None = None

    # -- density -----------------------------------------------------------
    @property
    def density(self) -> SpectralDensity:
        if self._density is None:
            self._density = _density(self.profile)
        return self._density

    # -- G on the first branch ---------------------------------------------
    def components(self, x) -> np.ndarray:
        """``g_i(x) = -m_i(x)`` for ``x > r``; shape ``(len(x), n)``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any(x <= self.r):
            raise DomainError(f"freeprob.stieltjes: x must exceed the right edge r = {self.r:.17g}")
        g, ok = real_axis_g(self.profile, x)
        if not ok.all():
            bad = x[~ok]
            raise ConvergenceError("freeprob.stieltjes", f"real-axis solve failed at x = {bad[:3].tolist()}")
        return g

    def G(self, x):
        """Stieltjes transform ``sum_i alpha_i g_i(x)`` for ``x > r``."""
        scalar = np.ndim(x) == 0
        out = self.components(x) @ self.profile.alpha
        return float(out[0]) if scalar else out

    @cached_property
    def _edge_data(self) -> tuple[float, np.ndarray]:
        d = np.array(_EDGE_DELTAS)
        g = self.components(self.r + d)
        # G(r + d) = a + b sqrt(d) + c d near a square-root edge
        V = np.vander(np.sqrt(d), 3, increasing=True)
        coef = np.linalg.solve(V, g)
        vec = coef[0]
        total = float(vec @ self.profile.alpha)
        if total > G_EDGE_INF:
            return math.inf, vec
        return total, vec

    @property
    def g_edge(self) -> float:
        """``G(r+)``; ``math.inf`` if it exceeds ``1e6``."""
        return self._edge_data[0]

    def K(self, w):
        """Inverse of ``G`` on ``(0, g_edge]`` by bisection."""
        scalar = np.ndim(w) == 0
        w = np.atleast_1d(np.asarray(w, dtype=float))
        if np.any(w <= 0) or np.any(w > self.g_edge):
            raise DomainError(f"freeprob.r_transform: w must lie in (0, g_edge = {self.g_edge:.17g}]")
        out = np.empty_like(w)
        at_edge = w >= self.g_edge * (1 - 1e-15)
        out[at_edge] = self.r
        ww = w[~at_edge]
        if ww.size:
            lo = np.maximum(self.r, 1.0 / ww)
            hi = self.r + 1.0 / ww
            nudge = np.nextafter(lo, np.inf)
            lo = np.where(lo <= self.r, nudge, lo)

            def G_safe(x):
                return self.G(np.maximum(x, np.nextafter(self.r, np.inf)))

            out[~at_edge] = _bisect(G_safe, lo, hi, ww, increasing=False)
        return float(out[0]) if scalar else out

    def R(self, w, extend: bool = False):
        """R-transform ``K(w) - 1/w``.

        With ``extend=True`` values of ``w`` past ``g_edge`` use the
        continued branch.
        """
        scalar = np.ndim(w) == 0
        w = np.atleast_1d(np.asarray(w, dtype=float))
        if extend:
            out = self.K_ext(w) - 1.0 / w
        else:
            out = self.K(w) - 1.0 / w
        return float(out[0]) if scalar else out

    # -- continued branch ----------------------------------------------------
    def _newton_branch(self, w, g, x, iters=60):
        """Solve the (g, x) system at fixed ``w`` from the guess ``(g, x)``."""
        s2a = np.asarray(self.profile.s2_alpha)
        alpha = np.asarray(self.profile.alpha)
        n = self.profile.n
        for _ in range(iters):
            sg = s2a @ g
            F = np.concatenate([g * (x - sg) - 1.0, [alpha @ g - w]])
            if np.abs(F).max() <= 1e-15 * (1.0 + abs(x)):
                return g, x, True
            J = np.zeros((n + 1, n + 1))
            J[:n, :n] = np.diag(x - sg) - g[:, None] * s2a
            J[:n, n] = g
            J[n, :n] = alpha
            try:
                step = np.linalg.solve(J, -F)
            except np.linalg.LinAlgError:
                return g, x, False
            g = g + step[:n]
            x = x + step[n]
            if not np.all(np.isfinite(g)):
                return g, x, False
            if np.abs(step).max() <= 1e-15 * (1.0 + abs(x) + np.abs(g).max()):
                break
        sg = s2a @ g
        F = np.concatenate([g * (x - sg) - 1.0, [alpha @ g - w]])
        return g, x, bool(np.abs(F).max() <= 1e-11)

    def _extend_branch(self, w_needed: float) -> _Branch:
        br = self._branch_cache
        if br is not None and (br.w[-1] >= w_needed or br.reason):
            return br
        if br is None:
            w0 = self.g_edge
            if not math.isfinite(w0):
                raise ConvergenceError("freeprob.g_bar", "G(r+) is infinite; no continued branch")
            ws, gs, xs = [w0], [self._edge_data[1].copy()], [self.r]
            g, x, ok = self._newton_branch(w0, gs[0], self.r)
            if ok:
                gs[0], xs[0] = g, x
        else:
            ws, gs, xs = list(br.w), list(br.g), list(br.x)
        reason = ""
        h = 1e-3 * max(ws[0], 1e-3)
        while ws[-1] < w_needed:
            w_new = ws[-1] + h
            if len(ws) >= 2:
                t = h / (ws[-1] - ws[-2])
                g_guess = gs[-1] + t * (gs[-1] - gs[-2])
                x_guess = xs[-1] + t * (xs[-1] - xs[-2])
            else:
                g_guess, x_guess = gs[-1], xs[-1]
            g, x, ok = self._newton_branch(w_new, g_guess, x_guess)
            if ok and np.all(g > 0) and x > xs[-1] - 1e-12 * abs(xs[-1]):
                ws.append(w_new)
                gs.append(g)
                xs.append(x)
                h = min(h * 1.5, 0.05 * max(w_new, 1.0))
            else:
                h *= 0.25
                if h < 1e-12 * max(ws[-1], 1.0):
                    reason = "continuation stalls (fold or loss of positivity)"
                    break
        if not reason:
            x_arr = np.array(xs)
            if np.any(np.diff(x_arr[1:]) <= 0):
                reason = "w -> R(w) + 1/w is not increasing on the continued branch"
        br = _Branch(np.array(ws), np.array(gs), np.array(xs), ws[-1], reason)
        self._branch_cache = br
        return br

    def _branch_for_x(self, x_max: float) -> _Branch:
        br = self._extend_branch(self.g_edge * 1.01 + 1e-6)
        w_need = br.w[-1]
        while br.x[-1] < x_max and not br.reason:
            w_need = max(2.0 * w_need, w_need + 1.0)
            br = self._extend_branch(w_need)
        return br

    def K_ext(self, w):
        """``R(w) + 1/w`` on the whole half line (continued past g_edge)."""
        scalar = np.ndim(w) == 0
        w = np.atleast_1d(np.asarray(w, dtype=float))
        out = np.empty_like(w)
        first = w <= self.g_edge
        if first.any():
            out[first] = self.K(w[first])
        if (~first).any():
            br = self._extend_branch(float(w[~first].max()))
            if br.w[-1] < w[~first].max():
                raise ConvergenceError("freeprob.r_transform", f"R cannot be continued past w = {br.w[-1]:.17g}: {br.reason}")
            for k in np.flatnonzero(~first):
                j = int(np.clip(np.searchsorted(br.w, w[k]) - 1, 0, br.w.size - 1))
                g, x, ok = self._newton_branch(w[k], br.g[j], br.x[j])
                if not ok:
                    raise ConvergenceError("freeprob.r_transform", f"continued branch solve failed at w = {w[k]:.17g}")
                out[k] = x
        return float(out[0]) if scalar else out

    def extension_weights(self, w: float) -> np.ndarray:
        """Vector ``alpha_i g_i / w`` on either branch at parameter ``w``."""
        alpha = np.asarray(self.profile.alpha)
        if w <= self.g_edge:
            g = self.components(self.K(w))[0] if w < self.g_edge else self._edge_data[1]
        else:
            br = self._extend_branch(w)
            j = int(np.clip(np.searchsorted(br.w, w) - 1, 0, br.w.size - 1))
            g, _, ok = self._newton_branch(w, br.g[j], br.x[j])
            if not ok:
                raise ConvergenceError("freeprob.r_transform", f"continued branch solve failed at w = {w:.17g}")
        return alpha * g / w

    def check_monotone(self, x_max: float) -> tuple[bool, str]:
        """Verify that ``R(w) + 1/w`` increases on the branch up to ``x_max``."""
        try:
            br = self._branch_for_x(x_max)
        except ConvergenceError as exc:
            return False, str(exc)
        if br.reason:
            return False, br.reason
        return True, ""

    def _newton_branch_batch(self, w, g, x, iters=60):
        """Batched version of :meth:`_newton_branch`; returns ``(g, x, ok)``."""
        s2a = np.asarray(self.profile.s2_alpha)
        alpha = np.asarray(self.profile.alpha)
        n = self.profile.n
        g, x = g.copy(), x.copy()
        eye = np.eye(n)
        for _ in range(iters):
            sg = g @ s2a.T
            F = np.concatenate([g * (x[:, None] - sg) - 1.0, (g @ alpha - w)[:, None]], axis=1)
            if np.abs(F).max() <= 1e-15 * (1.0 + np.abs(x).max()):
                break
            J = np.zeros((w.size, n + 1, n + 1))
            J[:, :n, :n] = (x[:, None] - sg)[:, :, None] * eye - g[:, :, None] * s2a[None]
            J[:, :n, n] = g
            J[:, n, :n] = alpha
            try:
                step = np.linalg.solve(J, -F[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                break
            g = g + step[:, :n]
            x = x + step[:, n]
            if not np.isfinite(step).all() or np.abs(step).max() <= 1e-15 * (1.0 + np.abs(x).max()):
                break
        sg = g @ s2a.T
        F = np.concatenate([g * (x[:, None] - sg) - 1.0, (g @ alpha - w)[:, None]], axis=1)
        ok = np.isfinite(F).all(axis=1) & (np.abs(F).max(axis=1) <= 1e-11)
        return g, x, ok

    def g_bar(self, x):
        """Inverse of ``w -> R(w) + 1/w`` on ``w >= g_edge``, by bisection."""
        scalar = np.ndim(x) == 0
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any(x <= self.r):
            raise DomainError(f"freeprob.g_bar: x must exceed the right edge r = {self.r:.17g}")
        br = self._branch_for_x(float(x.max()))
        if br.reason or br.x[-1] < x.max():
            raise ConvergenceError(
                "freeprob.g_bar",
                f"R is not extendable up to x = {x.max():.17g}: {br.reason or 'branch too short'}",
            )
        j = np.clip(np.searchsorted(br.x, x), 1, br.x.size - 1)
        lo, hi = br.w[j - 1].copy(), br.w[j].copy()
        g_lo, x_lo = br.g[j - 1].copy(), br.x[j - 1].copy()
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            if np.all((mid <= lo) | (mid >= hi)):
                break
            g_m, x_m, ok = self._newton_branch_batch(mid, g_lo, x_lo)
            if not ok.all():
                raise ConvergenceError("freeprob.g_bar", f"continued branch solve failed at w = {mid[~ok][:3].tolist()}")
            up = x_m > x
            hi = np.where(up, mid, hi)
            lo = np.where(up, lo, mid)
            g_lo = np.where(up[:, None], g_lo, g_m)
            x_lo = np.where(up, x_lo, x_m)
        out = 0.5 * (lo + hi)
        return float(out[0]) if scalar else out

    # -- log potential --------------------------------------------------------
    def log_potential(self, u):
        """``int log(u - y) dmu(y)`` for ``u >= r``."""
        scalar = np.ndim(u) == 0
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if np.any(u < self.r):
            raise DomainError(f"freeprob.spherical_j: u must be at least r = {self.r:.17g}")
        v = 0.5 * (_GL_U + 1.0)
        wv = 0.5 * _GL_W
        s = u[:, None] / (1.0 - v[None, :] ** 2)
        jac = 2.0 * u[:, None] * v[None, :] / (1.0 - v[None, :] ** 2) ** 2
        # s == r only when v == 0, which is not a Gauss node
        Gs = self.G(s.ravel()).reshape(s.shape)
        tail = np.sum(wv[None, :] * (Gs - 1.0 / s) * jac, axis=1)
        out = np.log(u) - tail
        return float(out[0]) if scalar else out


def build_transforms(p: BlockProfile, spectral_density: SpectralDensity | None = None) -> TransformTable:
    """Transform table for a block profile."""
    return TransformTable(p, spectral_density)


def stieltjes(t: TransformTable, x):
    """``G(x)`` for ``x > r``.

    Examples
    --------
    >>> from varprof.profile import BlockProfile
    >>> t = build_transforms(BlockProfile([[1.0]], [1.0]))
    >>> round(stieltjes(t, 2.5), 12)
    0.5
    """
    return t.G(x)


def stieltjes_quadrature(t: TransformTable, x: float) -> float:
    """``int rho(E)/(x - E) dE`` against the density grid (cross-check)."""
    if x <= t.r:
        raise DomainError("x must exceed the right edge")
    with np.errstate(divide="ignore", invalid="ignore"):
        return t.density.integrate(lambda e: 1.0 / (x - e))


def r_transform(t: TransformTable, w, extend: bool = False):
    """``R(w) = K(w) - 1/w`` for ``0 < w <= g_edge`` (or beyond with ``extend``)."""
    return t.R(w, extend=extend)


def g_bar(t: TransformTable, x):
    """Conjugate inverse ``Gbar(x)`` for ``x > r``.

    Raises
    ------
    ConvergenceError
        When ``w -> R(w) + 1/w`` cannot be verified increasing up to ``x``.
    """
    return t.g_bar(x)


def _log_integral_density(t: TransformTable, u: float) -> float:
    """``int log(u - y) dmu(y)`` by quadrature on the density grid."""
    d = t.density
    with np.errstate(divide="ignore"):
        return d.integrate(lambda e: np.log(np.maximum(u - e, 1e-300)))


def spherical_j(t: TransformTable, theta: float, lam: float, beta: int, method: str = "potential") -> float:
    """Limit of the normalised log spherical integral.

    Parameters
    ----------
    t : TransformTable
    theta : float
        Tilt parameter, ``theta >= 0``.
    lam : float
        Position of the largest eigenvalue, ``lam >= r``.
    beta : {1, 2}
    method : {"potential", "density"}
        How ``int log(u - y) dmu(y)`` is evaluated.

    Notes
    -----
    With ``t' = 2 theta / beta`` the logarithm reduces to
    ``log t' + int log(K(t') - y) dmu`` when ``t' <= G(lam)`` and to
    ``log t' + int log(lam - y) dmu`` above that threshold.
    """
    if beta not in (1, 2):
        raise DomainError("beta must be 1 or 2")
    if theta < 0:
        raise DomainError("theta must be nonnegative")
    if lam < t.r:
        raise DomainError(f"freeprob.spherical_j: lambda must be at least r = {t.r:.17g}")
    if theta == 0:
        return 0.0
    tp = 2.0 * theta / beta
    G_lam = t.g_edge if lam == t.r else t.G(lam)
    if method not in ("potential", "density"):
        raise DomainError(f"unknown method {method!r}")
    logint = t.log_potential if method == "potential" else (lambda u: _log_integral_density(t, u))
    if tp <= G_lam:
        Kt = t.K(tp)
        v = Kt - 1.0 / tp
        return float(theta * v - 0.5 * beta * (math.log(tp) + logint(Kt)))
    v = lam - 1.0 / tp
    return float(theta * v - 0.5 * beta * (math.log(tp) + logint(lam)))
