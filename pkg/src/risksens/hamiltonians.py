"""Generalized Hamiltonian G, Hamiltonian H, the H-calligraphic function, HJB residuals.

Problem callables are vectorised over leading axes: with ``x`` of shape
``(..., n)`` and ``u`` of shape ``(..., m)``,

    f(t, x, u)     -> (..., n)
    sigma(t, x, u) -> (..., n, d)
    l(t, x, u)     -> (...)
    g(x)           -> (...)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lq_coeffs import PortfolioParams

__all__ = [
    "GeneralProblem",
    "AdjointState",
    "MinimumConditionReport",
    "factor_problem",
    "eval_G",
    "eval_H",
    "eval_Hcal",
    "variational_lhs",
    "minimize_G",
    "hjb_residual",
    "check_minimum_condition",
    "fd_derivatives",
]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class GeneralProblem:
    n: int
    d: int
    m: int
    f: Callable
    sigma: Callable
    l: Callable
    g: Callable
    mu: float
    control_box: tuple = ((-10.0, 10.0),)
    label: str = "problem"

    def __post_init__(self):
        box = np.asarray(self.control_box, dtype=float).reshape(-1, 2)
        if box.shape[0] != self.m:
            raise ValueError(f"control_box has {box.shape[0]} intervals, m={self.m}")
        if not np.all(np.isfinite(box)) or np.any(box[:, 0] > box[:, 1]):
            raise ValueError(f"control_box must be finite, non-empty intervals: {box}")
        if min(self.n, self.d, self.m) < 1:
            raise ValueError("dimensions must be positive")
        object.__setattr__(self, "control_box", tuple(map(tuple, box)))

    @property
    def box(self) -> np.ndarray:
        return np.asarray(self.control_box, dtype=float)


@dataclass(frozen=True, eq=False)
class AdjointState:
    p: np.ndarray
    q: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    sigma_bar: np.ndarray | None = None

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        n = p.shape[-1]
        q = np.asarray(self.q, dtype=float).reshape(n, -1)
        d = q.shape[1]
        P = np.asarray(self.P, dtype=float).reshape(n, n)
        Q = np.asarray(self.Q, dtype=float).reshape(d, n, n)
        if not np.allclose(P, P.T, rtol=0, atol=1e-12 * max(1.0, np.abs(P).max())):
            raise ValueError("P must be symmetric")
        if not np.allclose(Q, np.swapaxes(Q, 1, 2), rtol=0,
                           atol=1e-12 * max(1.0, np.abs(Q).max(initial=0.0))):
            raise ValueError("every Q_j must be symmetric")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "Q", Q)
        if self.sigma_bar is not None:
            object.__setattr__(self, "sigma_bar",
                               np.asarray(self.sigma_bar, dtype=float).reshape(n, d))

    def weight(self, mu: float) -> np.ndarray:
        """P + mu p p^T."""
        return self.P + mu * np.outer(self.p, self.p)


def factor_problem(params: PortfolioParams, control_box=((-10.0, 10.0),)) -> GeneralProblem:
    """The portfolio problem written in the generic form under the transformed measure.

    State: the factor X (n = 1); noise: two-dimensional; control: the stock
    fraction u; mu = theta; terminal cost g = -log v.
    """
    th, S, c = params.theta, params.S, params.c
    lam = np.array(params.lam, dtype=float)
    b, B, a, A = params.b, params.B, params.a, params.A
    log_v = math.log(params.v)

    def f(t, x, u):
        return b + B * x - th * c * u

    def sigma(t, x, u):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        return np.broadcast_to(lam.reshape(1, 2), shape + (1, 2))

    def l(t, x, u):
        r = params.rate(t)
        x0, u0 = x[..., 0], u[..., 0]
        return 0.5 * (th + 1.0) * S * u0 * u0 - r - u0 * (a + A * x0 - r)

    def g(x):
        return np.full(np.shape(x)[:-1], -log_v)

    return GeneralProblem(1, 2, 1, f, sigma, l, g, th, control_box, "factor (transformed measure)")


def _as_state(x, n):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != n:
        x = x[..., None] if n == 1 else x
    return x


def _as_matrix(P, n):
    P = np.asarray(P, dtype=float)
    if P.ndim < 2 or P.shape[-2:] != (n, n):
        if n != 1:
            raise ValueError(f"expected trailing shape ({n}, {n}), got {P.shape}")
        P = P[..., None, None]
    return P


def eval_G(t, x, u, p, P, problem: GeneralProblem):
    """l + <p, f> + (mu/2)|sigma^T p|^2 + (1/2) tr(sigma sigma^T P).

    Broadcasts over leading axes of ``x``, ``u``, ``p`` and ``P``.
    """
    x = _as_state(x, problem.n)
    u = _as_state(u, problem.m)
    p = _as_state(p, problem.n)
    P = _as_matrix(P, problem.n)
    fv = problem.f(t, x, u)
    sig = problem.sigma(t, x, u)
    sp = np.einsum("...nd,...n->...d", sig, p)
    tr = np.einsum("...id,...ij,...jd->...", sig, P, sig)
    out = (problem.l(t, x, u) + np.einsum("...n,...n->...", p, fv)
           + 0.5 * problem.mu * np.einsum("...d,...d->...", sp, sp) + 0.5 * tr)
    return out[()] if np.ndim(out) == 0 else out


def _require_sigma_bar(adj: AdjointState):
    if adj.sigma_bar is None:
        raise ValueError("AdjointState.sigma_bar is required to evaluate H")
    return adj.sigma_bar


def eval_H(s, x, u, adj: AdjointState, problem: GeneralProblem):
    """<p, f> + l + sum_j q_j . sigma_j + mu sum_j (sigma_j . p)(sigma_bar_j . p)."""
    sbar = _require_sigma_bar(adj)
    x = _as_state(x, problem.n)
    u = _as_state(u, problem.m)
    p = adj.p
    fv = problem.f(s, x, u)
    sig = problem.sigma(s, x, u)
    sp = np.einsum("...nd,n->...d", sig, p)
    sbar_p = sbar.T @ p
    out = (np.einsum("...n,n->...", fv, p) + problem.l(s, x, u)
           + np.einsum("...nd,nd->...", sig, adj.q)
           + problem.mu * np.einsum("...d,d->...", sp, sbar_p))
    return out[()] if np.ndim(out) == 0 else out


def _trace_quad(M, W):
    """tr(M^T W M) for M of shape (..., n, d)."""
    return np.einsum("...id,ij,...jd->...", M, W, M)


def eval_Hcal(s, x, u, adj: AdjointState, problem: GeneralProblem):
    """H - tr[sb^T W sb]/2 + tr[(sigma - sb)^T W (sigma - sb)]/2 with W = P + mu p p^T."""
    sbar = _require_sigma_bar(adj)
    W = adj.weight(problem.mu)
    x = _as_state(x, problem.n)
    u = _as_state(u, problem.m)
    diff = problem.sigma(s, x, u) - sbar
    out = (eval_H(s, x, u, adj, problem) - 0.5 * _trace_quad(sbar, W)
           + 0.5 * _trace_quad(diff, W))
    return out[()] if np.ndim(out) == 0 else out


def variational_lhs(s, x, u, u_bar, adj: AdjointState, problem: GeneralProblem):
    """Left-hand side of the variational inequality of the maximum principle.

    H(u) - H(u_bar) + tr[(sigma(u) - sigma_bar)^T W (sigma(u) - sigma_bar)]/2,
    which must be non-negative for every admissible ``u`` at an optimum.
    """
    sbar = _require_sigma_bar(adj)
    W = adj.weight(problem.mu)
    x = _as_state(x, problem.n)
    u = _as_state(u, problem.m)
    diff = problem.sigma(s, x, u) - sbar
    out = (eval_H(s, x, u, adj, problem) - eval_H(s, x, u_bar, adj, problem)
           + 0.5 * _trace_quad(diff, W))
    return out[()] if np.ndim(out) == 0 else out


def _control_lattice(box: np.ndarray, n_grid: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, n_grid) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _golden(fun, lo, hi, tol):
    """Golden-section search for a minimum of ``fun`` on [lo, hi]."""
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = fun(x1), fun(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _GOLDEN * (hi - lo)
            f1 = fun(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _GOLDEN * (hi - lo)
            f2 = fun(x2)
    return (x1, f1) if f1 <= f2 else (x2, f2)


def minimize_G(t, x, p, P, problem: GeneralProblem, n_grid: int = 1001,
               refine: bool = True, tol: float = 1e-7) -> tuple[np.ndarray, float]:
    """Minimise G over the control box: lattice search, then local refinement.

    Refinement is golden-section search on the lattice cell around the best
    point (one coordinate at a time when m > 1), closed by a single
    three-point parabolic step that is kept only if it lowers G. Ties on the
    lattice go to the smallest control.
    """
    box = problem.box
    lattice = _control_lattice(box, n_grid)
    x_arr = _as_state(x, problem.n)
    p_arr = _as_state(p, problem.n)
    vals = eval_G(t, x_arr, lattice, p_arr, P, problem)
    vals = np.broadcast_to(vals, lattice.shape[:1])
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("G is not finite on the control box")
    i = int(np.argmin(vals))
    best_u = lattice[i].copy()
    best = float(vals[i])
    if not refine:
        return best_u, best

    def G_of(u):
        return float(eval_G(t, x_arr, u, p_arr, P, problem))

    step = (box[:, 1] - box[:, 0]) / max(n_grid - 1, 1)
    for j in range(problem.m):
        if step[j] == 0:
            continue
        lo = max(box[j, 0], best_u[j] - step[j])
        hi = min(box[j, 1], best_u[j] + step[j])

        def along(z, j=j):
            trial = best_u.copy()
            trial[j] = z
            return G_of(trial)

        z, fz = _golden(along, lo, hi, tol * step[j])
        if fz < best:
            best_u[j], best = z, fz
        # parabolic closing step through three points spaced by h
        h = min(0.05 * step[j], 0.25 * (hi - lo))
        if h > 0:
            fm, f0, fp = along(best_u[j] - h), best, along(best_u[j] + h)
            curv = fp - 2.0 * f0 + fm
            if curv > 0:
                z = best_u[j] - 0.5 * h * (fp - fm) / curv
                if lo <= z <= hi:
                    fz = along(z)
                    # near the vertex G is flat to rounding; trust the parabola there
                    if fz <= best + 8.0 * np.finfo(float).eps * max(1.0, abs(best)):
                        best_u[j], best = z, fz
    return best_u, best


def hjb_residual(V_t, V_x, V_xx, t, x, problem: GeneralProblem, **kwargs) -> float:
    """V_t + inf_u G(t, x, u, V_x, V_xx), with the infimum from :func:`minimize_G`."""
    _, g_min = minimize_G(t, x, V_x(t, x), V_xx(t, x), problem, **kwargs)
    return float(V_t(t, x) + g_min)


def fd_derivatives(V: Callable, h_rel: float = 1e-5, t_range=None):
    """Central-difference wrappers (V_t, V_x, V_xx) for a scalar-state ``V(t, x)``.

    First derivatives use h = h_rel * max(1, |.|); the second derivative uses
    h = sqrt(h_rel) * max(1, |x|). Near the ends of ``t_range`` the time
    difference becomes one-sided.
    """

    def V_t(t, x):
        h = h_rel * max(1.0, abs(t))
        lo, hi = (-np.inf, np.inf) if t_range is None else t_range
        t_minus, t_plus = max(t - h, lo), min(t + h, hi)
        return (V(t_plus, x) - V(t_minus, x)) / (t_plus - t_minus)

    def V_x(t, x):
        h = h_rel * max(1.0, abs(float(np.ravel(x)[0])))
        return (V(t, x + h) - V(t, x - h)) / (2.0 * h)

    def V_xx(t, x):
        h = math.sqrt(h_rel) * max(1.0, abs(float(np.ravel(x)[0])))
        return (V(t, x + h) - 2.0 * V(t, x) + V(t, x - h)) / (h * h)

    return V_t, V_x, V_xx


@dataclass
class MinimumConditionReport:
    passed: bool
    violation: float
    worst_u: np.ndarray
    lhs_min: float
    lhs_passed: bool
    tol: float
    hcal_bar: float = field(repr=False, default=float("nan"))


def check_minimum_condition(s, x_bar, u_bar, adj: AdjointState, problem: GeneralProblem,
                            controls: Sequence | np.ndarray | None = None,
                            tol: float = 1e-8) -> MinimumConditionReport:
    """Check Hcal(u_bar) <= Hcal(u) + tol and the variational LHS >= -tol on sampled controls.

    ``controls`` defaults to a 1001-point lattice per control dimension over
    the problem's control box.
    """
    if controls is None:
        controls = _control_lattice(problem.box, 1001)
    controls = np.asarray(controls, dtype=float).reshape(-1, problem.m)
    u_bar = np.atleast_1d(np.asarray(u_bar, dtype=float))
    h_bar = float(eval_Hcal(s, x_bar, u_bar, adj, problem))
    h_all = np.broadcast_to(eval_Hcal(s, x_bar, controls, adj, problem), controls.shape[:1])
    gaps = h_bar - h_all
    i = int(np.argmax(gaps))
    violation = max(float(gaps[i]), 0.0)
    lhs = np.broadcast_to(variational_lhs(s, x_bar, controls, u_bar, adj, problem),
                          controls.shape[:1])
    lhs_min = float(lhs.min())
    return MinimumConditionReport(
        passed=violation <= tol, violation=violation, worst_u=controls[i].copy(),
        lhs_min=lhs_min, lhs_passed=lhs_min >= -tol, tol=tol, hcal_bar=h_bar)
