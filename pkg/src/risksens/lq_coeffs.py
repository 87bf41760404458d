"""Deterministic coefficient equations of the factor-model portfolio problem.

Notation used throughout (all scalars because there is one stock and one
factor):

    S = sigma . sigma        (stock variance rate, > 0)
    c = lambda . sigma       (stock/factor covariance rate)
    L = lambda . lambda      (factor variance rate)

    alpha = theta*L - theta^2/(theta+1) * c^2/S
    beta  = B - theta/(theta+1) * A*c/S
    c0    = A^2 / ((theta+1) S)

and the four backward equations are

    gamma' = -alpha gamma^2 - 2 beta gamma + c0,                 gamma(T) = 0
    phi'   = -(beta + alpha gamma) phi - b gamma
             + (A + theta c gamma)(a - r) / ((theta+1) S),        phi(T)   = 0
    k'     = (a - r + theta c phi)^2 / (2 (theta+1) S)
             + r - b phi - theta L phi^2 / 2 - L gamma / 2,       k(T)     = -log v
    rho'   = -2 B rho - theta L gamma^2,                          rho(T)   = 0
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gridfn import BlowUpError, GridFunction, TimeGrid, integrate_ode_backward

__all__ = [
    "PortfolioParams",
    "CoefficientSet",
    "RiccatiBlowUpError",
    "solve_gamma",
    "gamma_closed_form",
    "solve_phi",
    "solve_k",
    "solve_rho",
    "solve_coefficients",
    "write_coefficients_csv",
]


class RiccatiBlowUpError(BlowUpError):
    pass


@dataclass(frozen=True)
class PortfolioParams:
    """Market and investor constants of the factor model.

    ``r`` is either a constant rate or a :class:`GridFunction` covering
    ``[0, T]``.
    """

    r: float | GridFunction
    a: float
    A: float
    b: float
    B: float
    sigma: tuple[float, float]
    lam: tuple[float, float]
    theta: float
    v: float
    T: float

    def __post_init__(self):
        sigma = tuple(float(s) for s in np.ravel(self.sigma))
        lam = tuple(float(s) for s in np.ravel(self.lam))
        if len(sigma) != 2 or len(lam) != 2:
            raise ValueError("sigma and lam must be 2-vectors")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "lam", lam)
        for name in ("a", "A", "b", "B", "theta", "v", "T"):
            val = float(getattr(self, name))
            if not math.isfinite(val):
                raise ValueError(f"{name} must be finite, got {val}")
            object.__setattr__(self, name, val)
        if not self.S > 0:
            raise ValueError("sigma . sigma must be positive")
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if not self.v > 0:
            raise ValueError(f"initial wealth v must be positive, got {self.v}")
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if isinstance(self.r, GridFunction):
            g = self.r.grid
            if g.t0 > 0 or g.T < self.T:
                raise ValueError("rate function must cover [0, T]")
            if not np.all(np.isfinite(self.r.values)):
                raise ValueError("rate function must be finite")
        else:
            r = float(self.r)
            if not math.isfinite(r):
                raise ValueError("r must be finite")
            object.__setattr__(self, "r", r)
        # Cauchy-Schwarz gives c^2 <= L*S, hence alpha >= theta*L/(theta+1) >= 0.
        if self.alpha < -1e-14 * max(1.0, self.theta * self.L):
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")

    @property
    def S(self) -> float:
        return self.sigma[0] ** 2 + self.sigma[1] ** 2

    @property
    def c(self) -> float:
        return self.lam[0] * self.sigma[0] + self.lam[1] * self.sigma[1]

    @property
    def L(self) -> float:
        return self.lam[0] ** 2 + self.lam[1] ** 2

    @property
    def alpha(self) -> float:
        th = self.theta
        return th * self.L - th * th / (th + 1.0) * self.c ** 2 / self.S

    @property
    def beta(self) -> float:
        th = self.theta
        return self.B - th / (th + 1.0) * self.A * self.c / self.S

    @property
    def c0(self) -> float:
        return self.A ** 2 / ((self.theta + 1.0) * self.S)

    def rate(self, t):
        """Riskless rate at ``t`` (scalar or array)."""
        if isinstance(self.r, GridFunction):
            return self.r(t)
        if np.ndim(t) == 0:
            return self.r
        return np.full(np.shape(t), self.r)

    def _rate_smooth(self, t):
        if isinstance(self.r, GridFunction):
            return self.r.hermite(t)
        return self.r

    def replace(self, **changes) -> "PortfolioParams":
        fields = dict(r=self.r, a=self.a, A=self.A, b=self.b, B=self.B, sigma=self.sigma,
                      lam=self.lam, theta=self.theta, v=self.v, T=self.T)
        fields.update(changes)
        return PortfolioParams(**fields)


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    gamma: GridFunction
    phi: GridFunction
    k: GridFunction
    rho: GridFunction
    params: PortfolioParams = field(repr=False)

    @property
    def grid(self) -> TimeGrid:
        return self.gamma.grid

    @property
    def alpha(self) -> float:
        return self.params.alpha

    @property
    def beta(self) -> float:
        return self.params.beta

    @property
    def c0(self) -> float:
        return self.params.c0


def _check_grid(params: PortfolioParams, grid: TimeGrid):
    if grid.T != params.T:
        raise ValueError(f"ODE grid ends at {grid.T}, horizon is {params.T}")


def _check_same_grid(grid: TimeGrid, *fns: GridFunction):
    for f in fns:
        if f.grid != grid:
            raise ValueError(f"grid mismatch: {f.grid} vs {grid}")


def _solve(rhs, terminal, grid, name):
    try:
        return integrate_ode_backward(rhs, terminal, grid)
    except BlowUpError as exc:
        raise RiccatiBlowUpError(f"{name}: {exc}", exc.t) from exc


def solve_gamma(params: PortfolioParams, grid: TimeGrid) -> GridFunction:
    """Riccati coefficient of the quadratic part of the value function."""
    _check_grid(params, grid)
    al, be, c0 = params.alpha, params.beta, params.c0

    def rhs(t, g):
        return -al * g * g - 2.0 * be * g + c0

    return _solve(rhs, 0.0, grid, "gamma")


def gamma_closed_form(params: PortfolioParams, t) -> float:
    """Exact solution of the constant-coefficient Riccati equation for gamma.

    With tau = T - t, D = sqrt(beta^2 + alpha c0) and q = 1 - exp(-2 D tau),

        gamma(t) = -c0 q / (D (2 - q) - beta q),

    which reduces to -c0 (exp(2 beta tau) - 1) / (2 beta) when alpha = 0.
    """
    al, be, c0 = params.alpha, params.beta, params.c0
    tau = params.T - np.asarray(t, dtype=float)
    if np.any(tau < -1e-12 * max(1.0, params.T)):
        raise ValueError("t beyond the horizon")
    tau = np.maximum(tau, 0.0)
    D = math.sqrt(max(be * be + al * c0, 0.0))
    if D == 0.0:
        # beta = 0 and alpha*c0 = 0: gamma' = -alpha gamma^2 + c0 with gamma = -c0 tau
        # (if c0 = 0 the solution is identically zero).
        out = -c0 * tau
    else:
        q = -np.expm1(-2.0 * D * tau)
        out = -c0 * q / (D * (2.0 - q) - be * q)
    return out[()] if np.ndim(out) == 0 else out


def solve_phi(params: PortfolioParams, gamma: GridFunction, grid: TimeGrid) -> GridFunction:
    """Linear coefficient: backward linear ODE driven by gamma and the excess return."""
    _check_grid(params, grid)
    _check_same_grid(grid, gamma)
    th, S, c, A, b = params.theta, params.S, params.c, params.A, params.b
    al, be = params.alpha, params.beta
    k_sr = 1.0 / ((th + 1.0) * S)

    def rhs(t, ph):
        g = gamma.hermite(t)
        ex = params.a - params._rate_smooth(t)
        return -(be + al * g) * ph - b * g + (A + th * c * g) * ex * k_sr

    return _solve(rhs, 0.0, grid, "phi")


def solve_k(params: PortfolioParams, gamma: GridFunction, phi: GridFunction,
            grid: TimeGrid) -> GridFunction:
    """Constant term of the value function, terminal value -log v.

    The sign convention is the one under which the HJB residual vanishes
    (checked in the test-suite against a grid-search minimisation of G).
    """
    _check_grid(params, grid)
    _check_same_grid(grid, gamma, phi)
    th, S, c, L, b = params.theta, params.S, params.c, params.L, params.b

    def rhs(t, k):
        g = gamma.hermite(t)
        ph = phi.hermite(t)
        r = params._rate_smooth(t)
        m = params.a - r + th * c * ph
        return m * m / (2.0 * (th + 1.0) * S) + r - b * ph - 0.5 * th * L * ph * ph - 0.5 * L * g

    return _solve(rhs, -math.log(params.v), grid, "k")


def solve_rho(params: PortfolioParams, gamma: GridFunction, grid: TimeGrid) -> GridFunction:
    """Second-order adjoint coefficient (P = rho, Q = 0 in the LQ model)."""
    _check_grid(params, grid)
    _check_same_grid(grid, gamma)
    B, th, L = params.B, params.theta, params.L

    def rhs(t, rho):
        g = gamma.hermite(t)
        return -2.0 * B * rho - th * L * g * g

    return _solve(rhs, 0.0, grid, "rho")


def solve_coefficients(params: PortfolioParams, grid: TimeGrid) -> CoefficientSet:
    """Solve gamma, phi, k and rho on ``grid`` (normally an already refined ODE grid)."""
    gamma = solve_gamma(params, grid)
    phi = solve_phi(params, gamma, grid)
    k = solve_k(params, gamma, phi, grid)
    rho = solve_rho(params, gamma, grid)
    return CoefficientSet(gamma, phi, k, rho, params)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_coefficients_csv(coeffs: CoefficientSet, path) -> None:
    t = coeffs.grid.nodes
    with open(path, "w", newline="\n") as fh:
        fh.write("t,gamma,phi,k,rho\n")
        for i in range(len(t)):
            fh.write(",".join(_fmt(v) for v in (
                t[i], coeffs.gamma.values[i], coeffs.phi.values[i],
                coeffs.k.values[i], coeffs.rho.values[i])) + "\n")
