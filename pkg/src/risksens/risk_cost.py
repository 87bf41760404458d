"""Risk-sensitive cost estimators, the measure-change consistency check and BSDE residuals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .hamiltonians import GeneralProblem, factor_problem
from .lq_coeffs import PortfolioParams
from .sde_mc import (
    FeedbackPolicy,
    NoiseBlock,
    SamplePaths,
    simulate_factor_transformed,
    simulate_wealth_original,
)

__all__ = [
    "CostSamples",
    "RiskEstimate",
    "BsdeCheck",
    "TransformReport",
    "accumulate_running_cost",
    "estimate_mean",
    "estimate_risk_sensitive",
    "estimate_growth_rate",
    "paired_difference",
    "transform_consistency",
    "bsde_residual_check",
    "write_estimates_csv",
]


@dataclass(frozen=True, eq=False)
class CostSamples:
    running: np.ndarray
    terminal: np.ndarray

    def __post_init__(self):
        running = np.asarray(self.running, dtype=float).reshape(-1)
        terminal = np.broadcast_to(np.asarray(self.terminal, dtype=float), running.shape)
        if not (np.all(np.isfinite(running)) and np.all(np.isfinite(terminal))):
            raise ValueError("cost samples must be finite")
        object.__setattr__(self, "running", running)
        object.__setattr__(self, "terminal", terminal)

    @property
    def n_paths(self) -> int:
        return self.running.size

    @property
    def total(self) -> np.ndarray:
        return self.running + self.terminal

    @classmethod
    def concat(cls, parts: Sequence["CostSamples"]) -> "CostSamples":
        return cls(np.concatenate([p.running for p in parts]),
                   np.concatenate([np.asarray(p.terminal) for p in parts]))


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    std_error: float
    mu: float
    n_paths: int


def accumulate_running_cost(paths: SamplePaths, l: Callable, grid=None,
                            g: Callable | None = None) -> CostSamples:
    """Left-endpoint Riemann sum of ``l(t, x, u)`` along every path.

    ``l`` follows the vectorised problem convention (state ``(P, n)``,
    control ``(P, m)``). ``g`` optionally adds a terminal cost.
    """
    if paths.controls is None or paths.controls.shape[0] != paths.grid.n_steps:
        raise ValueError("paths carry no recorded controls")
    if grid is not None and grid != paths.grid:
        raise ValueError("grid does not match the sample paths")
    t = paths.grid.nodes
    dt = paths.grid.dt
    running = np.zeros(paths.n_paths)
    for k in range(paths.grid.n_steps):
        running += l(t[k], paths.states[k], paths.controls[k]) * dt
    terminal = g(paths.states[-1]) if g is not None else np.zeros(paths.n_paths)
    return CostSamples(running, terminal)


def _as_total(samples) -> np.ndarray:
    if isinstance(samples, CostSamples):
        return samples.total
    arr = np.asarray(samples, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cost samples must be finite")
    return arr


def estimate_mean(samples) -> RiskEstimate:
    """Risk-neutral route (mu = 0): plain sample mean."""
    J = _as_total(samples)
    n = J.size
    se = float(J.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return RiskEstimate(float(J.mean()), se, 0.0, n)


def _tilted_weights(J: np.ndarray, mu: float):
    y = mu * J
    shift = y.max()
    w = np.exp(y - shift)
    return w, shift


def estimate_risk_sensitive(samples, mu: float) -> RiskEstimate:
    """(1/mu) log mean exp(mu J), evaluated as a max-shifted log-mean-exp.

    The standard error is the delta-method value sd(e^{mu J}) / (|mu| mean(e^{mu J}) sqrt(n));
    the shift cancels in that ratio.
    """
    if mu == 0:
        raise ValueError("mu = 0 has no risk-sensitive form; use estimate_mean")
    J = _as_total(samples)
    n = J.size
    w, shift = _tilted_weights(J, mu)
    mean_w = w.mean()
    value = (shift + math.log(mean_w)) / mu
    se = float(w.std(ddof=1) / (abs(mu) * mean_w * math.sqrt(n))) if n > 1 else 0.0
    return RiskEstimate(float(value), se, float(mu), n)


def paired_difference(samples_a, samples_b, mu: float) -> tuple[float, float]:
    """Estimate of J_a - J_b and its standard error for samples on common noise.

    Both estimates are (1/mu) log-mean-exp functionals of paths that share
    their Brownian increments; the error uses the per-path influence
    function w_a/mean(w_a) - w_b/mean(w_b), which keeps the correlation.
    """
    Ja, Jb = _as_total(samples_a), _as_total(samples_b)
    if Ja.size != Jb.size:
        raise ValueError("paired samples must have equal length")
    n = Ja.size
    wa, _ = _tilted_weights(Ja, mu)
    wb, _ = _tilted_weights(Jb, mu)
    infl = (wa / wa.mean() - wb / wb.mean()) / mu
    diff = estimate_risk_sensitive(Ja, mu).value - estimate_risk_sensitive(Jb, mu).value
    se = float(infl.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(diff), se


def estimate_growth_rate(wealth_paths: SamplePaths | np.ndarray, theta: float) -> RiskEstimate:
    """-(1/theta) log E[exp(-theta log V_T)], i.e. the log-mean-exp of log V_T at mu = -theta."""
    if isinstance(wealth_paths, SamplePaths):
        log_vT = wealth_paths.log_v[-1]
    else:
        log_vT = np.asarray(wealth_paths, dtype=float)
    return estimate_risk_sensitive(log_vT, -theta)


@dataclass(frozen=True)
class TransformReport:
    growth_original: RiskEstimate
    growth_transformed: RiskEstimate
    delta: float
    combined_se: float
    passed: bool


def _as_blocks(noise) -> list:
    if isinstance(noise, NoiseBlock):
        return [noise]
    return noise


def transform_consistency(params: PortfolioParams, policy: FeedbackPolicy, x0: float,
                          noise_pair, n_se: float = 3.0) -> TransformReport:
    """Compare the growth rate simulated under the original measure with its transformed form.

    ``noise_pair`` is ``(original, transformed)``; each entry is a
    :class:`NoiseBlock` or an iterable of blocks. The transformed side is
    log v - (1/theta) log E_hat[exp(theta * int l)].
    """
    original, transformed = noise_pair
    theta = params.theta
    problem = factor_problem(params)
    log_vT = []
    for block in _as_blocks(original):
        log_vT.append(simulate_wealth_original(params, policy, x0, params.v, block).log_v[-1])
    running = []
    for block in _as_blocks(transformed):
        paths = simulate_factor_transformed(params, policy, x0, block)
        running.append(accumulate_running_cost(paths, problem.l).running)
    g_orig = estimate_growth_rate(np.concatenate(log_vT), theta)
    tilt = estimate_risk_sensitive(np.concatenate(running), theta)
    g_tr = RiskEstimate(math.log(params.v) - tilt.value, tilt.std_error, -theta, tilt.n_paths)
    delta = abs(g_orig.value - g_tr.value)
    se = math.hypot(g_orig.std_error, g_tr.std_error)
    return TransformReport(g_orig, g_tr, delta, se, delta <= n_se * se)


@dataclass(frozen=True, eq=False)
class BsdeCheck:
    Y: np.ndarray          # (n_nodes, n_paths)
    Z: np.ndarray          # (n_steps, n_paths, d)
    residuals: np.ndarray  # (n_steps, n_paths)
    rms: float
    mean_abs_total: float
    terminal_gap: float    # max |Y_T - g(X_T)|


def bsde_residual_check(paths: SamplePaths, V: Callable, V_x: Callable,
                        problem: GeneralProblem | PortfolioParams) -> BsdeCheck:
    """Plug Y = V(s, X_s), Z = V_x sigma into the quadratic BSDE and measure the residual.

    Per step: Y_{k+1} - Y_k + (l + mu |Z|^2 / 2) dt - Z . dW. ``V`` maps
    ``(t, states (P, n))`` to ``(P,)``; ``V_x`` returns ``(P, n)``.
    """
    if isinstance(problem, PortfolioParams):
        problem = factor_problem(problem)
    if paths.noise is None:
        raise ValueError("paths carry no Brownian increments")
    grid = paths.grid
    t = grid.nodes
    dt = grid.dt
    N, P = grid.n_steps, paths.n_paths
    Y = np.empty((N + 1, P))
    Z = np.empty((N, P, problem.d))
    res = np.empty((N, P))
    for k in range(N + 1):
        Y[k] = V(t[k], paths.states[k])
    for k in range(N):
        x, u = paths.states[k], paths.controls[k]
        grad = np.asarray(V_x(t[k], x), dtype=float).reshape(P, problem.n)
        Z[k] = np.einsum("pn,pnd->pd", grad, problem.sigma(t[k], x, u))
        drive = problem.l(t[k], x, u) + 0.5 * problem.mu * np.sum(Z[k] ** 2, axis=-1)
        res[k] = Y[k + 1] - Y[k] + drive * dt - np.sum(Z[k] * paths.noise.increments[k], axis=-1)
    total = res.sum(axis=0)
    gap = float(np.max(np.abs(Y[-1] - problem.g(paths.states[-1]))))
    return BsdeCheck(Y, Z, res, float(np.sqrt(np.mean(res ** 2))),
                     float(np.mean(np.abs(total))), gap)


def write_estimates_csv(rows: Iterable[tuple[str, RiskEstimate]], path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("label,mu,n_paths,value,std_error\n")
        for label, est in rows:
            fh.write(f"{label},{est.mu:.17g},{est.n_paths},{est.value:.17g},{est.std_error:.17g}\n")
