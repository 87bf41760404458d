"""Euler-Maruyama simulation with reproducible, block-addressed Gaussian noise.

Noise for block ``(seed, block_index)`` comes from numpy's counter-based
Philox generator keyed by that pair, drawn path-major, so path ``p``'s
increments depend only on ``(seed, block_index, p)`` and not on how many
paths the block holds. Competing policies simulated on the same
:class:`NoiseBlock` therefore share every increment (common random numbers).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .gridfn import TimeGrid
from .hamiltonians import GeneralProblem, factor_problem
from .lq_coeffs import PortfolioParams

__all__ = [
    "SimulationError",
    "NoiseBlock",
    "SamplePaths",
    "FeedbackPolicy",
    "generate_noise",
    "noise_blocks",
    "map_blocks",
    "constant_policy",
    "simulate_generic",
    "simulate_factor_transformed",
    "simulate_factor_original",
    "simulate_wealth_original",
    "write_paths_csv",
]


class SimulationError(FloatingPointError):
    def __init__(self, message, path: int, step: int):
        super().__init__(message)
        self.path = path
        self.step = step


@dataclass(frozen=True, eq=False)
class NoiseBlock:
    grid: TimeGrid
    n_paths: int
    d: int
    seed: int
    block_index: int
    increments: np.ndarray  # (n_steps, n_paths, d), each entry ~ N(0, dt)

    def coarsen(self, factor: int) -> "NoiseBlock":
        """Sum consecutive increments: the same Brownian paths on a coarser grid."""
        n = self.grid.n_steps
        if n % factor:
            raise ValueError(f"{n} steps are not divisible by {factor}")
        grid = TimeGrid(self.grid.t0, self.grid.T, n // factor)
        inc = self.increments.reshape(n // factor, factor, self.n_paths, self.d).sum(axis=1)
        return NoiseBlock(grid, self.n_paths, self.d, self.seed, self.block_index, inc)


def generate_noise(grid: TimeGrid, n_paths: int, d: int, seed: int,
                   block_index: int = 0) -> NoiseBlock:
    if n_paths < 1 or d < 1:
        raise ValueError("n_paths and d must be positive")
    if seed < 0 or block_index < 0:
        raise ValueError("seed and block_index must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block_index),))
    gen = np.random.Generator(np.random.Philox(ss))
    z = gen.standard_normal((n_paths, grid.n_steps, d))
    inc = np.ascontiguousarray(z.transpose(1, 0, 2))
    inc *= math.sqrt(grid.dt)
    inc.setflags(write=False)
    return NoiseBlock(grid, int(n_paths), int(d), int(seed), int(block_index), inc)


def noise_blocks(grid: TimeGrid, n_paths: int, d: int, seed: int, block_size: int,
                 first_block: int = 0) -> Iterator[NoiseBlock]:
    """Lazily split ``n_paths`` into consecutive blocks of at most ``block_size``."""
    if block_size < 1:
        raise ValueError("block_size must be positive")
    done, idx = 0, first_block
    while done < n_paths:
        size = min(block_size, n_paths - done)
        yield generate_noise(grid, size, d, seed, idx)
        done += size
        idx += 1


def map_blocks(fn: Callable, blocks: Iterable, workers: int = 1) -> list:
    """Apply ``fn`` to every block; results come back in block order whatever the scheduling."""
    if workers <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, blocks))


@dataclass(frozen=True)
class FeedbackPolicy:
    """A Markov feedback law u = fn(t, x).

    With ``scalar=True`` (the factor model) ``fn`` sees the first state
    component as a 1-d array over paths and returns one control per path.
    Otherwise it gets the full ``(n_paths, n)`` state and returns
    ``(n_paths, m)``.
    """

    fn: Callable
    label: str = "policy"
    scalar: bool = True

    def __call__(self, t, x):
        return self.fn(t, x)

    def control(self, t: float, states: np.ndarray) -> np.ndarray:
        if self.scalar:
            u = np.asarray(self.fn(t, states[..., 0]), dtype=float)
            return np.broadcast_to(u, states.shape[:-1])[..., None]
        return np.asarray(self.fn(t, states), dtype=float)

    def shifted(self, eps: float) -> "FeedbackPolicy":
        if not self.scalar:
            raise ValueError("shifted() is defined for scalar policies")
        fn = self.fn
        return FeedbackPolicy(lambda t, x: fn(t, x) + eps, f"{self.label}{eps:+g}")


def constant_policy(value: float, label: str | None = None) -> FeedbackPolicy:
    return FeedbackPolicy(lambda t, x: np.full(np.shape(x), float(value)),
                          label or f"const({value:g})")


@dataclass(frozen=True, eq=False)
class SamplePaths:
    grid: TimeGrid
    n_paths: int
    states: np.ndarray    # (n_nodes, n_paths, n)
    controls: np.ndarray  # (n_steps, n_paths, m)
    noise: NoiseBlock
    labels: tuple = ("x",)

    @property
    def x(self) -> np.ndarray:
        return self.states[..., 0]

    @property
    def log_v(self) -> np.ndarray:
        if "log_v" not in self.labels:
            raise ValueError("these paths carry no wealth component")
        return self.states[..., self.labels.index("log_v")]


def simulate_generic(problem: GeneralProblem, policy: FeedbackPolicy, x0,
                     noise: NoiseBlock, labels: Sequence[str] | None = None) -> SamplePaths:
    """Euler-Maruyama for dX = f dt + sigma dW with the control taken at the left endpoint."""
    if noise.d != problem.d:
        raise ValueError(f"noise dimension {noise.d} != problem dimension {problem.d}")
    grid = noise.grid
    P, n, m = noise.n_paths, problem.n, problem.m
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != n:
        raise ValueError(f"initial state has {x0.size} components, expected {n}")
    states = np.empty((grid.n_nodes, P, n))
    controls = np.empty((grid.n_steps, P, m))
    x = np.broadcast_to(x0, (P, n)).copy()
    states[0] = x
    t_nodes = grid.nodes
    dt = grid.dt
    for k in range(grid.n_steps):
        t = t_nodes[k]
        u = policy.control(t, x)
        controls[k] = u
        drift = problem.f(t, x, u)
        sig = problem.sigma(t, x, u)
        dW = noise.increments[k]
        diff = sig[..., 0] * dW[:, None, 0]
        for j in range(1, problem.d):
            diff = diff + sig[..., j] * dW[:, None, j]
        x = x + drift * dt + diff
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=-1))[0])
            raise SimulationError(
                f"non-finite state on path {bad} at step {k + 1} (t={t_nodes[k + 1]:.6g})",
                bad, k + 1)
        states[k + 1] = x
    return SamplePaths(grid, P, states, controls, noise,
                       tuple(labels) if labels else tuple(f"x{i}" if i else "x" for i in range(n)))


def simulate_factor_transformed(params: PortfolioParams, policy: FeedbackPolicy, x0: float,
                                noise: NoiseBlock) -> SamplePaths:
    """Factor under the transformed measure: dX = (b + BX - theta c u) dt + lam dW_hat."""
    return simulate_generic(factor_problem(params), policy, x0, noise, labels=("x",))


def _original_factor_problem(params: PortfolioParams) -> GeneralProblem:
    b, B = params.b, params.B
    lam = np.array(params.lam, dtype=float).reshape(1, 2)

    def f(t, x, u):
        return b + B * x

    def sigma(t, x, u):
        return np.broadcast_to(lam, np.shape(x)[:-1] + (1, 2))

    def zero(t, x, u):
        return np.zeros(np.shape(x)[:-1])

    return GeneralProblem(1, 2, 1, f, sigma, zero, lambda x: np.zeros(np.shape(x)[:-1]),
                          params.theta, label="factor (original measure)")


def simulate_factor_original(params: PortfolioParams, x0: float, noise: NoiseBlock) -> SamplePaths:
    """Uncontrolled factor dX = (b + BX) dt + lam dW under the original measure."""
    return simulate_generic(_original_factor_problem(params), constant_policy(0.0), x0, noise,
                            labels=("x",))


def _wealth_problem(params: PortfolioParams) -> GeneralProblem:
    b, B, a, A, S = params.b, params.B, params.a, params.A, params.S
    lam = np.array(params.lam, dtype=float)
    sig = np.array(params.sigma, dtype=float)

    def f(t, x, u):
        r = params.rate(t)
        xf, u0 = x[..., 0], u[..., 0]
        return np.stack([b + B * xf, r + u0 * (a + A * xf - r) - 0.5 * u0 * u0 * S], axis=-1)

    def sigma(t, x, u):
        u0 = u[..., 0]
        out = np.empty(np.shape(x)[:-1] + (2, 2))
        out[..., 0, :] = lam
        out[..., 1, :] = u0[..., None] * sig
        return out

    def zero(t, x, u):
        return np.zeros(np.shape(x)[:-1])

    return GeneralProblem(2, 2, 1, f, sigma, zero, lambda x: np.zeros(np.shape(x)[:-1]),
                          params.theta, label="factor and log-wealth (original measure)")


def simulate_wealth_original(params: PortfolioParams, policy: FeedbackPolicy, x0: float,
                             v0: float, noise: NoiseBlock) -> SamplePaths:
    """Joint (X, log V) under the original measure.

    log V uses the exact Ito drift r + u(a + AX - r) - u^2 S/2 and diffusion
    u sigma, so wealth stays positive without any clamping.
    """
    if not v0 > 0:
        raise ValueError(f"initial wealth must be positive, got {v0}")
    return simulate_generic(_wealth_problem(params), policy, [x0, math.log(v0)], noise,
                            labels=("x", "log_v"))


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_paths_csv(paths: SamplePaths, path) -> None:
    """Dump ``path, t, x, [log_v,] u`` rows; ``u`` is empty at the terminal node."""
    has_v = "log_v" in paths.labels
    t = paths.grid.nodes
    N = paths.grid.n_steps
    with open(path, "w", newline="\n") as fh:
        fh.write("path,t,x," + ("log_v," if has_v else "") + "u\n")
        for p in range(paths.n_paths):
            for k in range(N + 1):
                row = [str(p), _fmt(t[k]), _fmt(paths.x[k, p])]
                if has_v:
                    row.append(_fmt(paths.log_v[k, p]))
                row.append(_fmt(paths.controls[k, p, 0]) if k < N else "")
                fh.write(",".join(row) + "\n")
