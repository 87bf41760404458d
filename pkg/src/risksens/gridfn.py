"""Uniform time grids, grid-sampled functions and a fixed-step RK4 integrator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "BlowUpError",
    "TimeGrid",
    "GridFunction",
    "make_grid",
    "eval_grid_function",
    "integrate_ode_backward",
    "integrate_ode_forward",
]

# Queries this close to a node (in units of dt) snap onto it.
_NODE_SNAP = 1e-9


class BlowUpError(FloatingPointError):
    """Raised when an ODE right-hand side or state stops being finite."""

    def __init__(self, message: str, t: float):
        super().__init__(message)
        self.t = t


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.t0) and math.isfinite(self.T)):
            raise ValueError(f"grid endpoints must be finite, got ({self.t0}, {self.T})")
        if not self.t0 < self.T:
            raise ValueError(f"need t0 < T, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @property
    def nodes(self) -> np.ndarray:
        t = self.t0 + np.arange(self.n_nodes) * self.dt
        t[-1] = self.T
        return t

    def node(self, k: int) -> float:
        if not 0 <= k <= self.n_steps:
            raise IndexError(f"node index {k} outside 0..{self.n_steps}")
        if k == self.n_steps:
            return self.T
        return self.t0 + k * self.dt

    def refine(self, factor: int) -> "TimeGrid":
        """Grid over the same interval with ``factor`` times as many steps."""
        if int(factor) != factor or factor < 1:
            raise ValueError(f"refinement factor must be a positive integer, got {factor}")
        return TimeGrid(self.t0, self.T, self.n_steps * int(factor))

    def contains(self, t) -> bool:
        tol = 1e-12 * max(1.0, abs(self.t0), abs(self.T))
        t = np.asarray(t, dtype=float)
        return bool(np.all((t >= self.t0 - tol) & (t <= self.T + tol)))

    def locate(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Return (left node index, fractional offset in [0, 1]) for each ``t``."""
        if isinstance(t, (float, int, np.floating)):
            return self._locate_scalar(float(t))
        if not self.contains(t):
            raise ValueError(f"time outside grid range [{self.t0}, {self.T}]: {t}")
        w = (np.asarray(t, dtype=float) - self.t0) / self.dt
        w = np.clip(w, 0.0, float(self.n_steps))
        near = np.rint(w)
        w = np.where(np.abs(w - near) < _NODE_SNAP, near, w)
        idx = np.minimum(np.floor(w), self.n_steps - 1).astype(np.intp)
        return idx, w - idx

    def _locate_scalar(self, t: float):
        # Same arithmetic as the array path, without numpy overhead (ODE inner loops).
        tol = 1e-12 * max(1.0, abs(self.t0), abs(self.T))
        if not (self.t0 - tol <= t <= self.T + tol):
            raise ValueError(f"time outside grid range [{self.t0}, {self.T}]: {t}")
        w = min(max((t - self.t0) / self.dt, 0.0), float(self.n_steps))
        near = round(w)
        if abs(w - near) < _NODE_SNAP:
            w = float(near)
        idx = min(math.floor(w), self.n_steps - 1)
        return np.intp(idx), np.float64(w - idx)


def make_grid(t0: float, T: float, n: int) -> TimeGrid:
    return TimeGrid(float(t0), float(T), n)


class GridFunction:
    """Values sampled on the nodes of a :class:`TimeGrid`.

    Evaluation between nodes is linear. When the function came out of an
    ODE solve, ``slopes`` holds the right-hand side at every node; it backs
    :meth:`derivative` and the cubic Hermite evaluation used to feed one
    solved coefficient into another ODE without losing RK4 order.
    """

    def __init__(self, grid: TimeGrid, values, slopes=None):
        values = np.array(values, dtype=float)
        if values.shape[:1] != (grid.n_nodes,):
            raise ValueError(
                f"expected {grid.n_nodes} node values, got array of shape {values.shape}")
        if slopes is not None:
            slopes = np.array(slopes, dtype=float)
            if slopes.shape != values.shape:
                raise ValueError("slopes must have the same shape as values")
            slopes.setflags(write=False)
        values.setflags(write=False)
        self.grid = grid
        self.values = values
        self.slopes = slopes

    def __repr__(self):
        return f"GridFunction({self.grid!r}, shape={self.values.shape})"

    def __len__(self):
        return self.grid.n_nodes

    @property
    def t(self) -> np.ndarray:
        return self.grid.nodes

    def __call__(self, t):
        return _lerp(self.grid, self.values, t)

    def derivative(self, t):
        """Time derivative: node slopes, linearly interpolated."""
        if self.slopes is None:
            raise ValueError("this GridFunction carries no slope information")
        return _lerp(self.grid, self.slopes, t)

    def hermite(self, t):
        """Cubic Hermite interpolation from node values and slopes (O(dt^4))."""
        if self.slopes is None:
            return self(t)
        idx, s = self.grid.locate(t)
        h = self.grid.dt
        y0, y1 = self.values[idx], self.values[idx + 1]
        m0, m1 = self.slopes[idx] * h, self.slopes[idx + 1] * h
        if y0.ndim > s.ndim:
            s = s[..., None]
        s2 = s * s
        s3 = s2 * s
        out = ((2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * m0
               + (-2 * s3 + 3 * s2) * y1 + (s3 - s2) * m1)
        return out[()] if np.ndim(out) == 0 else out

    def resample(self, grid: TimeGrid) -> "GridFunction":
        """Linear interpolation onto another grid covering the same interval."""
        slopes = None if self.slopes is None else self.derivative(grid.nodes)
        return GridFunction(grid, self(grid.nodes), slopes)


def _lerp(grid: TimeGrid, table: np.ndarray, t):
    idx, s = grid.locate(t)
    y0 = table[idx]
    y1 = table[idx + 1]
    if y0.ndim > s.ndim:
        s = s[..., None]
    out = y0 + s * (y1 - y0)
    return out[()] if np.ndim(out) == 0 else out


def eval_grid_function(f: GridFunction, t):
    return f(t)


def _rk4(rhs: Callable, t: float, y, h: float):
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), k1


def _march(rhs, y_start, grid: TimeGrid, backward: bool) -> GridFunction:
    y_start = np.asarray(y_start, dtype=float)
    values = np.empty((grid.n_nodes,) + y_start.shape)
    slopes = np.empty_like(values)
    t = grid.nodes
    order = range(grid.n_steps, 0, -1) if backward else range(grid.n_steps)
    step = -1 if backward else 1
    k_start = grid.n_steps if backward else 0
    values[k_start] = y_start
    y = y_start
    for k in order:
        h = t[k + step] - t[k]
        with np.errstate(over="ignore", invalid="ignore"):
            y_next, k1 = _rk4(rhs, t[k], y, h)
        if not (np.all(np.isfinite(k1)) and np.all(np.isfinite(y_next))):
            raise BlowUpError(
                f"ODE solution stopped being finite between t={t[k + step]:.6g} "
                f"and t={t[k]:.6g}", float(t[k + step]))
        slopes[k] = k1
        values[k + step] = y_next
        y = y_next
    k_end = 0 if backward else grid.n_steps
    slopes[k_end] = rhs(t[k_end], values[k_end])
    if not np.all(np.isfinite(slopes[k_end])):
        raise BlowUpError(f"ODE right-hand side not finite at t={t[k_end]:.6g}",
                          float(t[k_end]))
    return GridFunction(grid, values, slopes)


def integrate_ode_backward(rhs: Callable, terminal, grid: TimeGrid) -> GridFunction:
    """Solve ``y' = rhs(t, y)`` from ``y(T) = terminal`` down to ``t0`` with RK4.

    The terminal node is stored exactly; every other node is one RK4 step of
    size ``-dt`` from its right neighbour. Raises :class:`BlowUpError` when
    the trajectory stops being finite.
    """
    return _march(rhs, terminal, grid, backward=True)


def integrate_ode_forward(rhs: Callable, initial, grid: TimeGrid) -> GridFunction:
    return _march(rhs, initial, grid, backward=False)
