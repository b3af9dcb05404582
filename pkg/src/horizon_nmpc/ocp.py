"""Finite-horizon optimal control by direct single shooting.

The continuous solver is a spectral projected-gradient method (Barzilai-Borwein
steps with a nonmonotone Armijo backtracking) on the box-constrained control
sequence. Gradients come from central finite differences, evaluated as one
batched rollout of all perturbed sequences.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np


class OracleBudgetError(ValueError):
    """Exhaustive enumeration would exceed the configured rollout budget."""


@dataclass(frozen=True, eq=False)
class HorizonProblem:
    system: Any
    cost: Any
    x0: Any
    N: int
    t0: float = 0.0

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"horizon must be an integer >= 1, got {self.N}")
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.system.state_dim,):
            raise ValueError(f"x0 has dimension {x0.size}, system expects {self.system.state_dim}")
        x0.flags.writeable = False
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "N", int(self.N))


@dataclass(frozen=True)
class SolverStatus:
    converged: bool
    iterations: int
    residual: float
    message: str = ""


@dataclass(frozen=True, eq=False)
class OpenLoopSolution:
    controls: np.ndarray  # (N, m)
    states: np.ndarray  # (N + 1, n)
    stage_costs: np.ndarray  # (N,)
    value: float
    t0: float
    status: SolverStatus
    optimal: bool = True

    @property
    def N(self) -> int:
        return len(self.controls)

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    @property
    def first_control(self) -> np.ndarray:
        return self.controls[0]


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-6
    max_iter: int = 500
    fd_step: float = 1e-6
    restarts: int = 0
    restart_scale: float = 0.1
    seed: int = 0
    oracle_budget: int = 10**7


@dataclass(frozen=True)
class ControlGrid:
    """Finite list of admissible values per control dimension."""

    values: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        vals = tuple(tuple(float(v) for v in dim) for dim in self.values)
        if not vals or any(len(d) == 0 for d in vals):
            raise ValueError("control grid must be nonempty in every dimension")
        object.__setattr__(self, "values", vals)

    @classmethod
    def uniform(cls, lower, upper, points: int) -> "ControlGrid":
        lower, upper = np.atleast_1d(lower), np.atleast_1d(upper)
        return cls(tuple(tuple(np.linspace(lo, hi, points)) for lo, hi in zip(lower, upper)))

    def candidates(self) -> np.ndarray:
        """All control values in lexicographic grid order, shape ``(G, m)``."""
        return np.array(list(itertools.product(*self.values)), dtype=float)


def _total(stage_costs) -> float:
    return math.fsum(float(c) for c in stage_costs)


def _stage_times(p: HorizonProblem, k: int) -> tuple[float, float]:
    T = p.system.T
    return p.t0 + k * T, p.t0 + (k + 1) * T


def evaluate_cost(p: HorizonProblem, controls) -> tuple[float, np.ndarray, np.ndarray]:
    """Roll out ``controls`` from ``p.x0``; return ``(J, states, stage_costs)``."""
    sys = p.system
    u = np.asarray(controls, dtype=float).reshape(p.N, sys.control_dim)
    slack = 1e-12 * (1.0 + np.maximum(np.abs(sys.lower), np.abs(sys.upper)))
    if np.any(u < sys.lower - slack) or np.any(u > sys.upper + slack):
        raise ValueError("controls violate the control bounds")
    states = np.empty((p.N + 1, sys.state_dim))
    costs = np.empty(p.N)
    states[0] = p.x0
    for k in range(p.N):
        seg = sys.transition(states[k], u[k])
        t0, t1 = _stage_times(p, k)
        costs[k] = float(p.cost(seg, u[k], t0, t1))
        states[k + 1] = seg[-1]
    return _total(costs), states, costs


def _batch_costs(p: HorizonProblem, U: np.ndarray) -> np.ndarray:
    """Total cost of each row of ``U`` (shape ``(B, N, m)``)."""
    sys = p.system
    fast = getattr(sys, "batch_cost", None)
    if fast is not None:
        J = fast(sys, p.cost, p.x0, p.t0, U)
        if J is not None:
            return J
    x = np.broadcast_to(p.x0, (U.shape[0], sys.state_dim))
    J = np.zeros(U.shape[0])
    for k in range(p.N):
        seg = sys.transition(x, U[:, k])
        t0, t1 = _stage_times(p, k)
        J = J + p.cost(seg, U[:, k], t0, t1)
        x = seg[-1]
    return J


def _project(u, lo, hi):
    return np.minimum(np.maximum(u, lo), hi)


def _fd_gradient(p: HorizonProblem, u: np.ndarray, rel_step: float) -> np.ndarray:
    n = u.size
    h = rel_step * np.maximum(1.0, np.abs(u.ravel()))
    U = np.repeat(u.reshape(1, -1), 2 * n, axis=0)
    idx = np.arange(n)
    U[2 * idx, idx] += h
    U[2 * idx + 1, idx] -= h
    J = _batch_costs(p, U.reshape(2 * n, *u.shape))
    return ((J[0::2] - J[1::2]) / (2 * h)).reshape(u.shape)


def projected_gradient_residual(u, g, lo, hi) -> float:
    """Sup-norm of ``P(u - g) - u``: zero exactly at first-order stationary points."""
    return float(np.max(np.abs(_project(u - g, lo, hi) - u))) if u.size else 0.0


def _spg(p: HorizonProblem, u0: np.ndarray, opts: SolverOptions):
    lo, hi = p.system.lower, p.system.upper
    lam_min, lam_max, memory, armijo = 1e-10, 1e10, 10, 1e-4

    def f(v):
        return float(_batch_costs(p, v[None])[0])

    u = _project(u0, lo, hi)
    fu = f(u)
    g = _fd_gradient(p, u, opts.fd_step)
    res = projected_gradient_residual(u, g, lo, hi)
    lam = 1.0 / max(res, 1e-12)
    lam = min(max(lam, lam_min), lam_max)
    history = [fu]
    best = (fu, u, res)
    stall = 0
    it = 0
    message = "converged"
    while res > opts.tol:
        if it >= opts.max_iter:
            message = "iteration cap reached"
            break
        it += 1
        d = _project(u - lam * g, lo, hi) - u
        gd = float(np.sum(g * d))
        f_ref = max(history[-memory:])
        a = 1.0
        while True:
            trial = _project(u + a * d, lo, hi)
            f_trial = f(trial)
            if f_trial <= f_ref + armijo * a * gd:
                break
            a_new = -0.5 * a * a * gd / (f_trial - fu - a * gd) if f_trial - fu - a * gd > 0 else 0.5 * a
            a = a_new if 0.1 * a <= a_new <= 0.9 * a else 0.5 * a
            if a < 1e-14:
                break
        if a < 1e-14:
            message = "line search failed"
            break
        g_new = _fd_gradient(p, trial, opts.fd_step)
        s, y = trial - u, g_new - g
        sy = float(np.sum(s * y))
        lam = lam_max if sy <= 0 else min(max(float(np.sum(s * s)) / sy, lam_min), lam_max)
        u, fu, g = trial, f_trial, g_new
        res = projected_gradient_residual(u, g, lo, hi)
        history.append(fu)
        if fu < best[0] - 1e-13 * (1.0 + abs(best[0])):
            stall = 0
        else:
            stall += 1
        if fu < best[0] or (fu == best[0] and res < best[2]):
            best = (fu, u, res)
        if stall >= 25:
            message = "no progress"
            break
    if res <= opts.tol:
        return u, it, res, True, message
    # nonmonotone search may end away from the best point seen
    return best[1], it, best[2], False, message


def solve(p: HorizonProblem, warm_start=None, options: SolverOptions | None = None) -> OpenLoopSolution:
    """Minimise the truncated cost over box-constrained control sequences.

    Never raises on non-convergence: the returned ``status.converged`` is
    ``False`` and the caller decides.
    """
    opts = options or SolverOptions()
    sys = p.system
    shape = (p.N, sys.control_dim)
    if warm_start is None:
        u0 = _project(np.zeros(shape), sys.lower, sys.upper)
    else:
        u0 = np.asarray(warm_start, dtype=float).reshape(shape)
    starts = [u0]
    if opts.restarts:
        rng = np.random.default_rng(opts.seed)
        span = np.where(np.isfinite(sys.upper - sys.lower), sys.upper - sys.lower, 1.0)
        for _ in range(opts.restarts):
            starts.append(u0 + opts.restart_scale * span * rng.standard_normal(shape))
    best = None
    total_it = 0
    for start in starts:
        u, it, res, ok, msg = _spg(p, start, opts)
        total_it += it
        J, states, costs = evaluate_cost(p, u)
        if best is None or J < best[0] - 1e-12 * (1.0 + abs(J)):
            best = (J, u, states, costs, res, ok, msg)
    J, u, states, costs, res, ok, msg = best
    status = SolverStatus(ok, total_it, res, msg)
    return _freeze(OpenLoopSolution(u, states, costs, J, p.t0, status, optimal=ok))


def _freeze(sol: OpenLoopSolution) -> OpenLoopSolution:
    for arr in (sol.controls, sol.states, sol.stage_costs):
        arr.flags.writeable = False
    return sol


def solve_oracle(p: HorizonProblem, grid: ControlGrid, budget: int = 10**7) -> OpenLoopSolution:
    """Exact minimiser over all grid-valued control sequences.

    Enumerates the control tree level by level, so shared prefixes are rolled
    out once. Ties go to the lexicographically smallest sequence in grid order.
    """
    cand = grid.candidates()
    G = len(cand)
    required = G**p.N
    if required > budget:
        raise OracleBudgetError(f"oracle needs {required} rollouts, budget is {budget}")
    sys = p.system
    slack = 1e-12 * (1.0 + np.maximum(np.abs(sys.lower), np.abs(sys.upper)))
    if np.any(cand < sys.lower - slack) or np.any(cand > sys.upper + slack):
        raise ValueError("control grid leaves the control bounds")
    x = p.x0[None, :]
    J = np.zeros(1)
    for k in range(p.N):
        B = x.shape[0]
        xs = np.repeat(x, G, axis=0)  # prefix-major, child-minor: lexicographic order
        us = np.tile(cand, (B, 1))
        seg = sys.transition(xs, us)
        t0, t1 = _stage_times(p, k)
        J = np.repeat(J, G) + p.cost(seg, us, t0, t1)
        x = seg[-1]
    best = int(np.argmin(J))
    digits = []
    for _ in range(p.N):
        best, d = divmod(best, G)
        digits.append(d)
    u = cand[digits[::-1]]
    val, states, costs = evaluate_cost(p, u)
    status = SolverStatus(True, required, 0.0, "exhaustive")
    return _freeze(OpenLoopSolution(u.copy(), states, costs, val, p.t0, status, optimal=True))


def tail_value(sol: OpenLoopSolution, k: int) -> float:
    """Cost of the optimal tail from stage ``k``; equals ``V_{N-k}`` at ``states[k]``.

    The identity relies on optimality of ``sol``; check ``sol.optimal``.
    """
    if not 0 <= k <= sol.N:
        raise IndexError(f"tail index {k} outside [0, {sol.N}]")
    return _total(sol.stage_costs[k:])


def shift_warm_start(sol: OpenLoopSolution, shift: int, new_length: int, padding=None) -> np.ndarray:
    """Drop ``shift`` controls and pad to ``new_length`` (default: repeat the last one)."""
    if new_length < 1:
        raise ValueError(f"new_length must be >= 1, got {new_length}")
    if not 0 <= shift <= sol.N:
        raise ValueError(f"shift {shift} outside [0, {sol.N}]")
    tail = np.asarray(sol.controls[shift:], dtype=float)[:new_length]
    if len(tail) == new_length:
        return tail.copy()
    if padding is None:
        pad_row = sol.controls[-1]
    else:
        pad_row = np.broadcast_to(np.asarray(padding, dtype=float), (sol.controls.shape[1],))
    pad = np.repeat(np.asarray(pad_row, dtype=float)[None, :], new_length - len(tail), axis=0)
    return np.concatenate([tail, pad]) if len(tail) else pad


@dataclass(frozen=True, eq=False)
class OCPSolver:
    """Horizon problems of one system/cost pair, solved with fixed options.

    With ``grid`` set, every solve is the exhaustive oracle instead.
    """

    system: Any
    cost: Any
    options: SolverOptions = field(default_factory=SolverOptions)
    grid: ControlGrid | None = None

    def problem(self, x0, N: int, t0: float = 0.0) -> HorizonProblem:
        return HorizonProblem(self.system, self.cost, x0, N, t0)

    def __call__(self, x0, N: int, t0: float = 0.0, warm_start=None) -> OpenLoopSolution:
        p = self.problem(x0, N, t0)
        if self.grid is not None:
            return solve_oracle(p, self.grid, self.options.oracle_budget)
        return solve(p, warm_start, self.options)
