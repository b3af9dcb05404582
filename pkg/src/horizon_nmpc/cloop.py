"""Closed-loop simulation with horizon adaptation, trace statistics and the
closed-loop suboptimality report."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adapt import AdaptationConfig, AdaptiveController, Status
from .ocp import shift_warm_start

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepRecord:
    n: int
    t: float
    x: np.ndarray
    u: np.ndarray
    N: int
    alpha: float | None  # None marks a practical skip
    V: float
    l: float
    inner_iterations: int
    ocp_solves: int
    wall_time: float
    status: Status
    replay: bool = False
    V_next: float | None = None  # V_N at the predicted successor, when the estimator computed it
    horizons_tried: tuple[int, ...] = ()

    @property
    def practical_skip(self) -> bool:
        return self.alpha is None


@dataclass(frozen=True)
class ClosedLoopTrace:
    steps: tuple[StepRecord, ...]
    final_state: np.ndarray
    config: AdaptationConfig
    T: float
    t0: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def N_star(self) -> int:
        return max(s.N for s in self.steps)

    @property
    def states(self) -> np.ndarray:
        return np.array([s.x for s in self.steps] + [self.final_state])

    @property
    def horizons(self) -> np.ndarray:
        return np.array([s.N for s in self.steps], dtype=int)

    def __len__(self):
        return len(self.steps)


class CapHitError(RuntimeError):
    """The horizon cap was reached without certification; ``trace`` holds the run so far."""

    def __init__(self, message: str, trace: ClosedLoopTrace):
        super().__init__(message)
        self.trace = trace


def run_closed_loop(
    system,
    cfg: AdaptationConfig,
    solver,
    x0,
    steps: int,
    N0: int,
    on_cap: str = "abort",
    t0: float = 0.0,
    estimator=None,
) -> ClosedLoopTrace:
    """Measure, adapt the horizon, apply the first control, repeat ``steps`` times.

    ``on_cap='abort'`` raises ``CapHitError`` at the first uncertified step;
    ``'continue'`` logs it and applies the best control found.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if on_cap not in ("abort", "continue"):
        raise ValueError(f"on_cap must be 'abort' or 'continue', got {on_cap!r}")
    ctrl = AdaptiveController(cfg, solver, N0, estimator)
    x = np.array(x0, dtype=float).reshape(system.state_dim)
    T = system.T
    records: list[StepRecord] = []
    for n in range(steps):
        t = t0 + n * T
        tic = time.perf_counter()
        out = ctrl.step(x, t)
        wall = time.perf_counter() - tic
        u = np.array(out.control, dtype=float)
        seg = system.transition(x, u)
        l = float(solver.cost(seg, u, t, t + T))
        rec = StepRecord(
            n, t, x, u, out.N_selected, out.alpha_achieved, float(out.value), l,
            out.inner_iterations, out.ocp_solves, wall, out.status, out.replay, out.V_next, out.horizons_tried,
        )
        records.append(rec)
        x = np.array(seg[-1])
        if out.status is Status.CAP_HIT:
            msg = f"step {n} (t={t:g}): horizon cap N_max={cfg.N_max} reached, alpha={out.alpha_achieved}"
            if on_cap == "abort":
                raise CapHitError(msg, ClosedLoopTrace(tuple(records), x, cfg, T, t0))
            log.warning("%s; continuing", msg)
    return ClosedLoopTrace(tuple(records), x, cfg, T, t0)


def run_fixed_horizon(
    system, cfg: AdaptationConfig, solver, x0, steps: int, N: int, t0: float = 0.0, on_cap: str = "continue"
) -> ClosedLoopTrace:
    """Standard receding horizon control with constant ``N`` (alphas still estimated).

    Steps whose alpha falls below ``alpha_bar`` are marked ``CAP_HIT``.
    """
    fixed = AdaptationConfig(
        alpha_bar=cfg.alpha_bar,
        estimate_method=cfg.estimate_method,
        prolong_strategy="simple",
        shorten_enabled=False,
        N_hat=min(cfg.N_hat, N),
        sigma=cfg.sigma,
        N_min=N,
        N_max=N,
        epsilon=cfg.epsilon,
        gamma_min=cfg.gamma_min,
        accept_unconverged=cfg.accept_unconverged,
    )
    return run_closed_loop(system, fixed, solver, x0, steps, N, on_cap=on_cap, t0=t0)


def trace_certified(trace: ClosedLoopTrace) -> bool:
    return all(s.status is not Status.CAP_HIT for s in trace.steps)


def smallest_certifying_fixed_horizon(system, cfg, solver, x0, steps, N_lo=2, N_hi=None, t0=0.0):
    """Smallest constant horizon whose run certifies ``alpha_bar`` at every step with ``l > epsilon``.

    Each candidate run stops at its first uncertified step. Returns
    ``(N, trace)`` or ``(None, None)`` if no horizon up to ``N_hi`` works.
    """
    N_hi = N_hi or cfg.N_max
    for N in range(max(N_lo, cfg.N_hat), N_hi + 1):
        try:
            tr = run_fixed_horizon(system, cfg, solver, x0, steps, N, t0, on_cap="abort")
        except CapHitError as exc:
            log.info("fixed N=%d fails at step %d", N, len(exc.trace) - 1)
            continue
        return N, tr
    return None, None


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Summary:
    time_max_ms: float
    time_min_ms: float
    time_mean_ms: float
    N_max: int
    N_min: int
    N_mean: float
    steps: int

    def row(self, label: str) -> str:
        return (
            f"{label:<24}{self.time_max_ms:>10.2f}{self.time_min_ms:>10.2f}{self.time_mean_ms:>10.2f}"
            f"{self.N_max:>6d}{self.N_min:>6d}{self.N_mean:>8.2f}"
        )

    @staticmethod
    def header() -> str:
        return f"{'':<24}{'t max':>10}{'t min':>10}{'t mean':>10}{'N max':>6}{'N min':>6}{'N mean':>8}"


def summarize(trace: ClosedLoopTrace) -> Summary:
    if not trace.steps:
        raise ValueError("empty trace")
    ms = np.array([s.wall_time for s in trace.steps]) * 1e3
    Ns = trace.horizons
    return Summary(float(ms.max()), float(ms.min()), float(ms.mean()), int(Ns.max()), int(Ns.min()), float(Ns.mean()), len(Ns))


# ---------------------------------------------------------------------------
# closed-loop suboptimality report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportInputs:
    """Quantities at one closed-loop step, all value functions at the longest horizon ``N*``.

    ``V_next`` is taken at the realised successor, ``V_alt`` at the successor
    reached under the ``N*`` feedback, whose stage cost is ``l_alt``.
    """

    n: int
    N: int
    l: float
    alpha: float
    V: float
    V_next: float
    V_alt: float
    l_alt: float


@dataclass(frozen=True)
class ReportRow:
    n: int
    N: int
    C_l: float
    C_alpha: float
    alpha_star: float
    excluded: str = ""

    @property
    def ratio(self) -> float:
        return self.C_alpha / self.C_l


@dataclass(frozen=True)
class SuboptimalityReport:
    rows: tuple[ReportRow, ...]
    alpha_bar: float
    N_star: int

    @property
    def used(self) -> tuple[ReportRow, ...]:
        return tuple(r for r in self.rows if not r.excluded)

    def _extreme(self, attr, fn):
        vals = [getattr(r, attr) for r in self.used]
        return fn(vals) if vals else math.nan

    @property
    def C_l_min(self):
        return self._extreme("C_l", min)

    @property
    def C_l_max(self):
        return self._extreme("C_l", max)

    @property
    def C_alpha_min(self):
        return self._extreme("C_alpha", min)

    @property
    def C_alpha_max(self):
        return self._extreme("C_alpha", max)

    @property
    def alpha_C(self) -> float:
        used = self.used
        if not used:
            return self.alpha_bar
        return self.alpha_bar * min(r.ratio for r in used)

    def ratio_stream(self) -> list[float]:
        """``alpha_bar * min_{j >= n} ratio_j`` for every reported ``n``."""
        out, running = [], math.inf
        for r in reversed(self.used):
            running = min(running, r.ratio)
            out.append(self.alpha_bar * running)
        return out[::-1]


def report_row(q: ReportInputs) -> ReportRow:
    """Tight constants for one step, from values at the longest horizon."""
    drop_alt = q.V - q.V_alt
    drop_real = q.V - q.V_next
    C_l = q.l * drop_alt / (q.l_alt * drop_real)
    alpha_star = min(1.0, drop_alt / q.l_alt)
    return ReportRow(q.n, q.N, C_l, alpha_star / q.alpha, alpha_star)


def report_from_inputs(inputs, alpha_bar: float, N_star: int) -> SuboptimalityReport:
    return SuboptimalityReport(tuple(report_row(q) for q in inputs), alpha_bar, N_star)


def _step_inputs(trace: ClosedLoopTrace, j: int, solver, accept_unconverged: bool):
    s = trace.steps[j]
    N_star = trace.N_star
    T = trace.T
    x_next = trace.steps[j + 1].x if j + 1 < len(trace.steps) else trace.final_state
    sol = solver(s.x, N_star, s.t)
    nxt = solver(x_next, N_star, s.t + T, warm_start=_shift(sol))
    alt = solver(sol.states[1], N_star, s.t + T, warm_start=_shift(sol))
    ok = all(v.status.converged for v in (sol, nxt, alt)) or accept_unconverged
    return ReportInputs(j, s.N, s.l, s.alpha, sol.value, nxt.value, alt.value, float(sol.stage_costs[0])), ok


def _shift(sol):
    return shift_warm_start(sol, 1, sol.N)


def report_suboptimality(trace: ClosedLoopTrace, solver, accept_unconverged: bool = False, workers: int = 1) -> SuboptimalityReport:
    """Per-step ``C_l``, ``C_alpha`` and the aggregated ``alpha_C``.

    Steps with ``l <= epsilon`` are left out. Steps that already run at ``N*``
    compare the controller with itself and get ``C_l = C_alpha = 1`` without
    solving. Every other step needs three solves at ``N*``.
    """
    cfg = trace.config
    N_star = trace.N_star
    rows: dict[int, ReportRow] = {}
    todo = []
    for j, s in enumerate(trace.steps):
        if s.l <= cfg.epsilon or s.alpha is None:
            continue
        if s.N == N_star:
            rows[j] = ReportRow(j, s.N, 1.0, 1.0, s.alpha)
        else:
            todo.append(j)

    def work(j):
        return j, *_step_inputs(trace, j, solver, accept_unconverged)

    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, todo))
    else:
        results = [work(j) for j in todo]
    for j, q, ok in results:
        if not ok:
            rows[j] = ReportRow(j, q.N, math.nan, math.nan, math.nan, excluded="unconverged")
            continue
        if q.l_alt <= 0 or q.V == q.V_next:
            rows[j] = ReportRow(j, q.N, math.nan, math.nan, math.nan, excluded="degenerate")
            continue
        rows[j] = report_row(q)
    return SuboptimalityReport(tuple(rows[j] for j in sorted(rows)), cfg.alpha_bar, N_star)


def lyapunov_margins(trace: ClosedLoopTrace, solver) -> list[tuple[int, float]]:
    """``V_N(x(n)) - V_N(x(n+1)) - alpha_bar * l_n`` for every step with ``l > epsilon``.

    Uses the successor value stored by the estimator when available, else one
    fresh solve at the realised successor with the same horizon.
    """
    cfg = trace.config
    out = []
    for j, s in enumerate(trace.steps):
        if s.l <= cfg.epsilon:
            continue
        x_next = trace.steps[j + 1].x if j + 1 < len(trace.steps) else trace.final_state
        V_next = s.V_next
        if V_next is None:
            V_next = solver(x_next, s.N, s.t + trace.T).value
        out.append((j, s.V - V_next - cfg.alpha_bar * s.l))
    return out

