"""Horizon adaptation: shortening by tail replay and three prolongation rules.

One sampling instant works on ``Candidate`` objects (an open-loop solution at
some horizon plus its alpha assessment). ``adapt_step`` is the pure inner loop;
``AdaptiveController`` adds the state carried between instants: the stored
open-loop tail being replayed and the next initial horizon guess.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .estimate import (
    AlphaEstimate,
    APosterioriEstimator,
    APrioriEstimator,
    Assessment,
    Method,
    StepTooLargeError,
    alpha_aposteriori,
    alpha_from_gamma,
    gamma_from_alpha,
    minimal_gamma,
    phi_map,
    psi_map,
    update_vartheta,
)
from .ocp import OpenLoopSolution, shift_warm_start, tail_value

log = logging.getLogger(__name__)


class Strategy(str, Enum):
    SIMPLE = "simple"
    FIXED_POINT = "fixedpoint"
    MONOTONE = "monotone"


class Status(str, Enum):
    CERTIFIED = "certified"
    PRACTICAL_SKIP = "practical_skip"
    CAP_HIT = "cap_hit"


@dataclass(frozen=True)
class AdaptationConfig:
    alpha_bar: float = 0.5
    estimate_method: Method = Method.APOSTERIORI
    prolong_strategy: Strategy = Strategy.SIMPLE
    shorten_enabled: bool = True
    N_hat: int = 2
    sigma: int = 5
    N_min: int = 2
    N_max: int = 30
    epsilon: float = 1e-5
    gamma_min: float = 1e-9
    accept_unconverged: bool = False

    def __post_init__(self):
        object.__setattr__(self, "estimate_method", Method(self.estimate_method))
        object.__setattr__(self, "prolong_strategy", Strategy(self.prolong_strategy))
        if not 0 < self.alpha_bar < 1:
            raise ValueError(f"alpha_bar must lie in (0, 1), got {self.alpha_bar}")
        if not self.N_min >= self.N_hat >= 2:
            raise ValueError(f"need N_min >= N_hat >= 2, got N_min={self.N_min}, N_hat={self.N_hat}")
        if self.N_max < self.N_min:
            raise ValueError(f"N_max ({self.N_max}) below N_min ({self.N_min})")
        if self.sigma < 1:
            raise ValueError(f"sigma must be >= 1, got {self.sigma}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    def estimator(self):
        cls = APosterioriEstimator if self.estimate_method is Method.APOSTERIORI else APrioriEstimator
        return cls(self.epsilon, self.N_hat, self.gamma_min)

    def clamp(self, N: int) -> int:
        return min(max(int(N), self.N_min), self.N_max)


@dataclass(frozen=True)
class Candidate:
    """An open-loop solution at one horizon together with its alpha assessment."""

    sol: OpenLoopSolution
    assessment: Assessment
    solves: int

    @property
    def N(self) -> int:
        return self.sol.N

    @property
    def alpha(self) -> float | None:
        return self.assessment.alpha

    @property
    def gamma(self) -> float | None:
        return self.assessment.gamma

    @property
    def practical_skip(self) -> bool:
        return self.assessment.estimate.practical_skip

    @property
    def converged(self) -> bool:
        return self.sol.status.converged and self.assessment.converged

    def certified(self, cfg: AdaptationConfig) -> bool:
        return self.assessment.estimate.certifies(cfg.alpha_bar)


def evaluate_horizon(x, t: float, N: int, solver, estimator, warm_start=None) -> Candidate:
    """Solve at horizon ``N`` from ``x`` and assess the result."""
    sol = solver(x, N, t, warm_start=warm_start)
    a = estimator(solver, sol)
    return Candidate(sol, a, 1 + a.solves)


@dataclass(frozen=True)
class StoredTail:
    """Open-loop tail replayed on the instants after a successful shortening."""

    source: OpenLoopSolution
    k_bar: int
    alphas: tuple[float | None, ...]  # index k = 0..k_bar
    values: tuple[float, ...]
    next_values: tuple[float | None, ...]

    @property
    def horizons(self) -> tuple[int, ...]:
        return tuple(self.source.N - k for k in range(self.k_bar + 1))

    def control(self, k: int) -> np.ndarray:
        return self.source.controls[k]


@dataclass(frozen=True)
class Shortening:
    k_bar: int | None
    tail: StoredTail | None
    solves: int


def _usable(sol: OpenLoopSolution, cfg: AdaptationConfig) -> bool:
    return sol.status.converged or cfg.accept_unconverged


def shorten_aposteriori(sol: OpenLoopSolution, cfg: AdaptationConfig, solver, first: Assessment | None = None) -> Shortening:
    """Largest ``k_bar`` such that every tail step ``k <= k_bar`` keeps the relaxed Lyapunov decrease.

    ``first`` may carry the already computed assessment of ``k = 0``.
    """
    N = sol.N
    T = solver.system.T
    k_limit = N - cfg.N_min - 1
    alphas, values, nexts = [], [], []
    solves = 0
    for k in range(k_limit + 1):
        if k == 0 and first is not None and first.successor is not None:
            succ, est = first.successor, first.estimate
        else:
            succ = solver(sol.states[k + 1], N - k, sol.t0 + (k + 1) * T, warm_start=shift_warm_start(sol, k + 1, N - k))
            solves += 1
            est = alpha_aposteriori(tail_value(sol, k), succ.value, float(sol.stage_costs[k]), cfg.epsilon, N - k, cfg.N_hat)
        if not _usable(succ, cfg) or not est.certifies(cfg.alpha_bar):
            break
        alphas.append(est.alpha)
        values.append(tail_value(sol, k))
        nexts.append(succ.value)
    if not alphas:
        return Shortening(None, None, solves)
    k_bar = len(alphas) - 1
    return Shortening(k_bar, StoredTail(sol, k_bar, tuple(alphas), tuple(values), tuple(nexts)), solves)


def shorten_apriori(sol: OpenLoopSolution, cfg: AdaptationConfig, solver, gamma_data=None) -> Shortening:
    """Largest ``k_bar`` with ``gamma_n`` below the tolerable gamma of every shortened horizon."""
    N = sol.N
    solves = 0
    if gamma_data is None:
        gamma_data = minimal_gamma(sol, cfg.N_hat, solver, cfg.epsilon, cfg.gamma_min)
        solves += gamma_data.aux_solves
    if not gamma_data.finite or not (gamma_data.aux_converged or cfg.accept_unconverged):
        return Shortening(None, None, solves)
    gamma = gamma_data.gamma
    k_limit = N - max(cfg.N_hat + 2, cfg.N_min + 1)
    alphas, values = [], []
    for k in range(k_limit + 1):
        M = N - k
        if sol.stage_costs[k] <= cfg.epsilon:
            alphas.append(None)
        elif gamma < gamma_from_alpha(cfg.alpha_bar, M, cfg.N_hat):
            alphas.append(alpha_from_gamma(gamma, M, cfg.N_hat))
        else:
            break
        values.append(tail_value(sol, k))
    if not alphas:
        return Shortening(None, None, solves)
    k_bar = len(alphas) - 1
    return Shortening(k_bar, StoredTail(sol, k_bar, tuple(alphas), tuple(values), (None,) * len(alphas)), solves)


def shorten(cand: Candidate, cfg: AdaptationConfig, solver) -> Shortening:
    if cfg.estimate_method is Method.APOSTERIORI:
        return shorten_aposteriori(cand.sol, cfg, solver, first=cand.assessment)
    if cand.assessment.gamma_data is None and cand.practical_skip:
        return shorten_apriori(cand.sol, cfg, solver)
    return shorten_apriori(cand.sol, cfg, solver, gamma_data=cand.assessment.gamma_data)


@dataclass(frozen=True)
class AdaptationOutcome:
    N_selected: int
    alpha_achieved: float | None
    inner_iterations: int
    ocp_solves: int
    status: Status
    candidate: Candidate | None
    horizons_tried: tuple[int, ...] = ()
    unconverged: tuple[int, ...] = ()
    stored_tail: StoredTail | None = None
    k_bar: int | None = None
    replay: bool = False
    replay_index: int = 0
    next_guess: int | None = None
    control_override: np.ndarray | None = field(default=None, repr=False)

    @property
    def control(self) -> np.ndarray:
        if self.control_override is not None:
            return self.control_override
        return self.candidate.sol.controls[0]

    @property
    def value(self) -> float:
        if self.replay:
            return self.stored_tail.values[self.replay_index]
        return self.candidate.sol.value

    @property
    def V_next(self) -> float | None:
        if self.replay:
            return self.stored_tail.next_values[self.replay_index]
        return self.candidate.assessment.V_next

    @property
    def certified(self) -> bool:
        return self.status is not Status.CAP_HIT


def _outcome(best: Candidate, cfg, iterations, solves, tried, unconverged) -> AdaptationOutcome:
    if best.practical_skip:
        status = Status.PRACTICAL_SKIP
    elif best.certified(cfg):
        status = Status.CERTIFIED
    else:
        status = Status.CAP_HIT
    return AdaptationOutcome(best.N, best.alpha, iterations, solves, status, best, tuple(tried), tuple(unconverged))


def _start(x, t, N_start, solver, estimator, initial, warm_start):
    if initial is not None:
        return initial
    return evaluate_horizon(x, t, N_start, solver, estimator, warm_start)


def prolong_simple(x, t, N_start, cfg: AdaptationConfig, solver, estimator=None, initial: Candidate | None = None, warm_start=None):
    """Increase the horizon one step at a time until alpha reaches ``alpha_bar``."""
    estimator = estimator or cfg.estimator()
    c = _start(x, t, N_start, solver, estimator, initial, warm_start)
    solves, tried = c.solves, [c.N]
    unconverged = [] if c.converged else [c.N]
    it = 0
    while not c.certified(cfg) and c.N < cfg.N_max:
        N = c.N + 1
        c = evaluate_horizon(x, t, N, solver, estimator, shift_warm_start(c.sol, 0, N))
        it += 1
        solves += c.solves
        tried.append(N)
        if not c.converged:
            unconverged.append(N)
    return _outcome(c, cfg, it, solves, tried, unconverged)


def _gamma_of(c: Candidate, cfg: AdaptationConfig) -> float:
    g = c.gamma
    if g is None:
        return math.nan
    return max(g, cfg.gamma_min)


def prolong_fixed_point(x, t, N_start, cfg: AdaptationConfig, solver, estimator=None, initial: Candidate | None = None, warm_start=None):
    """Iterate ``N <- Phi(N)`` with steps capped by ``sigma`` until a fixed point.

    A revisited horizon ends the iteration (cycle); the smallest certified
    member of the cycle is returned, or else the smallest certified horizon
    seen at all. ``inner_iterations`` counts evaluations of ``Phi``.
    """
    estimator = estimator or cfg.estimator()
    c = _start(x, t, N_start, solver, estimator, initial, warm_start)
    visited = {c.N: c}
    order = [c.N]
    solves = c.solves
    unconverged = [] if c.converged else [c.N]
    it = 0
    cycle: list[int] | None = None
    while True:
        if c.practical_skip:
            break
        it += 1
        gamma = _gamma_of(c, cfg)
        N = c.N
        if math.isnan(gamma):
            target = N + 1
        elif math.isinf(gamma):
            target = N + cfg.sigma
        else:
            target = phi_map(N, gamma, cfg.alpha_bar, cfg.N_hat)
        if target == N and c.certified(cfg):
            break
        if target <= N and not c.certified(cfg):
            # rounding left Phi at or below N without certification: force progress
            target = N + 1
        nxt = cfg.clamp(min(max(target, N - cfg.sigma), N + cfg.sigma))
        if nxt == N:
            break
        if nxt in visited:
            cycle = order[order.index(nxt):]
            break
        c = evaluate_horizon(x, t, nxt, solver, estimator, shift_warm_start(c.sol, 0, nxt))
        solves += c.solves
        visited[nxt] = c
        order.append(nxt)
        if not c.converged:
            unconverged.append(nxt)
    best = c
    if not (c.certified(cfg) and cycle is None):
        pool = cycle or order
        certified = sorted(n for n in pool if visited[n].certified(cfg))
        if not certified and cycle is not None:
            certified = sorted(n for n in order if visited[n].certified(cfg))
        if certified:
            best = visited[certified[0]]
    return _outcome(best, cfg, it, solves, order, unconverged)


def prolong_monotone(x, t, N_start, cfg: AdaptationConfig, solver, estimator=None, initial: Candidate | None = None, warm_start=None):
    """Strictly increasing horizons driven by the monotone map ``Psi``."""
    estimator = estimator or cfg.estimator()
    c = _start(x, t, N_start, solver, estimator, initial, warm_start)
    solves, tried = c.solves, [c.N]
    unconverged = [] if c.converged else [c.N]
    vartheta = 1.0
    it = 0
    while not c.certified(cfg) and c.N < cfg.N_max:
        N = c.N
        gamma = _gamma_of(c, cfg)
        nxt = None
        if math.isfinite(gamma) and c.alpha is not None:
            delta = cfg.alpha_bar - c.alpha
            for _ in range(4):
                try:
                    nxt = psi_map(N, gamma, delta, vartheta, cfg.N_hat)
                    break
                except StepTooLargeError:
                    delta *= 0.5
        if nxt is None:
            nxt = N + 1
        nxt = min(max(nxt, N + 1), N + cfg.sigma, cfg.N_max)
        new = evaluate_horizon(x, t, nxt, solver, estimator, shift_warm_start(c.sol, 0, nxt))
        it += 1
        solves += new.solves
        tried.append(nxt)
        if not new.converged:
            unconverged.append(nxt)
        new_gamma = _gamma_of(new, cfg)
        if math.isfinite(gamma) and math.isfinite(new_gamma):
            vartheta = update_vartheta(vartheta, gamma, new_gamma)
        c = new
    return _outcome(c, cfg, it, solves, tried, unconverged)


PROLONGATION = {
    Strategy.SIMPLE: prolong_simple,
    Strategy.FIXED_POINT: prolong_fixed_point,
    Strategy.MONOTONE: prolong_monotone,
}


def adapt_step(x, t: float, N_prev: int, cfg: AdaptationConfig, solver, estimator=None, warm_start=None) -> AdaptationOutcome:
    """One pass of the adaptation loop at a new measurement ``x``.

    Certified at ``N_prev``: try to shorten. Otherwise prolong with the
    configured strategy, then try to shorten the certified result.
    """
    estimator = estimator or cfg.estimator()
    N_prev = cfg.clamp(N_prev)
    c = evaluate_horizon(x, t, N_prev, solver, estimator, warm_start)
    if c.certified(cfg):
        out = _outcome(c, cfg, 0, c.solves, [c.N], [] if c.converged else [c.N])
    else:
        out = PROLONGATION[cfg.prolong_strategy](x, t, N_prev, cfg, solver, estimator, initial=c)
    if out.status is Status.CAP_HIT:
        return replace(out, next_guess=out.N_selected)
    best = out.candidate
    next_guess = out.N_selected
    if cfg.shorten_enabled:
        sh = shorten(best, cfg, solver)
        out = replace(out, ocp_solves=out.ocp_solves + sh.solves, k_bar=sh.k_bar)
        if sh.k_bar is not None:
            next_guess = out.N_selected - sh.k_bar - 1
            if sh.k_bar >= 1:
                out = replace(out, stored_tail=sh.tail)
    if out.k_bar is None and cfg.prolong_strategy is Strategy.FIXED_POINT:
        g = _gamma_of(best, cfg)
        if math.isfinite(g):
            next_guess = phi_map(best.N, g, cfg.alpha_bar, cfg.N_hat)
    return replace(out, next_guess=cfg.clamp(next_guess))


class AdaptiveController:
    """Carries the replay window and the horizon guess between sampling instants."""

    def __init__(self, cfg: AdaptationConfig, solver, N0: int, estimator=None):
        self.cfg = cfg
        self.solver = solver
        self.estimator = estimator or cfg.estimator()
        self.N_guess = cfg.clamp(N0)
        self._tail: StoredTail | None = None
        self._tail_k = 0
        self._tail_outcome: AdaptationOutcome | None = None
        self._warm = None

    @property
    def replaying(self) -> bool:
        return self._tail is not None

    def step(self, x, t: float) -> AdaptationOutcome:
        if self._tail is not None:
            return self._replay()
        out = adapt_step(x, t, self.N_guess, self.cfg, self.solver, self.estimator, self._warm_start(self.N_guess))
        if out.candidate is not None:
            self._warm = out.candidate.sol
        if out.stored_tail is not None:
            self._tail, self._tail_k, self._tail_outcome = out.stored_tail, 0, out
        self.N_guess = out.next_guess
        return out

    def _warm_start(self, N: int):
        if self._warm is None:
            return None
        return shift_warm_start(self._warm, 1, N)

    def _replay(self) -> AdaptationOutcome:
        tail = self._tail
        self._tail_k += 1
        k = self._tail_k
        alpha = tail.alphas[k]
        status = Status.PRACTICAL_SKIP if alpha is None else Status.CERTIFIED
        out = AdaptationOutcome(
            N_selected=tail.source.N - k,
            alpha_achieved=alpha,
            inner_iterations=0,
            ocp_solves=0,
            status=status,
            candidate=None,
            horizons_tried=(),
            stored_tail=tail,
            k_bar=tail.k_bar,
            replay=True,
            replay_index=k,
            control_override=tail.control(k),
        )
        if k == tail.k_bar:
            self._tail = None
            self._warm = _tail_remainder(tail.source, k)
        return out


def _tail_remainder(sol: OpenLoopSolution, k: int) -> OpenLoopSolution:
    # warm start for the instant after the window: the unused part of the tail
    return replace(sol, controls=sol.controls[k:], states=sol.states[k:], stage_costs=sol.stage_costs[k:])
