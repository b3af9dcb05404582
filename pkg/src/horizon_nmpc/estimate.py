"""Local suboptimality degrees and the horizon maps built on them.

Two estimators share one interface: the a posteriori one compares the value
function at a state and at its predicted successor; the a priori one bounds
value functions by stage costs along the open-loop tail (the constant
``gamma``) and turns ``gamma`` into a degree via ``alpha_from_gamma``.

Practical stability is handled by an ``epsilon`` threshold: steps whose
stage cost is at most ``epsilon`` are skipped in the Lyapunov accounting and
their ratios are left out of ``gamma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .ocp import OpenLoopSolution, shift_warm_start, tail_value


class Method(str, Enum):
    APOSTERIORI = "aposteriori"
    APRIORI = "apriori"


class StepTooLargeError(ValueError):
    """The monotone horizon map was asked for an unreachable improvement."""


@dataclass(frozen=True)
class AlphaEstimate:
    alpha: float | None  # None when the step is a practical skip
    method: Method
    epsilon: float
    N: int
    N_hat: int = 2
    gamma: float | None = None
    practical_skip: bool = False

    def __post_init__(self):
        if self.alpha is not None and self.alpha > 1:
            raise ValueError(f"alpha must not exceed 1, got {self.alpha}")
        if self.method is Method.APRIORI and not self.practical_skip:
            if self.gamma is None:
                raise ValueError("a priori estimate needs gamma")
            if not self.N >= self.N_hat >= 2:
                raise ValueError(f"a priori estimate needs N >= N_hat >= 2, got N={self.N}, N_hat={self.N_hat}")

    def certifies(self, alpha_bar: float) -> bool:
        return self.practical_skip or (self.alpha is not None and self.alpha >= alpha_bar)


@dataclass(frozen=True)
class GammaData:
    gamma: float
    N: int
    N_hat: int
    binding_index: int | None  # 0: first family; k > N_hat: second family at k
    aux_solves: int = 0
    ratios: tuple[tuple[int, float], ...] = ()
    aux_converged: bool = True

    @property
    def finite(self) -> bool:
        return math.isfinite(self.gamma)


def alpha_aposteriori(V_now: float, V_next: float, stage: float, epsilon: float = 0.0, N: int = 0, N_hat: int = 2):
    """Largest alpha <= 1 with ``V_now >= V_next + alpha * stage``."""
    if stage <= epsilon:
        return AlphaEstimate(None, Method.APOSTERIORI, epsilon, N, N_hat, practical_skip=True)
    alpha = min(1.0, (V_now - V_next) / stage)
    return AlphaEstimate(alpha, Method.APOSTERIORI, epsilon, N, N_hat)


def _check_horizons(N: int, N_hat: int):
    if not N >= N_hat >= 2:
        raise ValueError(f"need N >= N_hat >= 2, got N={N}, N_hat={N_hat}")


def alpha_from_gamma(gamma: float, N: int, N_hat: int) -> float:
    """``((g+1)^d - g^(d+2)) / (g+1)^d`` with ``d = N - N_hat``."""
    _check_horizons(N, N_hat)
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    if math.isinf(gamma):
        return -math.inf
    d = N - N_hat
    return 1.0 - gamma * gamma * (gamma / (gamma + 1.0)) ** d


def _gamma_map_excess(x: float, d: int) -> float:
    # x^(d+2) / (x+1)^d, i.e. 1 - Gamma(x)
    return x * x * (x / (x + 1.0)) ** d


def gamma_from_alpha(alpha: float, N: int, N_hat: int, tol: float = 1e-12, max_iter: int = 100) -> float:
    """Invert ``alpha_from_gamma`` for fixed ``N - N_hat``.

    Newton's method from ``gamma = 1``; any iterate leaving the current
    bracket is replaced by the bracket midpoint.
    """
    _check_horizons(N, N_hat)
    if alpha > 1:
        raise ValueError(f"alpha must not exceed 1, got {alpha}")
    if alpha == 1:
        return 0.0
    d = N - N_hat
    target = 1.0 - alpha
    lo, hi = 0.0, 1.0
    while _gamma_map_excess(hi, d) < target:
        lo, hi = hi, 2.0 * hi
    g = 1.0
    for _ in range(max_iter):
        excess = _gamma_map_excess(g, d)
        resid = excess - target
        if abs(resid) <= tol:
            break
        if resid > 0:
            hi = g
        else:
            lo = g
        slope = (g / (g + 1.0)) ** (d + 1) * (d + 2 + 2.0 * g)
        step = g - resid / slope if slope > 0 else math.nan
        g = step if lo < step < hi else 0.5 * (lo + hi)
        if hi - lo <= 4 * math.ulp(hi):
            break
    return g


def minimal_gamma(
    sol: OpenLoopSolution,
    N_hat: int,
    aux_solver,
    epsilon: float = 0.0,
    gamma_min: float = 1e-9,
) -> GammaData:
    """Smallest gamma for which both inequality families hold along ``sol``.

    ``aux_solver(x0, N, t0, warm_start)`` supplies the short-horizon feedback
    values ``mu_{j-1}`` needed by the first family. Tail values come from the
    principle of optimality, so ``sol`` must be optimal.
    """
    N = sol.N
    _check_horizons(N, N_hat)
    T = aux_solver.system.T
    ratios: list[tuple[int, float]] = []

    def ratio(tag: int, value: float, stage: float):
        # inside the practical region both sides are negligible; a tiny stage
        # under a value above the threshold still constrains gamma
        if stage <= epsilon and value <= epsilon:
            return
        ratios.append((tag, math.inf if stage == 0.0 else value / stage))

    aux_stage = []
    converged = True
    for j in range(2, N_hat + 1):
        idx = N - j
        warm = shift_warm_start(sol, idx, j - 1)
        aux = aux_solver(sol.states[idx], j - 1, sol.t0 + idx * T, warm_start=warm)
        aux_stage.append(float(aux.stage_costs[0]))
        converged = converged and aux.status.converged
    ratio(0, tail_value(sol, N - N_hat), max(aux_stage))
    for k in range(N_hat + 1, N + 1):
        ratio(k, tail_value(sol, N - k), float(sol.stage_costs[N - k]))

    if not ratios:
        return GammaData(gamma_min, N, N_hat, None, N_hat - 1, (), converged)
    tag, worst = max(ratios, key=lambda r: r[1])
    gamma = max(worst - 1.0, gamma_min)
    return GammaData(gamma, N, N_hat, tag, N_hat - 1, tuple(ratios), converged)


def phi_map(N: int, gamma: float, alpha_bar: float, N_hat: int) -> int:
    """Smallest horizon the a priori bound certifies for ``alpha_bar`` at this gamma."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if not 0 < alpha_bar < 1:
        raise ValueError(f"alpha_bar must lie in (0, 1), got {alpha_bar}")
    raw = N_hat + (2.0 * math.log(gamma) - math.log(1.0 - alpha_bar)) / (math.log(gamma + 1.0) - math.log(gamma))
    return math.ceil(raw)


def psi_map(N: int, gamma: float, delta: float, vartheta: float, N_hat: int) -> int:
    """Next horizon of the monotone iteration; never below ``N + 1``."""
    if not gamma > 0 or not vartheta > 0:
        raise ValueError("gamma and vartheta must be positive")
    if delta < 0:
        raise ValueError(f"delta must be nonnegative, got {delta}")
    arg = (gamma / (gamma + 1.0)) ** (N - N_hat) - delta / gamma**2
    if arg <= 0:
        raise StepTooLargeError(f"delta={delta} too large for gamma={gamma} at N={N}")
    vg = vartheta * gamma
    raw = N_hat + (math.log(arg) - 2.0 * math.log(vartheta)) / (math.log(vg) - math.log(vg + 1.0))
    return max(math.ceil(raw), N + 1)


def update_vartheta(current: float, gamma_prev: float, gamma_new: float) -> float:
    if not gamma_prev > 0:
        raise ValueError("gamma_prev must be positive")
    return max(current, gamma_new / gamma_prev)


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Assessment:
    """Result of estimating alpha for one open-loop solution."""

    estimate: AlphaEstimate
    solves: int
    successor: OpenLoopSolution | None = None
    gamma_data: GammaData | None = None
    gamma: float | None = None
    converged: bool = True

    @property
    def alpha(self) -> float | None:
        return self.estimate.alpha

    @property
    def V_next(self) -> float | None:
        return None if self.successor is None else self.successor.value


@dataclass(frozen=True)
class APosterioriEstimator:
    """Needs one extra solve at the predicted successor with the same horizon."""

    epsilon: float = 1e-5
    N_hat: int = 2
    gamma_min: float = 1e-9
    method = Method.APOSTERIORI

    def __call__(self, solver, sol: OpenLoopSolution) -> Assessment:
        N = sol.N
        succ = solver(sol.states[1], N, sol.t0 + solver.system.T, warm_start=shift_warm_start(sol, 1, N))
        est = alpha_aposteriori(sol.value, succ.value, float(sol.stage_costs[0]), self.epsilon, N, self.N_hat)
        gamma = None
        if est.alpha is not None and N >= self.N_hat:
            gamma = max(gamma_from_alpha(est.alpha, N, self.N_hat), self.gamma_min)
        return Assessment(est, 1, succ, None, gamma, succ.status.converged)


@dataclass(frozen=True)
class APrioriEstimator:
    """Needs ``N_hat - 1`` short-horizon solves for the first inequality family."""

    epsilon: float = 1e-5
    N_hat: int = 2
    gamma_min: float = 1e-9
    method = Method.APRIORI

    def __call__(self, solver, sol: OpenLoopSolution) -> Assessment:
        N = sol.N
        if sol.stage_costs[0] <= self.epsilon:
            est = AlphaEstimate(None, Method.APRIORI, self.epsilon, N, self.N_hat, practical_skip=True)
            return Assessment(est, 0)
        gd = minimal_gamma(sol, self.N_hat, solver, self.epsilon, self.gamma_min)
        alpha = alpha_from_gamma(gd.gamma, N, self.N_hat)
        est = AlphaEstimate(alpha, Method.APRIORI, self.epsilon, N, self.N_hat, gamma=gd.gamma)
        return Assessment(est, gd.aux_solves, None, gd, gd.gamma, gd.aux_converged)
