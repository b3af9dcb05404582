import math
from dataclasses import replace

import numpy as np
import pytest

from horizon_nmpc.adapt import (
    AdaptationConfig,
    AdaptiveController,
    Status,
    Strategy,
    adapt_step,
    prolong_fixed_point,
    prolong_monotone,
    prolong_simple,
    shorten_aposteriori,
    shorten_apriori,
)
from horizon_nmpc.estimate import (
    AlphaEstimate,
    APosterioriEstimator,
    Assessment,
    GammaData,
    Method,
    alpha_from_gamma,
    gamma_from_alpha,
    phi_map,
)
from horizon_nmpc.model import scalar_linear
from horizon_nmpc.ocp import ControlGrid, OCPSolver


class TableEstimator:
    """Assessment from fixed tables instead of real value functions.

    ``gamma`` maps N to a gamma (or one constant); ``alpha`` maps N to an alpha,
    defaulting to the value implied by gamma.
    """

    method = Method.APOSTERIORI

    def __init__(self, gamma=1.0, alpha=None, solves=0):
        self.gamma, self.alpha, self.solves = gamma, alpha or {}, solves
        self.calls = []

    def __call__(self, solver, sol):
        N = sol.N
        self.calls.append(N)
        g = self.gamma(N) if callable(self.gamma) else self.gamma
        a = self.alpha.get(N, alpha_from_gamma(g, N, 2))
        est = AlphaEstimate(min(a, 1.0), Method.APOSTERIORI, 0.0, N)
        return Assessment(est, self.solves, None, None, g)


class SolveCounter:
    def __init__(self, solver):
        self.inner, self.count = solver, 0
        self.system, self.cost = solver.system, solver.cost

    def __call__(self, *args, **kwargs):
        self.count += 1
        return self.inner(*args, **kwargs)


@pytest.fixture
def scalar_solver():
    return OCPSolver(*scalar_linear(a=1.5, b=1.0, rho=1.0))


@pytest.fixture
def cfg():
    return AdaptationConfig(shorten_enabled=False)


X_CROSS = np.array([1.8])  # a posteriori alpha: 0.198, 0.350, 0.534 at N = 2, 3, 4


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(alpha_bar=1.0), dict(alpha_bar=0.0), dict(N_hat=1), dict(N_min=2, N_hat=3), dict(N_max=1), dict(sigma=0), dict(epsilon=-1)],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            AdaptationConfig(**kwargs)

    def test_strings_coerced(self):
        c = AdaptationConfig(estimate_method="apriori", prolong_strategy="monotone")
        assert c.estimate_method is Method.APRIORI and c.prolong_strategy is Strategy.MONOTONE

    def test_clamp(self):
        c = AdaptationConfig(N_min=3, N_hat=2, N_max=7)
        assert [c.clamp(n) for n in (1, 3, 5, 9)] == [3, 3, 5, 7]


class TestSimple:
    def test_already_certified(self, scalar_solver, cfg):
        out = prolong_simple(X_CROSS, 0.0, 4, cfg, scalar_solver)
        assert out.inner_iterations == 0 and out.N_selected == 4
        assert out.status is Status.CERTIFIED

    def test_crossing_two_steps_up(self, scalar_solver, cfg):
        out = prolong_simple(X_CROSS, 0.0, 2, cfg, scalar_solver)
        assert out.N_selected == 4 and out.inner_iterations == 2
        assert out.horizons_tried == (2, 3, 4)
        # one solve per candidate plus one successor solve per candidate
        assert out.ocp_solves == 1 + 3 + 2
        assert out.alpha_achieved >= 0.5

    def test_crossing_counts_without_estimator_solves(self, scalar_solver, cfg):
        inner = APosterioriEstimator()

        def free(solver, sol):
            return replace(inner(solver, sol), solves=0)

        out = prolong_simple(X_CROSS, 0.0, 2, cfg, scalar_solver, estimator=free)
        assert (out.inner_iterations, out.ocp_solves) == (2, 3)

    def test_crossing_confirmed_by_oracle(self, cfg):
        oracle = OCPSolver(*scalar_linear(a=1.5, b=1.0, rho=1.0), grid=ControlGrid.uniform(-1, 1, 21))
        out = prolong_simple(X_CROSS, 0.0, 2, cfg, oracle)
        assert out.N_selected == 4

    def test_cap_hit(self, scalar_solver):
        capped = AdaptationConfig(N_max=3, shorten_enabled=False)
        out = prolong_simple(X_CROSS, 0.0, 2, capped, scalar_solver)
        assert out.status is Status.CAP_HIT and not out.certified
        assert out.N_selected == 3 and out.alpha_achieved == pytest.approx(0.3501, abs=1e-4)

    def test_solve_count_matches_calls(self, scalar_solver, cfg):
        counted = SolveCounter(scalar_solver)
        out = prolong_simple(X_CROSS, 0.0, 2, cfg, counted)
        assert counted.count == out.ocp_solves


class TestFixedPoint:
    @pytest.mark.parametrize("N_start", range(2, 9))
    def test_constant_gamma_reaches_three(self, scalar_solver, cfg, N_start):
        est = TableEstimator(gamma=1.0)
        out = prolong_fixed_point(X_CROSS, 0.0, N_start, cfg, scalar_solver, est)
        assert out.N_selected == 3
        assert out.inner_iterations <= 2
        assert out.status is Status.CERTIFIED

    def test_start_at_fixed_point(self, scalar_solver, cfg):
        out = prolong_fixed_point(X_CROSS, 0.0, 3, cfg, scalar_solver, TableEstimator(gamma=1.0))
        assert out.inner_iterations == 1 and out.horizons_tried == (3,)

    def test_sigma_caps_each_step(self, scalar_solver, cfg):
        assert phi_map(2, 3.0, 0.5, 2) == 13
        out = prolong_fixed_point(X_CROSS, 0.0, 2, cfg, scalar_solver, TableEstimator(gamma=3.0))
        assert out.horizons_tried == (2, 7, 12, 13)
        assert out.N_selected == 13

    def test_cycle_returns_smallest_certified(self, scalar_solver, cfg):
        # Phi(4) = 6 and Phi(6) = 4: the 4/6 cycle has only 6 certified
        gammas = {4: gamma_from_alpha(0.5, 6, 2) * 0.999, 6: gamma_from_alpha(0.5, 4, 2) * 0.999}
        alphas = {4: 0.1, 6: 0.7}
        est = TableEstimator(gamma=lambda N: gammas[N], alpha=alphas)
        assert phi_map(4, gammas[4], 0.5, 2) == 6 and phi_map(6, gammas[6], 0.5, 2) == 4
        out = prolong_fixed_point(X_CROSS, 0.0, 4, cfg, scalar_solver, est)
        assert out.N_selected == 6 and out.status is Status.CERTIFIED

    def test_iterates_within_sigma(self, cfg):
        solver = OCPSolver(*scalar_linear(a=1.3, b=1.0, rho=2.0))
        acfg = replace(cfg, estimate_method=Method.APRIORI)
        out = prolong_fixed_point(np.array([2.0]), 0.0, 2, acfg, solver)
        tried = out.horizons_tried
        assert all(abs(b - a) <= acfg.sigma for a, b in zip(tried, tried[1:]))
        assert out.status is Status.CERTIFIED


class TestMonotone:
    def test_certified_start_skips_psi(self, scalar_solver, cfg):
        est = TableEstimator(gamma=1.0, alpha={4: 0.9})
        out = prolong_monotone(X_CROSS, 0.0, 4, cfg, scalar_solver, est)
        assert out.inner_iterations == 0 and est.calls == [4]

    def test_single_psi_step(self, scalar_solver, cfg):
        est = TableEstimator(gamma=1.0, alpha={4: 0.35, 6: 0.8})
        out = prolong_monotone(X_CROSS, 0.0, 4, cfg, scalar_solver, est)
        assert out.horizons_tried == (4, 6)
        assert out.N_selected == 6 and out.inner_iterations == 1

    def test_step_too_large_falls_back_to_next_horizon(self, scalar_solver, cfg):
        est = TableEstimator(gamma=0.1, alpha={4: -0.49, 5: 0.6})
        out = prolong_monotone(X_CROSS, 0.0, 4, cfg, scalar_solver, est)
        assert out.horizons_tried == (4, 5)

    def test_strictly_increasing(self, scalar_solver, cfg):
        out = prolong_monotone(X_CROSS, 0.0, 2, cfg, scalar_solver)
        assert len(out.horizons_tried) >= 2
        tried = out.horizons_tried
        assert all(b > a for a, b in zip(tried, tried[1:]))
        assert out.certified

    def test_cap(self, scalar_solver):
        capped = AdaptationConfig(N_max=5, shorten_enabled=False)
        out = prolong_monotone(X_CROSS, 0.0, 2, capped, scalar_solver, TableEstimator(gamma=50.0))
        assert out.status is Status.CAP_HIT and out.N_selected == 5


class TestShortening:
    def test_practical_region_replays_full_window(self, cfg):
        solver = OCPSolver(*scalar_linear(a=1.5, b=1.0, rho=1.0))
        sol = solver([1e-4], 6)
        sh = shorten_aposteriori(sol, replace(cfg, epsilon=1e-5), solver)
        assert sh.k_bar == 6 - cfg.N_min - 1
        assert all(a is None for a in sh.tail.alphas)

    def test_first_check_fails(self, scalar_solver, cfg):
        sol = scalar_solver(X_CROSS, 3)
        sh = shorten_aposteriori(sol, cfg, scalar_solver)
        assert sh.k_bar is None and sh.tail is None

    def test_first_check_passes(self, scalar_solver, cfg):
        sol = scalar_solver(X_CROSS, 6)
        sh = shorten_aposteriori(sol, cfg, scalar_solver)
        assert sh.k_bar is not None and sh.k_bar >= 0
        assert sh.tail.alphas[0] >= 0.5
        assert sh.tail.horizons == tuple(6 - k for k in range(sh.k_bar + 1))

    def test_reuses_known_successor(self, scalar_solver, cfg):
        sol = scalar_solver(X_CROSS, 6)
        first = APosterioriEstimator()(scalar_solver, sol)
        with_first = shorten_aposteriori(sol, cfg, scalar_solver, first=first)
        without = shorten_aposteriori(sol, cfg, scalar_solver)
        assert with_first.k_bar == without.k_bar
        assert with_first.solves == without.solves - 1

    @pytest.fixture
    def long_solution(self, scalar_solver):
        return scalar_solver(X_CROSS, 9)

    def _gd(self, sol, gamma):
        return GammaData(gamma, sol.N, 2, None)

    def test_apriori_tiny_gamma(self, long_solution, scalar_solver, cfg):
        sh = shorten_apriori(long_solution, cfg, scalar_solver, self._gd(long_solution, 1e-9))
        assert sh.k_bar == 9 - 2 - 2 and sh.solves == 0

    def test_apriori_current_horizon_uncertified(self, long_solution, scalar_solver, cfg):
        g = gamma_from_alpha(0.5, 9, 2)
        assert shorten_apriori(long_solution, cfg, scalar_solver, self._gd(long_solution, g)).k_bar is None

    def test_apriori_table(self, long_solution, scalar_solver, cfg):
        bounds = {M: gamma_from_alpha(0.5, M, 2) for M in range(4, 10)}
        assert all(bounds[M] > bounds[M - 1] for M in range(5, 10))
        expected = max(k for k in range(0, 6) if all(bounds[9 - j] > 0.5 for j in range(k + 1)))
        sh = shorten_apriori(long_solution, cfg, scalar_solver, self._gd(long_solution, 0.5))
        assert sh.k_bar == expected

    def test_apriori_unverifiable(self, long_solution, scalar_solver, cfg):
        assert shorten_apriori(long_solution, cfg, scalar_solver, self._gd(long_solution, math.inf)).k_bar is None


class TestAdaptStep:
    def test_boundary_alpha_counts_as_certified(self, scalar_solver):
        est = TableEstimator(gamma=1.0, alpha={3: 0.5})
        out = adapt_step(X_CROSS, 0.0, 3, AdaptationConfig(), scalar_solver, est)
        assert out.status is Status.CERTIFIED and out.inner_iterations == 0
        assert out.k_bar is not None or out.ocp_solves > 1

    def test_dispatch_matches_simple(self, scalar_solver, cfg):
        direct = prolong_simple(X_CROSS, 0.0, 2, cfg, scalar_solver)
        via = adapt_step(X_CROSS, 0.0, 2, cfg, scalar_solver)
        for name in ("N_selected", "alpha_achieved", "inner_iterations", "ocp_solves", "horizons_tried", "status"):
            assert getattr(via, name) == getattr(direct, name)

    def test_next_guess_after_shortening(self, scalar_solver):
        out = adapt_step(X_CROSS, 0.0, 8, AdaptationConfig(), scalar_solver)
        assert out.k_bar is not None
        assert out.next_guess == max(2, 8 - out.k_bar - 1)

    def test_cap_keeps_horizon(self, scalar_solver):
        out = adapt_step(X_CROSS, 0.0, 2, AdaptationConfig(N_max=3), scalar_solver)
        assert out.status is Status.CAP_HIT and out.next_guess == 3

    @pytest.mark.parametrize("strategy", list(Strategy))
    @pytest.mark.parametrize("method", list(Method))
    def test_certified_outcomes_meet_bound(self, scalar_solver, strategy, method):
        acfg = AdaptationConfig(estimate_method=method, prolong_strategy=strategy)
        for x in (0.3, 1.0, 1.8):
            out = adapt_step(np.array([x]), 0.0, 2, acfg, scalar_solver)
            if out.status is Status.CERTIFIED:
                assert out.alpha_achieved >= acfg.alpha_bar
            assert out.inner_iterations <= acfg.N_max - acfg.N_min + 1


class TestController:
    def test_replay_window(self, di):
        sys, cost = di
        solver = OCPSolver(sys, cost)
        ctrl = AdaptiveController(AdaptationConfig(), solver, N0=12)
        x = np.array([1.0, 0.0])
        first = ctrl.step(x, 0.0)
        assert first.stored_tail is not None, "expected shortening at the long initial horizon"
        tail, out = first.stored_tail, first
        for k in range(1, tail.k_bar + 1):
            x = sys.step(x, out.control)
            out = ctrl.step(x, k * sys.T)
            assert out.replay and out.ocp_solves == 0
            assert out.N_selected == tail.source.N - k
            assert out.control.tobytes() == tail.source.controls[k].tobytes()
        assert not ctrl.replaying
        assert ctrl.N_guess == max(2, tail.source.N - tail.k_bar - 1)
