from __future__ import annotations

import numpy as np
import pytest

from anchorkl import dynamics as dyn
from anchorkl.dynamics import (
    DynamicsConfig,
    DynamicsState,
    FisherSpec,
    Regime,
    classify_regime,
    closed_form,
    log_spaced_grid,
    mode_solution,
    simulated_regime,
    steady_state,
    step,
)
from anchorkl.rng import stream


def random_instance(trial: int, dim: int | None = None, stable: bool = False):
    rng = stream(400, trial, "dyn")
    d = dim if dim is not None else int(rng.integers(1, 65))
    fisher = FisherSpec.random(d, rng)
    eta = float(rng.uniform(0.0, 0.99))
    alpha = float(rng.uniform(0.01, 0.2))
    if stable:
        beta = float(rng.uniform(0.1, 0.9)) * (1.0 + eta) / (alpha * fisher.lambda_max)
    else:
        beta = float(rng.uniform(0.1, 2.0))
    cfg = DynamicsConfig(alpha=alpha, beta=beta, eta=eta, g=rng.standard_normal(d))
    state = DynamicsState(rng.standard_normal(d), rng.standard_normal(d))
    return cfg, fisher, state, rng


class TestFisherSpec:
    def test_random_is_orthonormal_psd(self):
        fisher = FisherSpec.random(12, stream(400, 0, "f"))
        v = fisher.basis
        assert np.max(np.abs(v.T @ v - np.eye(12))) < 1e-10
        assert np.all(fisher.eigenvalues >= 0.0)
        m = fisher.matrix
        assert np.max(np.abs(m - m.T)) < 1e-10

    def test_trace_bound(self):
        for trial in range(20):
            fisher = FisherSpec.random(8, stream(400, trial, "fb"))
            assert fisher.trace_bound_holds()

    def test_validation(self):
        with pytest.raises(ValueError):
            FisherSpec(np.array([-1.0]), np.eye(1))
        with pytest.raises(ValueError):
            FisherSpec(np.array([1.0, 2.0]), np.ones((2, 2)))


class TestStep:
    def test_fixed_point_at_zero_g_zero_delta(self):
        cfg = DynamicsConfig(0.1, 1.0, 0.9, np.zeros(3))
        fisher = FisherSpec.random(3, stream(401, 0, "s"))
        state = DynamicsState(np.array([1.0, -2.0, 0.5]), np.zeros(3))
        out = step(state, cfg, fisher)
        assert np.array_equal(out.theta, state.theta)
        assert np.array_equal(out.delta, state.delta)

    def test_zero_fisher_decouples(self):
        cfg = DynamicsConfig(0.1, 1.0, 0.8, np.array([1.0, 2.0]))
        fisher = FisherSpec(np.zeros(2), np.eye(2))
        state = DynamicsState(np.zeros(2), np.array([1.0, 1.0]))
        out = step(state, cfg, fisher)
        assert out.theta == pytest.approx(0.1 * cfg.g)
        assert out.delta == pytest.approx(0.8 * state.delta + 0.1 * cfg.g)

    def test_scalar_example(self):
        # d=1, lambda=2, alpha=0.1, beta=1, eta=0.9, delta=1, g=0 -> 0.7
        cfg = DynamicsConfig(0.1, 1.0, 0.9, np.zeros(1))
        fisher = FisherSpec(np.array([2.0]), np.eye(1))
        out = step(DynamicsState(np.zeros(1), np.ones(1)), cfg, fisher)
        assert out.delta[0] == pytest.approx(0.7, abs=1e-15)

    def test_dimension_mismatch(self):
        cfg = DynamicsConfig(0.1, 1.0, 0.9, np.zeros(2))
        fisher = FisherSpec(np.array([1.0]), np.eye(1))
        with pytest.raises(ValueError):
            step(DynamicsState(np.zeros(2), np.zeros(2)), cfg, fisher)


class TestClosedForm:
    def test_k_one_reproduces_step(self):
        cfg, fisher, state, _ = random_instance(1, dim=8)
        one = closed_form(1, cfg, fisher, state)
        direct = step(state, cfg, fisher)
        assert np.max(np.abs(one.delta - direct.delta)) < 1e-12
        assert np.max(np.abs(one.theta - direct.theta)) < 1e-12

    def test_matches_iteration_100_steps_d16(self):
        cfg, fisher, state, _ = random_instance(2, dim=16)
        it = state
        for _ in range(100):
            it = step(it, cfg, fisher)
        cf = closed_form(100, cfg, fisher, state)
        scale = max(np.max(np.abs(it.delta)), np.max(np.abs(it.theta)))
        assert np.max(np.abs(cf.delta - it.delta)) / scale < 1e-10
        assert np.max(np.abs(cf.theta - it.theta)) / scale < 1e-10

    def test_zero_g_is_pure_transient(self):
        rng = stream(402, 0, "cf")
        fisher = FisherSpec.random(5, rng)
        cfg = DynamicsConfig(0.05, 1.0, 0.9, np.zeros(5))
        state = DynamicsState(np.zeros(5), rng.standard_normal(5))
        k = 17
        cf = closed_form(k, cfg, fisher, state)
        chi = cfg.eta - cfg.alpha * cfg.beta * fisher.eigenvalues
        want = fisher.basis @ (chi**k * (fisher.basis.T @ state.delta))
        assert np.max(np.abs(cf.delta - want)) < 1e-12

    def test_iterate_agreement_many_instances(self):
        # k up to 1000, d up to 64, relative 1e-10; unstable spectra get a
        # capped horizon so the comparison never overflows
        for trial in range(12):
            rng = stream(405, trial, "agree")
            dim, k, err = dyn.closed_form_agreement(rng, dim_max=64, k_max=1000)
            assert err < 1e-10, f"trial {trial}, k={k}, dim={dim}"

    def test_eta_validation(self):
        with pytest.raises(ValueError):
            DynamicsConfig(0.1, 1.0, 1.0, np.zeros(2))


class TestModeSolution:
    def test_k_zero_returns_initial(self):
        cfg = DynamicsConfig(0.1, 1.0, 0.9, np.zeros(1))
        assert mode_solution(cfg, 2.0, 0.37, 1.5, 0) == 0.37

    def test_chi_zero_collapses_to_alpha_g(self):
        # alpha beta lambda = eta -> chi = 0: value is alpha g for k >= 1
        cfg = DynamicsConfig(0.1, 1.0, 0.5, np.zeros(1))
        lam = cfg.eta / (cfg.alpha * cfg.beta)
        for k in (1, 3, 10):
            assert mode_solution(cfg, lam, 0.9, 2.0, k) == pytest.approx(0.1 * 2.0, abs=1e-15)

    def test_matches_eigenprojection_of_closed_form(self):
        cfg, fisher, state, _ = random_instance(3, dim=6)
        k = 23
        cf = closed_form(k, cfg, fisher, state)
        for i in range(6):
            v = fisher.basis[:, i]
            want = mode_solution(
                cfg, float(fisher.eigenvalues[i]), float(v @ state.delta), float(v @ cfg.g), k
            )
            assert float(v @ cf.delta) == pytest.approx(want, rel=1e-12, abs=1e-12)


class TestRegimes:
    def test_probe_points(self):
        assert classify_regime(0.9, 0.5) is Regime.STABLE_MONOTONE
        assert classify_regime(0.9, 1.2) is Regime.STABLE_OSCILLATORY
        assert classify_regime(0.9, 1.9) is Regime.UNSTABLE

    def test_boundaries_are_closed_deterministically(self):
        assert classify_regime(0.9, 0.9) is Regime.STABLE_MONOTONE
        assert classify_regime(0.9, 1.9) is Regime.UNSTABLE

    def test_simulated_behavior_matches_classification_on_grid(self):
        for eta in (0.0, 0.5, 0.9, 0.95, 0.99):
            for abl in log_spaced_grid(9, 1e-3, 4.0):
                assert simulated_regime(eta, float(abl)) is classify_regime(eta, float(abl)), (
                    eta,
                    abl,
                )

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            classify_regime(0.9, -0.1)


class TestSteadyState:
    def test_zero_fisher(self):
        cfg = DynamicsConfig(0.1, 1.0, 0.8, np.array([2.0, -1.0]))
        fisher = FisherSpec(np.zeros(2), np.eye(2))
        delta_star, kl_star, bound = steady_state(cfg, fisher)
        assert delta_star == pytest.approx(0.1 * cfg.g / 0.2)
        assert kl_star == 0.0
        assert bound == pytest.approx(0.1 * np.linalg.norm(cfg.g) / 0.2)

    def test_long_run_convergence(self):
        cfg, fisher, _, _ = random_instance(4, dim=8, stable=True)
        delta_star, _, _ = steady_state(cfg, fisher)
        it = DynamicsState(np.zeros(8), np.zeros(8))
        for _ in range(10_000):
            it = step(it, cfg, fisher)
        assert np.max(np.abs(it.delta - delta_star)) < 1e-8

    def test_norm_bound_over_instances(self):
        for trial in range(200):
            cfg, fisher, _, _ = random_instance(100 + trial, stable=True)
            delta_star, _, bound = steady_state(cfg, fisher)
            assert float(np.linalg.norm(delta_star)) <= bound + 1e-12

    def test_quadratic_kl_consistency(self):
        for trial in range(30):
            cfg, fisher, _, _ = random_instance(300 + trial, dim=10, stable=True)
            delta_star, kl_star, _ = steady_state(cfg, fisher)
            quad = 0.5 * float(delta_star @ fisher.matrix @ delta_star)
            assert abs(quad - kl_star) < 1e-10

    def test_kl_star_nondecreasing_in_eta(self):
        rng = stream(403, 0, "mono")
        fisher = FisherSpec.random(6, rng)
        g = rng.standard_normal(6)
        alpha = 0.05
        beta = 0.3 / (alpha * fisher.lambda_max)
        last = -1.0
        for eta in np.linspace(0.0, 0.98, 25):
            cfg = DynamicsConfig(alpha, beta, float(eta), g)
            _, kl_star, _ = steady_state(cfg, fisher)
            assert kl_star >= last - 1e-15
            last = kl_star

    def test_unstable_config_rejected(self):
        fisher = FisherSpec(np.array([10.0]), np.eye(1))
        cfg = DynamicsConfig(1.0, 1.0, 0.5, np.ones(1))
        with pytest.raises(ValueError):
            steady_state(cfg, fisher)
