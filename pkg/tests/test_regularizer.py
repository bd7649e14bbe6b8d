"""Tests for gradient statistics, modified flows, and order-of-error fits."""

import math

import numpy as np
import pytest

from nested_la.optimizers import LayerStack
from nested_la.problems import DecomposedProblem, full_grad, make_quadratic_suite, make_rng
from nested_la.regularizer import (
    FlowCoefficients,
    RegimeError,
    ai,
    aig,
    an,
    ang,
    expected_epoch_iterate,
    flow_coefficients,
    integrate_modified_flow,
    modified_flow_grad,
    order_check,
)


def fd_grad(f, x, rel=1e-5):
    h = rel * (1.0 + np.linalg.norm(x))
    g = np.zeros_like(x, dtype=float)
    for j in range(len(x)):
        e = np.zeros_like(g)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def hand_problem(y, grads):
    """Problem whose component gradients at y are exactly the given rows."""
    grads = np.asarray(grads, dtype=float)
    m, d = grads.shape
    A = np.tile(np.eye(d), (m, 1, 1))
    c = np.asarray(y, dtype=float) - grads
    return DecomposedProblem(A=A, c=c, noise_sigma=0.0)


class TestAnAi:
    def test_single_component(self):
        p = make_quadratic_suite(dim=3, m=1, noise_sigma=0.0, conditioning=4.0, seed=1)
        y = make_rng(0).standard_normal(3)
        g = full_grad(p, y)
        assert np.isclose(an(p, y), g @ g, rtol=1e-14)
        with pytest.raises(ValueError):
            ai(p, y)

    def test_norm_identity_at_random_points(self):
        p = make_quadratic_suite(dim=5, m=4, noise_sigma=0.0, conditioning=9.0, seed=2)
        rng = make_rng(1)
        for _ in range(100):
            y = rng.standard_normal(5) * 3.0
            g = full_grad(p, y)
            lhs = g @ g
            rhs = (an(p, y) + (p.m - 1) * ai(p, y)) / p.m
            assert abs(lhs - rhs) <= 1e-10 * (1.0 + abs(lhs))

    def test_identical_components_give_an_equals_ai(self):
        base = make_quadratic_suite(dim=3, m=1, noise_sigma=0.0, conditioning=5.0, seed=3)
        p = DecomposedProblem(
            A=np.tile(base.A[0], (3, 1, 1)), c=np.tile(base.c[0], (3, 1)), noise_sigma=0.0
        )
        y = make_rng(2).standard_normal(3)
        g = full_grad(p, y)
        assert np.isclose(an(p, y), g @ g, rtol=1e-12)
        assert np.isclose(ai(p, y), g @ g, rtol=1e-12)

    def test_orthogonal_pair_gives_zero_ai(self):
        y = np.zeros(2)
        p = hand_problem(y, [[1.0, 0.0], [0.0, 1.0]])
        assert ai(p, y) == 0.0

    def test_hand_enumeration_three_components(self):
        y = np.array([0.3, -0.2])
        grads = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        p = hand_problem(y, grads)
        pairs = [
            grads[i] @ grads[j] for i in range(3) for j in range(3) if i != j
        ]
        assert np.isclose(ai(p, y), np.mean(pairs), rtol=1e-15)
        assert np.isclose(ai(p, y), 2.0 / 3.0, rtol=1e-15)

    def test_cauchy_schwarz(self):
        p = make_quadratic_suite(dim=4, m=5, noise_sigma=0.0, conditioning=7.0, seed=4)
        rng = make_rng(3)
        for _ in range(20):
            y = rng.standard_normal(4) * 2.0
            assert ai(p, y) <= an(p, y) + 1e-12

    def test_mc_mode(self):
        p = make_quadratic_suite(dim=3, m=6, noise_sigma=0.0, conditioning=5.0, seed=5)
        y = make_rng(4).standard_normal(3)
        est, err = an(p, y, mode="mc", samples=20_000, seed=9)
        assert abs(est - an(p, y)) <= 4.0 * err
        with pytest.raises(ValueError):
            an(p, y, mode="mc", samples=1)
        with pytest.raises(ValueError):
            an(p, y, mode="bogus")


class TestGradientStatistics:
    def test_zero_at_common_minimizer(self):
        base = make_quadratic_suite(dim=3, m=1, noise_sigma=0.0, conditioning=6.0, seed=6)
        A = np.stack([base.A[0], 0.5 * base.A[0] + 0.5 * np.eye(3)])
        c = np.tile(base.c[0], (2, 1))
        p = DecomposedProblem(A=A, c=c, noise_sigma=0.0)
        y = p.c[0]
        assert np.allclose(ang(p, y), 0.0, atol=1e-14)
        assert np.allclose(aig(p, y), 0.0, atol=1e-14)

    def test_matches_finite_differences(self):
        p = make_quadratic_suite(dim=4, m=3, noise_sigma=0.0, conditioning=8.0, seed=7)
        rng = make_rng(5)
        for _ in range(50):
            y = rng.standard_normal(4)
            g_an = ang(p, y)
            g_ai = aig(p, y)
            fd_an = fd_grad(lambda z: an(p, z), y)
            fd_ai = fd_grad(lambda z: ai(p, z), y)
            assert np.linalg.norm(g_an - fd_an) <= 1e-6 * (1 + np.linalg.norm(g_an))
            assert np.linalg.norm(g_ai - fd_ai) <= 1e-6 * (1 + np.linalg.norm(g_ai))

    def test_gradient_identity(self):
        p = make_quadratic_suite(dim=5, m=4, noise_sigma=0.0, conditioning=10.0, seed=8)
        rng = make_rng(6)
        for _ in range(25):
            y = rng.standard_normal(5)
            grad_normsq = 2.0 * p.mean_hessian @ full_grad(p, y)
            combo = (ang(p, y) + (p.m - 1) * aig(p, y)) / p.m
            assert np.allclose(grad_normsq, combo, atol=1e-12, rtol=1e-10)


class TestFlowCoefficients:
    def test_one_layer_formula(self):
        cfg = LayerStack(alphas=(0.4,), ks=(3,))
        co = flow_coefficients(cfg, gamma=0.2, m=6)
        assert np.isclose(co.an_coef, 0.2 * 0.4 / 4)
        assert np.isclose(co.ai_coef, -(0.2 / 4) * (1 - 0.4) * (3 - 1))
        assert co.shrink == 0.4

    def test_two_layer_formula(self):
        cfg = LayerStack(alphas=(0.4, 0.7), ks=(3, 2))
        co = flow_coefficients(cfg, gamma=0.1, m=6)
        expected = (1 - 0.4) * (3 - 1) + (1 - 0.7) * 0.4 * (6 - 1)
        assert np.isclose(co.ai_coef, -(0.1 / 4) * expected, rtol=1e-15)
        assert np.isclose(co.an_coef, 0.1 * 0.28 / 4, rtol=1e-15)

    def test_alpha_one_recovers_plain_sgd_flow(self):
        cfg = LayerStack(alphas=(1.0, 1.0), ks=(2, 3))
        co = flow_coefficients(cfg, gamma=0.3, m=6)
        assert co.ai_coef == 0.0
        assert np.isclose(co.an_coef, 0.3 / 4)

    def test_gd_flag_and_degeneracy_chain(self):
        gd1 = flow_coefficients(LayerStack(alphas=(), ks=()), gamma=0.2, m=1, gd=True)
        sgd1 = flow_coefficients(LayerStack(alphas=(), ks=()), gamma=0.2, m=1)
        la11 = flow_coefficients(LayerStack(alphas=(1.0,), ks=(1,)), gamma=0.2, m=1)
        for co in (gd1, sgd1, la11):
            assert np.isclose(co.an_coef, 0.2 / 4)
            assert co.ai_coef == 0.0

        gd = flow_coefficients(LayerStack(alphas=(), ks=()), gamma=0.2, m=5, gd=True)
        assert np.isclose(gd.an_coef, 0.2 / (4 * 5))
        assert np.isclose(gd.ai_coef, 0.2 * 4 / (4 * 5))

    def test_divisibility_required(self):
        cfg = LayerStack(alphas=(0.5, 0.5), ks=(2, 2))
        with pytest.raises(ValueError):
            flow_coefficients(cfg, gamma=0.1, m=6)

    def test_coefficient_telescoping(self):
        rng = make_rng(7)
        for _ in range(1000):
            n = int(rng.integers(1, 6))
            alphas = rng.uniform(0.01, 1.0, size=n)
            total, prod = 0.0, 1.0
            for a in alphas:
                total += (1 - a) * prod
                prod *= a
            assert abs(total - (1.0 - prod)) <= 1e-14

    def test_second_layer_reinforces_inner_product_term(self):
        rng = make_rng(8)
        for _ in range(200):
            alpha = float(rng.uniform(0.05, 0.95))
            k = int(rng.integers(2, 7))
            alpha2 = float(rng.uniform(0.05, 0.95))
            k2 = int(rng.integers(1, 7))
            gamma_la = 0.1
            gamma_la2 = alpha * gamma_la / (alpha * alpha2)  # matched per-epoch progress
            la = flow_coefficients(LayerStack((alpha,), (k,)), gamma_la, m=k * k2)
            la2 = flow_coefficients(
                LayerStack((alpha, alpha2), (k, k2)), gamma_la2, m=k * k2
            )
            assert abs(la2.ai_coef) > abs(la.ai_coef)
            assert np.isclose(la2.an_coef, la.an_coef, rtol=1e-12)


class TestModifiedFlowGrad:
    def test_zero_gamma_is_plain_gradient(self):
        p = make_quadratic_suite(dim=4, m=3, noise_sigma=0.0, conditioning=6.0, seed=9)
        y = make_rng(9).standard_normal(4)
        co = flow_coefficients(LayerStack(alphas=(0.5,), ks=(3,)), gamma=0.0, m=3)
        assert np.array_equal(modified_flow_grad(p, y, co), full_grad(p, y))

    def test_sgd_flow_gradient(self):
        p = make_quadratic_suite(dim=4, m=4, noise_sigma=0.0, conditioning=5.0, seed=10)
        y = make_rng(10).standard_normal(4)
        co = flow_coefficients(LayerStack(alphas=(), ks=()), gamma=0.3, m=4)
        expect = full_grad(p, y) + (0.3 / 4) * ang(p, y)
        assert np.allclose(modified_flow_grad(p, y, co), expect, rtol=1e-14)

    def test_gd_flow_gradient_matches_norm_penalty(self):
        p = make_quadratic_suite(dim=4, m=4, noise_sigma=0.0, conditioning=5.0, seed=11)
        y = make_rng(11).standard_normal(4)
        co = flow_coefficients(LayerStack(alphas=(), ks=()), gamma=0.3, m=4, gd=True)
        # gradient of f + (gamma/4) ||grad f||^2 for quadratics
        expect = full_grad(p, y) + (0.3 / 4) * 2.0 * p.mean_hessian @ full_grad(p, y)
        assert np.allclose(modified_flow_grad(p, y, co), expect, rtol=1e-12)


class TestExpectedEpochIterate:
    def test_small_gamma_limit_is_scaled_full_gradient(self):
        p = make_quadratic_suite(dim=4, m=4, noise_sigma=0.0, conditioning=6.0, seed=12)
        cfg = LayerStack(alphas=(0.5,), ks=(2,))
        y0 = p.x_star + np.ones(4)
        gamma = 1e-6
        est = expected_epoch_iterate(p, y0, gamma, cfg)
        drift = (est - y0) / gamma
        target = -0.5 * p.m * full_grad(p, y0)
        assert np.linalg.norm(drift - target) <= 1e-3 * np.linalg.norm(target)

    def test_exact_vs_monte_carlo(self):
        p = make_quadratic_suite(dim=3, m=4, noise_sigma=0.0, conditioning=5.0, seed=13)
        cfg = LayerStack(alphas=(0.6,), ks=(2,))
        y0 = p.x_star + np.ones(3)
        exact = expected_epoch_iterate(p, y0, 0.02, cfg)
        mean, err = expected_epoch_iterate(p, y0, 0.02, cfg, mode="mc", samples=20_000, seed=3)
        assert np.all(np.abs(mean - exact) <= 4.0 * err + 1e-12)

    def test_mc_deterministic_given_seed(self):
        p = make_quadratic_suite(dim=3, m=4, noise_sigma=0.0, conditioning=5.0, seed=13)
        cfg = LayerStack(alphas=(0.6,), ks=(2,))
        y0 = p.x_star + np.ones(3)
        a = expected_epoch_iterate(p, y0, 0.02, cfg, mode="mc", samples=500, seed=8)
        b = expected_epoch_iterate(p, y0, 0.02, cfg, mode="mc", samples=500, seed=8)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_shared_curvature_first_order_invariance(self):
        # identical Hessians: permutations agree to first order in gamma,
        # so the spread across orderings shrinks quadratically
        y0 = np.array([1.0, -2.0])
        grads = np.array([[1.0, 0.4], [-0.3, 1.0], [0.8, -0.2], [0.1, 0.6]])
        p = hand_problem(y0, grads)
        cfg = LayerStack(alphas=(0.7,), ks=(4,))

        def spread(gamma):
            import itertools

            perms = np.array(list(itertools.permutations(range(4))))
            from nested_la.regularizer import _epoch_final_weights

            finals = _epoch_final_weights(p, y0, gamma, cfg, perms)
            return float(np.max(np.linalg.norm(finals - finals[0], axis=1)))

        s1, s2 = spread(1e-3), spread(2e-3)
        assert s1 <= 1e-4
        assert 3.0 <= s2 / s1 <= 5.0  # quadratic scaling in gamma

    def test_exact_mode_rejects_large_m(self):
        p = make_quadratic_suite(dim=2, m=9, noise_sigma=0.0, conditioning=3.0, seed=14)
        cfg = LayerStack(alphas=(0.5,), ks=(3,))
        with pytest.raises(ValueError):
            expected_epoch_iterate(p, np.zeros(2), 0.01, cfg)

    def test_divisibility_required(self):
        p = make_quadratic_suite(dim=2, m=6, noise_sigma=0.0, conditioning=3.0, seed=15)
        cfg = LayerStack(alphas=(0.5,), ks=(4,))
        with pytest.raises(ValueError):
            expected_epoch_iterate(p, np.zeros(2), 0.01, cfg)


class TestIntegrateModifiedFlow:
    def test_closed_form_exponential(self):
        lam, center = 0.7, 1.5
        p = DecomposedProblem(A=np.array([[[lam]]]), c=np.array([[center]]), noise_sigma=0.0)
        co = FlowCoefficients(an_coef=0.0, ai_coef=0.0, base_step=0.01, shrink=1.0)
        y0 = np.array([3.5])
        horizon = 2.0
        got = integrate_modified_flow(p, y0, co, horizon)
        exact = center + math.exp(-lam * horizon) * (y0[0] - center)
        assert abs(got[0] - exact) <= 1e-9

    def test_zero_horizon(self):
        p = make_quadratic_suite(dim=3, m=2, noise_sigma=0.0, conditioning=4.0, seed=16)
        co = flow_coefficients(LayerStack(alphas=(0.5,), ks=(2,)), gamma=0.01, m=2)
        y0 = np.ones(3)
        assert np.array_equal(integrate_modified_flow(p, y0, co, 0.0), y0)

    def test_tolerance_refinement_self_consistent(self):
        p = make_quadratic_suite(dim=3, m=4, noise_sigma=0.0, conditioning=6.0, seed=17)
        co = flow_coefficients(LayerStack(alphas=(0.5,), ks=(2,)), gamma=0.01, m=4)
        y0 = p.x_star + np.ones(3)
        a = integrate_modified_flow(p, y0, co, 0.02, tol=1e-10)
        b = integrate_modified_flow(p, y0, co, 0.02, tol=1e-14)
        assert np.linalg.norm(a - b) < 1e-10

    def test_invalid_tolerance(self):
        p = make_quadratic_suite(dim=2, m=2, noise_sigma=0.0, conditioning=3.0, seed=18)
        co = FlowCoefficients(an_coef=0.0, ai_coef=0.0, base_step=0.0, shrink=1.0)
        with pytest.raises(ValueError):
            integrate_modified_flow(p, np.zeros(2), co, 1.0)


class TestOrderCheck:
    def test_slopes_on_verification_suites(self):
        from nested_la.harness import ORDER_BRACKETS, REGFLOW_GAMMAS, regflow_suites

        for name, p, cfg, y0 in regflow_suites():
            orders = (2,) if cfg.n == 0 else (1, 2)
            for order in orders:
                res = order_check(p, y0, cfg, REGFLOW_GAMMAS, order)
                lo, hi = ORDER_BRACKETS[order]
                assert lo <= res.slope <= hi, (name, order, res.slope)

    def test_gamma_list_validation(self):
        p = make_quadratic_suite(dim=2, m=2, noise_sigma=0.0, conditioning=3.0, seed=19)
        cfg = LayerStack(alphas=(0.5,), ks=(2,))
        with pytest.raises(ValueError):
            order_check(p, np.ones(2), cfg, [0.01, 0.005], 1)  # too few
        with pytest.raises(ValueError):
            order_check(p, np.ones(2), cfg, [0.01, 0.008, 0.006, 0.004], 1)  # short span
        with pytest.raises(ValueError):
            order_check(p, np.ones(2), cfg, [0.03, 0.01, 0.003, 0.001], 3)

    def test_regime_failure_outside_asymptotic_range(self):
        p = make_quadratic_suite(dim=4, m=4, noise_sigma=0.0, conditioning=6.0, seed=20)
        cfg = LayerStack(alphas=(0.5,), ks=(2,))
        y0 = p.x_star + np.ones(4)
        with pytest.raises(RegimeError):
            order_check(p, y0, cfg, [8.0, 2.0, 0.5, 0.1], 1)

    def test_random_config_sweep(self):
        # modified-flow residual decays at third order across random stacks
        rng = make_rng(21)
        gammas = np.geomspace(1e-3, 3e-2, 6)
        for i in range(10):
            p = make_quadratic_suite(
                dim=4, m=4, noise_sigma=0.0, conditioning=float(rng.uniform(2, 15)),
                seed=int(rng.integers(2**62)),
            )
            cfg = LayerStack(alphas=(float(rng.uniform(0.3, 0.9)),), ks=(int(rng.choice([2, 4])),))
            y0 = p.x_star + rng.standard_normal(4)
            res = order_check(p, y0, cfg, gammas, 2)
            assert 2.7 <= res.slope <= 3.3, (i, res.slope)
