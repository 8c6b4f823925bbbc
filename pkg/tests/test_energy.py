import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnflow.dynamics import ModelSpec, velocity
from attnflow.energy import (Classification, circle_gradient, circle_hessian,
                             classify_critical_point, config_energy_repulsive, design_test,
                             dissipation_rate, distinct_inner_products, energy_circle, energy_e0,
                             energy_kuramoto, g_function, gradient_standard, hessian_fd,
                             interaction_energy, modified_metric_check, sphere_monomial_moment,
                             tau_star)
from attnflow.geometry import (DomainError, circle_points, cross_polytope, project_rows,
                               regular_simplex, retract_rows, sample_uniform)

seeds = st.integers(0, 2 ** 32 - 1)


def loop_energy(X, beta):
    n = len(X)
    return sum(math.exp(beta * float(X[i] @ X[j])) for i in range(n) for j in range(n)) / (
        2 * beta * n * n)


@given(st.integers(1, 6), st.integers(2, 5), st.floats(0.01, 20.0), seeds)
def test_energy_matches_loop(n, d, beta, seed):
    X = sample_uniform(n, d, seed).points
    assert interaction_energy(X, beta) == pytest.approx(loop_energy(X, beta), rel=1e-12)
    shift = 1.0 / (2 * beta)
    assert interaction_energy(X, beta, shifted=True) == pytest.approx(
        loop_energy(X, beta) - shift, rel=1e-9, abs=1e-12)
    assert config_energy_repulsive(X, beta) == pytest.approx(loop_energy(X, beta), rel=1e-12)


def test_energy_large_beta_is_finite():
    X = sample_uniform(4, 3, 0).points
    assert math.isfinite(interaction_energy(X, 600.0))
    with pytest.raises(DomainError):
        interaction_energy(X, 0.0)


def test_circle_and_kuramoto_energies():
    theta = np.array([0.1, 1.3, 2.0, 4.0])
    X = circle_points(theta)
    assert energy_circle(theta, 2.0) == pytest.approx(interaction_energy(X, 2.0), rel=1e-13)
    ref = sum(math.cos(a - b) for a in theta for b in theta) / (2 * 16)
    assert energy_kuramoto(theta) == pytest.approx(ref, rel=1e-13)
    assert energy_e0(X) == pytest.approx(np.sum(X, axis=0) @ np.sum(X, axis=0) / 4)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.integers(2, 5), st.floats(0.1, 5.0), seeds)
def test_gradient_matches_directional_derivative(n, d, beta, seed):
    rng = np.random.default_rng(seed)
    X = sample_uniform(n, d, seed).points
    U = project_rows(X, rng.standard_normal((n, d)))
    h = 1e-5
    fd = (interaction_energy(retract_rows(X, U, h), beta)
          - interaction_energy(retract_rows(X, U, -h), beta)) / (2 * h)
    g = gradient_standard(X, beta)
    assert fd == pytest.approx(float(np.sum(g * U)), rel=1e-6, abs=1e-9)


@given(st.integers(2, 7), st.integers(2, 5), st.floats(0.0, 6.0), seeds)
def test_usa_is_scaled_gradient_and_metric_identity(n, d, beta, seed):
    X = sample_uniform(n, d, seed).points
    v = velocity(X, ModelSpec("USA", beta=beta))
    assert np.allclose(v, n * gradient_standard(X, beta), atol=1e-12 * max(1, math.exp(beta)))
    assert modified_metric_check(X, beta) < 1e-12 * max(1.0, math.exp(beta))


@given(st.integers(2, 7), st.integers(2, 5), st.floats(0.1, 6.0), seeds,
       st.sampled_from(["SA", "USA"]))
def test_dissipation_equals_grad_dot_velocity(n, d, beta, seed, variant):
    X = sample_uniform(n, d, seed).points
    v = velocity(X, ModelSpec(variant, beta=beta))
    rate = float(np.sum(gradient_standard(X, beta) * v))
    assert dissipation_rate(X, beta, variant) == pytest.approx(rate, rel=1e-10, abs=1e-14)
    assert dissipation_rate(X, beta, variant) >= 0


def test_tau_star_root_and_scaling():
    for beta in (0.5, 3.0, 100.0):
        for d in (2, 3, 5):
            t = tau_star(beta, d)
            assert beta * math.sin(t) ** 2 == pytest.approx((d - 1) * math.cos(t), abs=1e-10)
    assert 0.99 < tau_star(100.0, 2) * 10 < 1.01
    z = np.linspace(tau_star(4.0), np.pi, 500)[1:]
    assert np.all(g_function(z, 4.0) < 0)
    assert g_function(0.0, 4.0) > 0


def _angle_hessian_fd(theta, beta, h=1e-4):
    n = theta.size
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            def E(a, b):
                t = theta.copy()
                t[i] += a
                t[j] += b
                return energy_circle(t, beta)
            H[i, j] = (E(h, h) - E(h, -h) - E(-h, h) + E(-h, -h)) / (4 * h * h)
    return H


def test_circle_hessian_matches_finite_differences():
    theta = np.array([0.0, 0.7, 2.1, 3.9])
    for beta in (0.5, 2.0):
        assert np.allclose(circle_hessian(theta, beta), _angle_hessian_fd(theta, beta), atol=1e-6)
        g = np.array([(energy_circle(theta + 1e-6 * e, beta) - energy_circle(theta - 1e-6 * e, beta))
                      / 2e-6 for e in np.eye(4)])
        assert np.allclose(circle_gradient(theta, beta), g, atol=1e-8)


def test_sphere_hessian_reduces_to_circle_hessian():
    theta = np.array([0.0, 0.7, 2.1, 3.9])
    H = hessian_fd(circle_points(theta), 1.5)
    assert np.allclose(H, circle_hessian(theta, 1.5), atol=1e-8)


def test_classification_examples():
    anti = classify_critical_point(np.array([0.0, np.pi]), 1.0)
    assert anti.classification == Classification.STRICT_SADDLE
    assert anti.hessian_eigs[-1] == pytest.approx(math.exp(-1) / 2, abs=1e-12)
    sq = classify_critical_point(2 * np.pi * np.arange(4) / 4, 10.0)
    assert sq.classification == Classification.STRICT_SADDLE
    sync = classify_critical_point(np.zeros(3), 1.0)
    assert sync.classification == Classification.LOCAL_MAX_CANDIDATE
    off = classify_critical_point(np.array([0.0, 0.5]), 1.0)
    assert off.classification == Classification.INCONCLUSIVE
    pts = classify_critical_point(np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]), 1.0)
    assert pts.classification == Classification.STRICT_SADDLE
    assert pts.to_dict()["classification"] == "STRICT_SADDLE"


def test_sphere_moments():
    for d in (2, 3, 5):
        assert sphere_monomial_moment([2] + [0] * (d - 1)) == pytest.approx(1 / d)
        assert sphere_monomial_moment([4] + [0] * (d - 1)) == pytest.approx(3 / (d * (d + 2)))
        assert sphere_monomial_moment([1] + [0] * (d - 1)) == 0.0
    X = sample_uniform(400_000, 3, 5).points
    assert np.mean(X[:, 0] ** 2 * X[:, 1] ** 2) == pytest.approx(
        sphere_monomial_moment([2, 2, 0]), abs=2e-3)


def test_design_tests():
    assert design_test(cross_polytope(3), 3).passed
    assert not design_test(cross_polytope(3), 4).passed
    tet = regular_simplex(4)
    assert design_test(tet, 2).passed and not design_test(tet, 3).passed
    tri = regular_simplex(3)
    assert design_test(tri, 2).passed
    assert distinct_inner_products(tet) == 1
    assert not design_test(sample_uniform(4, 3, 0), 1).passed
