import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import iv

from attnflow.analysis import (ClusterSummary, PhaseGrid, cluster_summary, cluster_timeline,
                               consensus_residual, curve_csv, deviation_vs_dimension,
                               empirical_boundary, empirical_phase_diagram, fit_exponential_rate,
                               fourier_coefficients_hbeta, gram_histogram, loglog_slope,
                               metastable_plateaus, pair_correlation_circle, phase_curve_infty)
from attnflow.dynamics import ModelSpec
from attnflow.geometry import DomainError, circle_points, sample_uniform
from attnflow.integrate import IntegratorConfig, integrate, solve_gamma_hitting_time


def test_cluster_summary_counts_components():
    theta = np.array([0.0, 0.01, 0.02, 2.0, 2.005, 4.0])
    cs = cluster_summary(circle_points(theta), 1e-3)
    assert cs.count == 3 and not cs.single
    assert cs.labels.tolist() == [0, 0, 0, 3, 3, 5]
    assert cs.max_intra_angle == pytest.approx(0.02, abs=1e-7)
    # chain of close neighbours is one component even if the ends are far apart
    chain = circle_points(np.arange(10) * 0.04)
    assert cluster_summary(chain, 1e-3).count == 1
    with pytest.raises(DomainError):
        cluster_summary(chain, 0.0)


@given(st.floats(0.0, 1.2), st.integers(2, 6))
def test_consensus_residual_on_symmetric_fans(half, n):
    theta = np.linspace(-half, half, n)
    assert consensus_residual(circle_points(theta)) == pytest.approx(1 - math.cos(half),
                                                                      abs=1e-12)


def test_consensus_residual_sentinel():
    assert consensus_residual(circle_points(np.array([0.0, np.pi]))) == 2.0


def test_metastable_plateaus_on_counts():
    counts = [5] * 3 + [3] * 12 + [2] * 4 + [1] * 10
    assert metastable_plateaus(counts, 10) == [(3, 3.0, 14.0)]
    assert metastable_plateaus(counts, 3) == [(3, 3.0, 14.0), (2, 15.0, 18.0)]
    tl = [ClusterSummary(0.5 * i, 1e-3, c, None, 0.0, 0.0) for i, c in enumerate(counts)]
    assert metastable_plateaus(tl, 5) == [(3, 1.5, 7.0)]


def test_exponential_rate_fit_exact():
    t = np.linspace(0, 10, 101)
    fit = fit_exponential_rate((t, 3.0 * np.exp(-0.7 * t)))
    assert fit.lam == pytest.approx(0.7, rel=1e-12) and fit.c == pytest.approx(3.0, rel=1e-10)
    assert fit.r2 == pytest.approx(1.0) and fit.converged and not fit.truncated
    t = np.linspace(0, 100, 101)
    fit = fit_exponential_rate((t, np.exp(-t)))
    assert fit.truncated and fit.lam == pytest.approx(1.0, rel=1e-9)


def test_rate_fit_on_cone_collapse():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((4, 6))
    X[:, 0] = np.abs(X[:, 0])
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    tr = integrate(X, ModelSpec("SA", beta=1.0), IntegratorConfig(t_end=20, sample_every=0.1))
    fit = fit_exponential_rate(tr, window=(8, 20))
    assert fit.lam > 0 and fit.r2 > 0.99


def test_gram_histogram_total():
    X = sample_uniform(7, 3, 0).points
    edges, counts = gram_histogram(X, bins=20)
    assert counts.sum() == 42 and len(edges) == 21
    tr = integrate(X, ModelSpec("SA", beta=1.0), IntegratorConfig(t_end=1, sample_every=0.5))
    assert gram_histogram(tr, t=0.5)[1].sum() == 42
    with pytest.raises(DomainError):
        gram_histogram(tr, t=0.3)


def test_phase_diagram_small_grid_and_boundary():
    t_grid = np.linspace(0.0, 12.0, 7)
    b_grid = np.array([0.0, 1.0])
    grid = empirical_phase_diagram(6, 12, 1e-3, t_grid, b_grid, 16, 1, threads=2, dt=0.02)
    assert grid.prob.shape == (2, 7)
    assert np.all((grid.prob >= 0) & (grid.prob <= 1))
    assert np.all(grid.prob[:, 0] == 0)
    assert np.all(grid.prob * 16 == np.round(grid.prob * 16))
    lines = grid.to_csv().splitlines()
    assert lines[0] == "beta,t,prob,reps" and len(lines) == 15
    bd = empirical_boundary(grid)
    assert [b for b, _ in bd] == [0.0, 1.0]
    pg = PhaseGrid(np.array([0.0, 1.0, 2.0]), np.array([0.0]), np.array([[0.0, 0.5, 0.9]]),
                   4, 2, 2, 1e-3, 0)
    assert empirical_boundary(pg) == [(0.0, 2.0)]
    assert curve_csv([(0.0, None)]) == "beta,t_star\n0,\n"


def test_phase_diagram_all_pairs_and_qkv_run():
    t_grid = np.array([0.0, 2.0, 4.0])
    g1 = empirical_phase_diagram(4, 6, 1e-2, t_grid, [0.5], 4, 2, threads=1, all_pairs=True)
    g2 = empirical_phase_diagram(4, 6, 1e-2, t_grid, [0.5], 4, 2, threads=1,
                                 qkv="wigner-sym:identity")
    assert g1.prob.shape == g2.prob.shape == (1, 3)


def test_phase_curve_matches_hitting_time():
    curve = phase_curve_infty(8, [0.0, 2.0], 1e-3)
    assert curve[1][1] == solve_gamma_hitting_time(2.0, 8, "SA", 0.999)
    assert curve[0][1] < curve[1][1]


def test_deviation_decreases_with_dimension():
    pts = deviation_vs_dimension(3, 1.0, 0.3, [32, 512], 20, 3)
    assert pts[0][1] > pts[1][1]
    orth = deviation_vs_dimension(3, 1.0, 0.3, [8], 3, 3, orthonormal=True)
    assert orth[0][1] < 1e-9
    assert loglog_slope([(10, 1.0), (100, 0.1)]) == pytest.approx(-1.0)


def test_fourier_coefficients_are_bessel():
    for beta in (0.0, 0.5, 3.0, 10.0, 100.0):
        assert np.allclose(fourier_coefficients_hbeta(beta, 6), iv(np.arange(7), beta),
                           rtol=1e-11)


def test_pair_correlation_normalised_and_concentrating():
    spec = ModelSpec("ANGULAR", beta=1.0)
    early = pair_correlation_circle(spec, 6, 0.0, 400, bins=16, master_seed=1)
    late = pair_correlation_circle(spec, 6, 15.0, 400, bins=16, master_seed=1)
    for pc in (early, late):
        assert np.sum(pc.density * np.diff(pc.edges)) == pytest.approx(1.0)
        assert pc.counts.sum() == 400
    assert late.mass_within(0.2) > 0.9 > early.mass_within(0.2)
    sa = pair_correlation_circle(ModelSpec("SA", beta=1.0), 6, 15.0, 100, bins=16)
    assert sa.mass_within(0.2) > 0.9
    with pytest.raises(DomainError):
        pair_correlation_circle(ModelSpec("HARDMAX"), 4, 1.0, 10)


def test_cluster_timeline_on_trajectory():
    X = sample_uniform(5, 3, 2).points
    tr = integrate(X, ModelSpec("SA", beta=0.5), IntegratorConfig(t_end=30, sample_every=1))
    tl = cluster_timeline(tr, 1e-3)
    assert len(tl) == len(tr) and tl[0].count == 5 and tl[-1].count == 1
    assert all(a.count >= b.count for a, b in zip(tl, tl[1:]))
