import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnflow.dynamics import (ModelSpec, Variant, angular_to_tangent, argmax_sets,
                               attention_matrix, matrix_exponential, random_qkv, velocity,
                               velocity_euclidean_rescaled, velocity_hardmax)
from attnflow.geometry import DomainError, circle_points, sample_uniform

seeds = st.integers(0, 2 ** 32 - 1)


def loop_sa(X, beta, V=None):
    """Plain double loop of the softmax field, used as an oracle."""
    n, d = X.shape
    V = np.eye(d) if V is None else V
    out = np.zeros_like(X)
    for i in range(n):
        w = [math.exp(beta * float(X[i] @ X[j])) for j in range(n)]
        s = sum(w)
        y = sum(w[j] / s * (V @ X[j]) for j in range(n))
        out[i] = y - (y @ X[i]) * X[i]
    return out


def loop_usa(X, beta):
    n = X.shape[0]
    out = np.zeros_like(X)
    for i in range(n):
        y = sum(math.exp(beta * float(X[i] @ X[j])) * X[j] for j in range(n)) / n
        out[i] = y - (y @ X[i]) * X[i]
    return out


def test_spec_validation():
    with pytest.raises(DomainError):
        ModelSpec("SA", beta=-1)
    with pytest.raises(DomainError):
        ModelSpec("SA", value_sign=2)
    with pytest.raises(DomainError):
        ModelSpec("MULTIHEAD")
    with pytest.raises(ValueError):
        ModelSpec("NOPE")
    s = ModelSpec("QKV", beta=2.0, Q=np.eye(3), K=2 * np.eye(3))
    r = ModelSpec.from_dict(s.to_dict())
    assert r.variant == Variant.QKV and np.array_equal(r.K, s.K)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(2, 5), st.floats(0.0, 8.0), seeds)
def test_sa_and_usa_match_loops(n, d, beta, seed):
    X = sample_uniform(n, d, seed).points
    assert np.allclose(velocity(X, ModelSpec("SA", beta=beta)), loop_sa(X, beta), atol=1e-12)
    ref = loop_usa(X, beta)
    got = velocity(X, ModelSpec("USA", beta=beta))
    assert np.allclose(got, ref, atol=1e-12 * max(1.0, math.exp(beta)))


@given(st.integers(2, 6), st.integers(2, 5), st.floats(0.0, 50.0), seeds)
def test_velocity_is_tangent(n, d, beta, seed):
    X = sample_uniform(n, d, seed).points
    v = velocity(X, ModelSpec("SA", beta=beta))
    assert np.allclose(np.sum(v * X, axis=1), 0.0, atol=1e-12)


def test_attention_is_row_stochastic_and_stable():
    X = sample_uniform(6, 3, 0).points
    A = attention_matrix(X, ModelSpec("SA", beta=500.0))
    assert np.all(np.isfinite(A)) and np.allclose(A.sum(axis=1), 1.0)
    assert np.allclose(np.diag(A), 1.0, atol=1e-6)  # self-attention dominates at large beta


def test_value_sign_flips_the_field():
    X = sample_uniform(5, 3, 2).points
    a = velocity(X, ModelSpec("SA", beta=1.5))
    b = velocity(X, ModelSpec("SA", beta=1.5, value_sign=-1))
    assert np.allclose(a, -b)


def test_qkv_matches_loop_with_general_value():
    X = sample_uniform(5, 3, 4).points
    Q, K, V = random_qkv(3, "ginibre", 1, "gaussian-PSD")
    spec = ModelSpec("QKV", beta=1.0, Q=Q, K=K, V=V)
    n = 5
    ref = np.zeros_like(X)
    for i in range(n):
        w = np.array([math.exp(float((Q @ X[i]) @ (K @ X[j]))) for j in range(n)])
        y = (w / w.sum()) @ (X @ V.T)
        ref[i] = y - (y @ X[i]) * X[i]
    assert np.allclose(velocity(X, spec), ref, atol=1e-12)


def test_multihead_single_head_equals_sa():
    X = sample_uniform(5, 3, 7).points
    I = np.eye(3)
    mh = ModelSpec("MULTIHEAD", beta=2.0, heads=[(I, I, I)])
    assert np.allclose(velocity(X, mh), velocity(X, ModelSpec("SA", beta=2.0)))
    two = ModelSpec("MULTIHEAD", beta=2.0, heads=[(I, I, I), (I, I, I)])
    assert np.allclose(velocity(X, two), 2 * velocity(X, ModelSpec("SA", beta=2.0)))


@given(st.integers(2, 8), st.floats(0.0, 6.0), seeds)
def test_angular_field_is_usa_on_circle(n, beta, seed):
    theta = np.random.default_rng(seed).uniform(0, 2 * np.pi, n)
    X = circle_points(theta)
    v_ang = velocity(theta, ModelSpec("ANGULAR", beta=beta))
    v_usa = velocity(X, ModelSpec("USA", beta=beta))
    assert np.allclose(angular_to_tangent(theta, v_ang), v_usa, atol=1e-12 * math.exp(beta))


def test_kuramoto_sine_coupling():
    theta = np.array([0.0, 0.5, 2.0])
    spec = ModelSpec("ANGULAR", coupling="SINE", Kc=2.0, omega=np.array([0.1, 0.0, -0.1]))
    ref = spec.omega + 2.0 / 3 * np.array([sum(math.sin(b - a) for b in theta) for a in theta])
    assert np.allclose(velocity(theta, spec), ref)


def test_hardmax_selection_example():
    z = np.array([[1.0, 1.0], [-1.0, 1.0], [0.0, 0.0]])
    v = velocity_hardmax(z, ModelSpec("HARDMAX"))
    assert np.array_equal(v[:2], np.zeros((2, 2)))
    assert np.allclose(v[2], [0.0, 1.0])
    low = velocity_hardmax(z, ModelSpec("HARDMAX", tie_rule="LOWEST_INDEX"))
    assert np.allclose(low[2], [1.0, 1.0])
    assert np.array_equal(velocity_hardmax(np.array([[0.3, -2.0]]), ModelSpec("HARDMAX")),
                          np.zeros((1, 2)))
    C = argmax_sets(z, np.eye(2), np.eye(2))
    assert C[2].tolist() == [True, True, True]


def test_hardmax_is_large_beta_limit():
    rng = np.random.default_rng(5)
    Z = 3.0 * rng.standard_normal((6, 3))
    top = np.sort(Z @ Z.T, axis=1)
    assert np.min(top[:, -1] - top[:, -2]) > 0.3
    soft = velocity_euclidean_rescaled(Z, 0.0, ModelSpec("EUCLIDEAN_RESCALED", beta=800.0))
    assert np.allclose(soft, velocity_hardmax(Z, ModelSpec("HARDMAX")), atol=1e-12)


def test_matrix_exponential_guard():
    assert np.allclose(matrix_exponential(np.eye(2), 1.0), math.e * np.eye(2))
    with pytest.raises(DomainError):
        matrix_exponential(np.eye(2), 701.0)


def test_random_qkv_presets():
    Q, K, V = random_qkv(4, "wigner-sym", 3, "equalsQK")
    assert np.allclose(K, K.T) and np.allclose(V, Q.T @ K)
    a, b = random_qkv(4, "ginibre", 3), random_qkv(4, "ginibre", 3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(DomainError):
        random_qkv(4, "bad", 0)
