"""Interaction energies, their gradients and Hessians, and landscape tests."""
from dataclasses import dataclass
from enum import Enum
from itertools import combinations_with_replacement
from math import prod
from typing import List, Union

import numpy as np

from .dynamics import ModelSpec, Variant, velocity_sa, velocity_usa
from .geometry import Configuration, DomainError, as_points, project_rows

EIG_TOL = 1e-7
GRAD_TOL = 1e-9
DISTINCT_TOL = 1e-9
DESIGN_TOL = 1e-9


def _check_beta(beta):
    if not beta > 0:
        raise DomainError("beta must be > 0 (use energy_e0 for beta = 0)")


def interaction_energy(c, beta, shifted=False):
    """(1/(2 beta n^2)) sum_ij e^{beta <x_i, x_j>}.

    ``shifted=True`` uses e^{beta <x_i, x_j>} - 1 instead; the gradient is
    the same, only the additive constant changes.
    """
    _check_beta(beta)
    X = as_points(c)
    n = X.shape[0]
    G = X @ X.T
    if shifted:
        return float(np.sum(np.expm1(beta * G)) / (2.0 * beta * n * n))
    # factor e^beta out so that large beta does not overflow early
    return float(np.exp(beta) * np.sum(np.exp(beta * (G - 1.0))) / (2.0 * beta * n * n))


def energy_e0(c):
    """beta = 0 energy (1/n) |sum_i x_i|^2."""
    X = as_points(c)
    s = np.sum(X, axis=0)
    return float(s @ s / X.shape[0])


def energy_circle(theta, beta):
    _check_beta(beta)
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    C = np.cos(theta[:, None] - theta[None, :])
    return float(np.exp(beta) * np.sum(np.exp(beta * (C - 1.0))) / (2.0 * beta * n * n))


def energy_kuramoto(theta, Kc=1.0):
    """(Kc / 2n^2) sum_ij cos(theta_i - theta_j) = (Kc / 2n^2) |sum_k e^{i theta_k}|^2."""
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    z = np.sum(np.exp(1j * theta))
    return float(Kc * (z.real ** 2 + z.imag ** 2) / (2.0 * n * n))


def config_energy_repulsive(c, beta):
    """Energy written through distances: (e^beta / 2 n^2 beta) sum e^{-beta |x - x'|^2 / 2}."""
    _check_beta(beta)
    X = as_points(c)
    n = X.shape[0]
    D2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    return float(np.exp(beta) * np.sum(np.exp(-0.5 * beta * D2)) / (2.0 * n * n * beta))


def gradient_standard(c, beta):
    """Riemannian gradient of the interaction energy, one tangent row per particle.

    At beta = 0 the same formula is the gradient of E_0 / (2n).
    """
    if beta < 0:
        raise DomainError("beta must be >= 0")
    X = as_points(c)
    n = X.shape[0]
    W = np.exp(beta * (X @ X.T - 1.0))
    return np.exp(beta) * project_rows(X, W @ X) / (n * n)


def modified_metric_check(c, beta):
    """max_i | Z_i v_i - n^2 grad_i | with v the SA field and Z_i = sum_k e^{beta <x_i, x_k>}.

    Zero (to round-off) says SA is the gradient flow of the energy in the
    metric weighted by the partition functions.
    """
    X = as_points(c)
    n = X.shape[0]
    v = velocity_sa(X, ModelSpec(Variant.SA, beta=beta))
    Z = np.sum(np.exp(beta * (X @ X.T)), axis=1)
    res = Z[:, None] * v - n * n * gradient_standard(X, beta)
    return float(np.max(np.linalg.norm(res, axis=1)))


def dissipation_rate(c, beta, variant=Variant.SA):
    """|dE/dt| along SA or USA with V = +-I; always >= 0.

    SA:  (1/n) sum_i Zbar_i |v_i|^2 with Zbar_i = (1/n) sum_k e^{beta <x_i, x_k>}
    USA: (1/n) sum_i |v_i|^2
    """
    variant = Variant(variant)
    X = as_points(c)
    n = X.shape[0]
    spec = ModelSpec(variant, beta=beta)
    if variant == Variant.SA:
        v = velocity_sa(X, spec)
        Zbar = np.sum(np.exp(beta * (X @ X.T)), axis=1) / n
        return float(np.sum(Zbar * np.sum(v * v, axis=1)) / n)
    if variant == Variant.USA:
        v = velocity_usa(X, spec)
        return float(np.sum(v * v) / n)
    raise DomainError("dissipation_rate is defined for SA and USA only")


# ------------------------------------------------------------ saddles ----


def g_function(zeta, beta, d=2):
    """e^{beta cos z} ((d - 1) cos z - beta sin^2 z)."""
    if d < 2:
        raise DomainError("d must be >= 2")
    zeta = np.asarray(zeta, dtype=float)
    out = np.exp(beta * np.cos(zeta)) * ((d - 1) * np.cos(zeta) - beta * np.sin(zeta) ** 2)
    return float(out) if out.ndim == 0 else out


def tau_star(beta, d=2, tol=1e-12):
    """Root of beta sin^2(t) = (d - 1) cos(t) on [0, pi/2), by bisection."""
    _check_beta(beta)
    if d < 2:
        raise DomainError("d must be >= 2")
    lo, hi = 0.0, np.pi / 2
    # f is increasing on [0, pi/2]: f(0) = -(d-1) < 0, f(pi/2) = beta > 0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if beta * np.sin(mid) ** 2 - (d - 1) * np.cos(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def circle_gradient(theta, beta):
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    U = theta[:, None] - theta[None, :]
    return -np.sum(np.exp(beta * np.cos(U)) * np.sin(U), axis=1) / (n * n)


def circle_hessian(theta, beta):
    """Analytic Hessian of energy_circle in the angle coordinates."""
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    H = g_function(theta[:, None] - theta[None, :], beta, 2) / (n * n)
    np.fill_diagonal(H, 0.0)
    H[np.diag_indices(n)] = -np.sum(H, axis=1)
    return 0.5 * (H + H.T)


def tangent_frames(X):
    """(n, d-1, d) orthonormal tangent bases, by Gram-Schmidt against each x_i."""
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    F = np.empty((n, d - 1, d))
    for i in range(n):
        # completing [x_i, e_1..e_d] via QR gives the orthogonal complement
        q, _ = np.linalg.qr(np.column_stack([X[i], np.eye(d)]))
        q = q[:, 1:d] * np.sign(np.dot(q[:, 0], X[i]))
        F[i] = q.T
    return F


def _exp_step(X, F, s):
    """Displacement exp_x(V) - x, formed without cancellation."""
    n = X.shape[0]
    V = np.einsum("ia,iad->id", s.reshape(n, -1), F)
    r = np.linalg.norm(V, axis=1, keepdims=True)
    safe = np.where(r > 0.0, r, 1.0)
    return -2.0 * np.sin(0.5 * r) ** 2 * X + np.sin(r) * V / safe


def hessian_fd(c, beta, h=1e-4):
    """Hessian of the interaction energy on the product of tangent spaces.

    Central second differences along exp-map geodesics, in per-particle
    orthonormal frames; size n(d-1).  For d = 2 the frame is (-sin, cos),
    so the result is directly comparable with circle_hessian.  Energy
    differences are accumulated from the displacements directly, which
    keeps round-off at the level of h^2 * eps instead of eps.
    """
    if not 1e-6 <= h <= 1e-3:
        raise DomainError("h must lie in [1e-6, 1e-3]")
    X = as_points(c)
    n, d = X.shape
    F = tangent_frames(X)
    if d == 2:
        F = np.stack([-X[:, 1], X[:, 0]], axis=1)[:, None, :]
    m = n * (d - 1)
    W0 = np.exp(beta * (X @ X.T))
    scale = 1.0 / (2.0 * beta * n * n)

    def dE(s):
        D = _exp_step(X, F, s)
        dG = D @ X.T + X @ D.T + D @ D.T
        return scale * float(np.sum(W0 * np.expm1(beta * dG)))

    H = np.empty((m, m))
    I = np.eye(m) * h
    for a in range(m):
        H[a, a] = (dE(I[a]) + dE(-I[a])) / (h * h)
        for b in range(a + 1, m):
            H[a, b] = (dE(I[a] + I[b]) - dE(I[a] - I[b]) - dE(I[b] - I[a])
                       + dE(-I[a] - I[b])) / (4.0 * h * h)
            H[b, a] = H[a, b]
    return 0.5 * (H + H.T)


class Classification(str, Enum):
    LOCAL_MAX_CANDIDATE = "LOCAL_MAX_CANDIDATE"
    STRICT_SADDLE = "STRICT_SADDLE"
    INCONCLUSIVE = "INCONCLUSIVE"


@dataclass
class LandscapeReport:
    config: Union[Configuration, np.ndarray]
    grad_norm: float
    hessian_eigs: List[float]
    classification: Classification
    beta: float
    note: str = ""

    def to_dict(self):
        cfg = np.asarray(self.config).tolist()
        return {"config": cfg, "grad_norm": self.grad_norm, "hessian_eigs": self.hessian_eigs,
                "classification": self.classification.value, "beta": self.beta,
                "note": self.note}


def classify_critical_point(state, beta, grad_tol=GRAD_TOL, eig_tol=EIG_TOL, h=1e-4):
    """Classify a critical point of the interaction energy (a maximisation problem).

    A 1-d array is read as angles on the circle (analytic Hessian); otherwise
    as a configuration (finite-difference Hessian).
    """
    _check_beta(beta)
    arr = state.points if isinstance(state, Configuration) else np.asarray(state, dtype=float)
    if arr.ndim == 1:
        grad_norm = float(np.linalg.norm(circle_gradient(arr, beta)))
        H = circle_hessian(arr, beta)
    else:
        grad_norm = float(np.linalg.norm(gradient_standard(arr, beta)))
        H = hessian_fd(arr, beta, h)
    eigs = sorted(float(e) for e in np.linalg.eigvalsh(H))
    if grad_norm >= grad_tol:
        return LandscapeReport(state, grad_norm, eigs, Classification.INCONCLUSIVE, beta,
                               f"gradient norm {grad_norm:.3g} >= grad_tol {grad_tol:.1g}")
    if eigs[-1] > eig_tol:
        cls = Classification.STRICT_SADDLE
    elif eigs[-1] < eig_tol:
        cls = Classification.LOCAL_MAX_CANDIDATE
    else:
        cls = Classification.INCONCLUSIVE
    return LandscapeReport(state, grad_norm, eigs, cls, beta)


# ------------------------------------------------------------- designs ----


def _double_factorial(k):
    return prod(range(k, 0, -2)) if k > 0 else 1


def sphere_monomial_moment(exponents, d=None):
    """E[prod x_i^{a_i}] for x uniform on S^{d-1}."""
    a = [int(e) for e in exponents]
    d = len(a) if d is None else d
    if d < 2 or len(a) != d or min(a) < 0:
        raise DomainError("need d >= 2 and d nonnegative exponents")
    if any(e % 2 for e in a):
        return 0.0
    K = sum(a) // 2
    num = prod(_double_factorial(e - 1) for e in a)
    den = prod(d + 2 * j for j in range(K))
    return num / den


@dataclass
class DesignTestResult:
    degree: int
    max_discrepancy: float
    passed: bool
    distinct_inner_products: int


def distinct_inner_products(c, tol=DISTINCT_TOL):
    X = as_points(c)
    n = X.shape[0]
    vals = np.sort((X @ X.T)[np.triu_indices(n, 1)])
    if vals.size == 0:
        return 0
    return int(1 + np.sum(np.diff(vals) > tol))


def design_test(c, t, tol=DESIGN_TOL):
    """Compare empirical monomial moments up to degree t with the sphere's."""
    if t < 1:
        raise DomainError("degree must be >= 1")
    X = as_points(c)
    n, d = X.shape
    worst = 0.0
    for deg in range(1, t + 1):
        for combo in combinations_with_replacement(range(d), deg):
            a = np.bincount(combo, minlength=d)
            emp = float(np.mean(np.prod(X ** a, axis=1)))
            worst = max(worst, abs(emp - sphere_monomial_moment(a, d)))
    return DesignTestResult(t, worst, worst < tol, distinct_inner_products(X))
