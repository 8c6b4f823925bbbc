"""Primitives on the unit sphere S^{d-1}: projection, retraction, sampling,
Gram matrices, hemisphere witnesses and Wendel's probability."""
from dataclasses import dataclass
from fractions import Fraction
from math import comb
from typing import Optional

import numpy as np

from . import _kernels
from ._accel import USE_NUMBA

UNIT_TOL = 1e-9


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


@dataclass(frozen=True)
class Configuration:
    """n unit vectors in R^d, stored row-wise in a read-only array."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.ndim != 2:
            raise DomainError(f"points must be an (n, d) array, got shape {pts.shape}")
        n, d = pts.shape
        if n < 1 or d < 2:
            raise DomainError(f"need n >= 1 and d >= 2, got n={n}, d={d}")
        if not np.all(np.isfinite(pts)):
            raise DomainError("points must be finite")
        err = np.max(np.abs(np.linalg.norm(pts, axis=1) - 1.0))
        if err > UNIT_TOL:
            raise DomainError(f"rows must have unit norm (max deviation {err:.3g})")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_normalized(cls, arr) -> "Configuration":
        arr = np.asarray(arr, dtype=float)
        return cls(arr / np.linalg.norm(arr, axis=1, keepdims=True))

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)

    def __len__(self):
        return self.n


def as_points(c) -> np.ndarray:
    """Return the (n, d) point array of a Configuration or array-like."""
    if isinstance(c, Configuration):
        return c.points
    return np.asarray(c, dtype=float)


def _check_unit(x, what="x"):
    nx = np.linalg.norm(x)
    if abs(nx - 1.0) > UNIT_TOL:
        raise DomainError(f"{what} must be a unit vector (norm {nx:.12g})")


def project_tangent(x, y):
    """P_x^perp y = y - <x, y> x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_unit(x)
    return y - np.dot(x, y) * x


def project_rows(X, Y):
    """Row-wise tangent projection for stacked points (..., n, d)."""
    return Y - np.sum(X * Y, axis=-1, keepdims=True) * X


def retract(x, v, h, mode="exp"):
    """Move from ``x`` along tangent vector ``v`` for time ``h``.

    ``mode="exp"`` follows the great circle (exponential map); ``"normalize"``
    returns (x + h v) / |x + h v|.  A zero velocity returns ``x`` unchanged.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if abs(np.dot(x, v)) > UNIT_TOL * max(1.0, np.linalg.norm(v)):
        raise DomainError("v must be tangent at x")
    return retract_rows(x[None, :], v[None, :], h, mode)[0]


def retract_rows(X, Vt, h, mode="exp"):
    """Row-wise retraction of stacked points X along tangent rows Vt."""
    step = h * Vt
    if mode == "exp":
        r = np.linalg.norm(step, axis=-1, keepdims=True)
        safe = np.where(r > 0.0, r, 1.0)
        out = np.cos(r) * X + np.sin(r) * (step / safe)
        out = np.where(r > 0.0, out, X)
    elif mode == "normalize":
        y = X + step
        out = y / np.linalg.norm(y, axis=-1, keepdims=True)
    else:
        raise DomainError(f"unknown retraction mode {mode!r}")
    # renormalise only rows that moved so a zero step stays bit-identical
    nrm = np.linalg.norm(out, axis=-1, keepdims=True)
    moved = np.any(step != 0.0, axis=-1, keepdims=True)
    return np.where(moved, out / nrm, out)


def sample_uniform(n, d, seed=None) -> Configuration:
    """n i.i.d. uniform points on S^{d-1} (normalized Gaussians)."""
    if n < 1 or d < 2:
        raise DomainError(f"need n >= 1 and d >= 2, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    return Configuration.from_normalized(rng.standard_normal((n, d)))


def sample_uniform_array(shape, rng):
    """Uniform points with arbitrary leading shape, last axis is d."""
    g = rng.standard_normal(shape)
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def sample_orthonormal(n, d, seed=None) -> Configuration:
    """n pairwise orthogonal unit vectors from a Haar-random frame."""
    if d < n:
        raise DomainError(f"cannot place {n} orthonormal vectors in dimension {d}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, n)))
    # sign fix makes the frame Haar distributed
    q = q * np.sign(np.diag(r))
    return Configuration(q.T)


def gram(c) -> np.ndarray:
    X = as_points(c)
    G = X @ X.T
    G = 0.5 * (G + G.T)
    np.fill_diagonal(G, 1.0)
    return G


def span_reduce(X):
    """Express points with n < d in an orthonormal basis of their span.

    Returns ``(C, B)`` with ``X = C @ B``; ``C`` is (..., n, n).  Dynamics
    whose velocities are combinations of the x_j (Q = K = I, V = +-I) keep
    the span invariant, so integrating ``C`` is exact and costs O(n^3).
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape[-2:]
    if d <= n:
        return X.copy(), None
    q, _ = np.linalg.qr(np.swapaxes(X, -1, -2))
    B = np.swapaxes(q, -1, -2)
    C = X @ np.swapaxes(B, -1, -2)
    C = C / np.linalg.norm(C, axis=-1, keepdims=True)
    return C, B


@dataclass
class HemisphereWitness:
    witness: Optional[np.ndarray]
    margin: float
    min_norm: float
    converged: bool
    iterations: int

    @property
    def exists(self) -> bool:
        return self.witness is not None


def min_norm_point(P, tol=1e-9, max_iter=None):
    """Minimum-norm point of conv(rows of P) by Wolfe's active-set method.

    Returns ``(p, weights, converged, iterations)``.
    """
    P = np.ascontiguousarray(P, dtype=float)
    m, d = P.shape
    if max_iter is None:
        max_iter = 10 * m * d
    if USE_NUMBA:
        p, w, conv, it = _kernels.min_norm_point_nb(P, float(tol), int(max_iter))
        return p, w, bool(conv), int(it)
    return min_norm_point_np(P, tol, max_iter)


def min_norm_point_np(P, tol, max_iter):
    m, d = P.shape
    scale = max(1.0, float(np.max(np.sum(P * P, axis=1))))
    S = [int(np.argmin(np.sum(P * P, axis=1)))]
    lam = np.array([1.0])
    p = P[S[0]].copy()
    it = 0
    while it < max_iter:
        it += 1
        if np.dot(p, p) <= tol * tol:
            return p, _weights(m, S, lam), True, it
        dots = P @ p
        j = int(np.argmin(dots))
        if np.dot(p, p) - dots[j] <= 1e-12 * scale or j in S:
            return p, _weights(m, S, lam), True, it
        S.append(j)
        lam = np.append(lam, 0.0)
        while True:
            it += 1
            mu = _affine_min(P[S])
            if np.all(mu > 1e-14):
                lam = mu
                p = mu @ P[S]
                break
            neg = mu <= 1e-14
            ratios = lam[neg] / (lam[neg] - mu[neg])
            theta = float(np.min(ratios))
            lam = lam + theta * (mu - lam)
            keep = lam > 1e-14
            keep[np.flatnonzero(neg)[np.argmin(ratios)]] = False
            S = [s for s, k in zip(S, keep) if k]
            lam = lam[keep]
            lam = lam / lam.sum()
            p = lam @ P[S]
            if it >= max_iter:
                break
    return p, _weights(m, S, lam), False, it


def _weights(m, S, lam):
    w = np.zeros(m)
    w[S] = lam
    return w


def _affine_min(Ps):
    k = Ps.shape[0]
    M = np.zeros((k + 1, k + 1))
    M[:k, :k] = Ps @ Ps.T
    M[:k, k] = 1.0
    M[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(M, rhs, rcond=None)[0]
    return sol[:k]


def hemisphere_witness(c, tol=1e-9, max_iter=None) -> HemisphereWitness:
    """Find w with <w, x_i> > 0 for all i, if the points share an open hemisphere.

    The direction of the minimum-norm point of the convex hull is such a w
    whenever the hull misses the origin.  A witness is only reported when its
    recomputed margin is strictly positive.
    """
    X = as_points(c)
    p, _, converged, it = min_norm_point(X, tol=tol, max_iter=max_iter)
    nrm = float(np.linalg.norm(p))
    if nrm > tol:
        w = p / nrm
        margin = float(np.min(X @ w))
        if margin > 0.0:
            return HemisphereWitness(w, margin, nrm, converged, it)
    return HemisphereWitness(None, float("nan"), nrm, converged, it)


def wendel_fraction(n, d) -> Fraction:
    """Exact probability that n uniform points on S^{d-1} share a hemisphere."""
    if n < 1 or d < 1:
        raise DomainError("need n, d >= 1")
    if d >= n:
        return Fraction(1)
    return Fraction(sum(comb(n - 1, k) for k in range(d)), 2 ** (n - 1))


def wendel_probability(n, d) -> float:
    return float(wendel_fraction(n, d))


def hemisphere_fraction(n, d, samples, seed=None, tol=1e-9):
    """Monte-Carlo estimate of the shared-hemisphere probability with its standard error."""
    if samples < 1:
        raise DomainError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    X = sample_uniform_array((samples, n, d), rng)
    hits = sum(hemisphere_witness(X[k], tol=tol).exists for k in range(samples))
    p = hits / samples
    return p, float(np.sqrt(p * (1.0 - p) / samples))


def alpha_clustered(c, alpha) -> bool:
    """True iff every pairwise inner product (i = j included) exceeds alpha."""
    if not 0.0 <= alpha < 1.0:
        raise DomainError("alpha must lie in [0, 1)")
    return bool(np.min(gram(c)) > alpha)


def max_pairwise_distance(X) -> float:
    X = as_points(X)
    G = X @ X.T
    return float(np.sqrt(max(0.0, 2.0 - 2.0 * np.min(G))))


def regular_simplex(n) -> Configuration:
    """n points in R^{n-1} with all pairwise inner products -1/(n-1)."""
    E = np.eye(n) - 1.0 / n
    # orthonormal basis of the sum-zero hyperplane
    q, _ = np.linalg.qr(E[:, : n - 1])
    return Configuration.from_normalized(E @ q)


def cross_polytope(d) -> Configuration:
    I = np.eye(d)
    return Configuration(np.vstack([I, -I]))


def circle_points(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
