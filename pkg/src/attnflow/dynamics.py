"""Velocity fields of the self-attention particle systems.

All sphere fields accept stacked states ``(..., n, d)`` so ensembles can be
evaluated in one call.  Angular fields take ``(..., n)`` arrays of angles.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm

from .geometry import DomainError, as_points, project_rows


class Variant(str, Enum):
    SA = "SA"
    USA = "USA"
    QKV = "QKV"
    MULTIHEAD = "MULTIHEAD"
    ANGULAR = "ANGULAR"
    HARDMAX = "HARDMAX"
    EUCLIDEAN_RESCALED = "EUCLIDEAN_RESCALED"


class Coupling(str, Enum):
    EXP_COS = "EXP_COS"
    SINE = "SINE"


class TieRule(str, Enum):
    AVERAGE = "AVERAGE"
    LOWEST_INDEX = "LOWEST_INDEX"


SPHERE_VARIANTS = (Variant.SA, Variant.USA, Variant.QKV, Variant.MULTIHEAD)
EUCLIDEAN_VARIANTS = (Variant.HARDMAX, Variant.EUCLIDEAN_RESCALED)

TIE_TOL = 1e-12
MAX_EXPONENT_NORM = 700.0


@dataclass(frozen=True, eq=False)
class ModelSpec:
    variant: Variant = Variant.SA
    beta: float = 1.0
    Q: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    heads: Optional[Tuple[Tuple[np.ndarray, np.ndarray, np.ndarray], ...]] = None
    coupling: Coupling = Coupling.EXP_COS
    Kc: float = 1.0
    omega: Optional[np.ndarray] = None
    value_sign: int = 1
    noise_sigma: float = 0.0
    tie_rule: TieRule = TieRule.AVERAGE

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "coupling", Coupling(self.coupling))
        object.__setattr__(self, "tie_rule", TieRule(self.tie_rule))
        if self.beta < 0:
            raise DomainError("beta must be >= 0")
        if self.value_sign not in (1, -1):
            raise DomainError("value_sign must be +1 or -1")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be >= 0")
        for name in ("Q", "K", "V"):
            M = getattr(self, name)
            if M is not None:
                M = np.asarray(M, dtype=float)
                if M.ndim != 2 or M.shape[0] != M.shape[1]:
                    raise DomainError(f"{name} must be a square matrix")
                object.__setattr__(self, name, M)
        if self.heads is not None:
            heads = tuple(tuple(np.asarray(m, dtype=float) for m in h) for h in self.heads)
            object.__setattr__(self, "heads", heads)
        if self.variant == Variant.MULTIHEAD and not self.heads:
            raise DomainError("MULTIHEAD requires a non-empty list of heads")
        if self.omega is not None:
            object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float))

    @property
    def identity_qk(self) -> bool:
        return self.Q is None and self.K is None

    @property
    def simple_sphere(self) -> bool:
        """SA/USA with Q = K = I and V = +-I: the case the fast kernels cover."""
        return (self.variant in (Variant.SA, Variant.USA) and self.identity_qk
                and self.V is None)

    def with_beta(self, beta) -> "ModelSpec":
        return replace(self, beta=float(beta))

    def matrices(self, d):
        I = np.eye(d)
        Q = I if self.Q is None else self.Q
        K = I if self.K is None else self.K
        V = self.value_sign * I if self.V is None else self.V
        for M in (Q, K, V):
            if M.shape != (d, d):
                raise DomainError(f"matrix shape {M.shape} does not match d={d}")
        return Q, K, V

    def to_dict(self) -> dict:
        def arr(M):
            return None if M is None else np.asarray(M).tolist()
        return {
            "variant": self.variant.value, "beta": self.beta,
            "Q": arr(self.Q), "K": arr(self.K), "V": arr(self.V),
            "heads": None if self.heads is None else [[arr(m) for m in h] for h in self.heads],
            "coupling": self.coupling.value, "Kc": self.Kc, "omega": arr(self.omega),
            "value_sign": self.value_sign, "noise_sigma": self.noise_sigma,
            "tie_rule": self.tie_rule.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{k: v for k, v in d.items() if v is not None or k in ("Q", "K", "V")})


def _softmax_rows(logits):
    m = np.max(logits, axis=-1, keepdims=True)
    w = np.exp(logits - m)
    return w / np.sum(w, axis=-1, keepdims=True)


def _logits(X, Q, K, beta):
    return beta * (X @ Q.T) @ np.swapaxes(X @ K.T, -1, -2)


def attention_matrix(c, spec: ModelSpec):
    """Row-stochastic self-attention matrix; (H, n, n) for MULTIHEAD."""
    X = as_points(c)
    d = X.shape[-1]
    if spec.variant == Variant.MULTIHEAD:
        return np.stack([_softmax_rows(_logits(X, Qh, Kh, spec.beta)) for Qh, Kh, _ in spec.heads])
    if spec.variant not in (Variant.SA, Variant.QKV, Variant.USA):
        raise DomainError(f"attention matrix undefined for {spec.variant.value}")
    Q, K, _ = spec.matrices(d)
    return _softmax_rows(_logits(X, Q, K, spec.beta))


def velocity_sa(c, spec: ModelSpec):
    """P_{x_i}^perp( sum_j A_ij V x_j ), with A the softmax attention."""
    X = as_points(c)
    Q, K, V = spec.matrices(X.shape[-1])
    A = _softmax_rows(_logits(X, Q, K, spec.beta))
    return project_rows(X, A @ (X @ V.T))


def velocity_usa(c, spec: ModelSpec):
    """P_{x_i}^perp( (1/n) sum_j e^{beta <x_i, x_j>} V x_j ).

    The common factor e^beta is pulled out of the exponent so that the
    largest exponent is 0 and nothing overflows.
    """
    X = as_points(c)
    n, d = X.shape[-2:]
    beta = spec.beta
    Q, K, V = spec.matrices(d)
    logits = _logits(X, Q, K, beta)
    shift = beta if spec.identity_qk else np.max(logits, axis=-1, keepdims=True)
    W = np.exp(logits - shift) / n
    return np.exp(shift) * project_rows(X, W @ (X @ V.T))


def velocity_multihead(c, spec: ModelSpec):
    X = as_points(c)
    total = np.zeros_like(X)
    for Qh, Kh, Vh in spec.heads:
        A = _softmax_rows(_logits(X, Qh, Kh, spec.beta))
        total = total + A @ (X @ Vh.T)
    return project_rows(X, total)


def velocity_angular(theta, spec: ModelSpec):
    """Angle velocities on the circle.

    EXP_COS: -(1/n) sum_j e^{beta cos(t_i - t_j)} sin(t_i - t_j)
    SINE:    omega_i + (Kc/n) sum_j sin(t_j - t_i)
    """
    theta = np.asarray(theta, dtype=float)
    n = theta.shape[-1]
    diff = theta[..., :, None] - theta[..., None, :]
    if spec.coupling == Coupling.EXP_COS:
        vel = -np.sum(np.exp(spec.beta * np.cos(diff)) * np.sin(diff), axis=-1) / n
    else:
        vel = -spec.Kc * np.sum(np.sin(diff), axis=-1) / n
    if spec.omega is not None:
        vel = vel + spec.omega
    return vel


def argmax_sets(Z, Q, K, tie_tol=TIE_TOL):
    """C_i = { j : <Q z_i, K z_j> within tie_tol of the row maximum }."""
    S = (Z @ Q.T) @ (Z @ K.T).T
    m = np.max(S, axis=1, keepdims=True)
    tol = tie_tol * np.maximum(1.0, np.abs(m))
    return S >= m - tol


def velocity_hardmax(z, spec: ModelSpec, tie_tol=TIE_TOL):
    """Hardmax (beta = infinity) field on R^d.

    Under AVERAGE the field is the mean attraction toward the other members
    of the argmax set C_i (i itself only counts when C_i = {i}, giving zero
    velocity); LOWEST_INDEX keeps only min C_i.
    """
    Z = np.asarray(z, dtype=float)
    Q, K, V = spec.matrices(Z.shape[1])
    C = argmax_sets(Z, Q, K, tie_tol)
    n = C.shape[0]
    others = C & ~np.eye(n, dtype=bool)
    C = np.where(others.any(axis=1, keepdims=True), others, C)
    if spec.tie_rule == TieRule.LOWEST_INDEX:
        first = np.argmax(C, axis=1)
        C = np.zeros_like(C)
        C[np.arange(len(first)), first] = True
    W = C / np.sum(C, axis=1, keepdims=True)
    return (W @ Z - Z) @ V.T


def matrix_exponential(M, t):
    M = np.asarray(M, dtype=float)
    if abs(t) * np.linalg.norm(M, ord=np.inf) > MAX_EXPONENT_NORM:
        raise DomainError(
            f"|tV| = {abs(t) * np.linalg.norm(M, ord=np.inf):.1f} is too large for a stable "
            "matrix exponential; shorten the time horizon")
    return expm(t * M)


def velocity_euclidean_rescaled(z, t, spec: ModelSpec):
    """z_i' = sum_j softmax_j(beta <Q e^{tV} z_i, K e^{tV} z_j>) V (z_j - z_i)."""
    Z = np.asarray(z, dtype=float)
    Q, K, V = spec.matrices(Z.shape[-1])
    E = matrix_exponential(V, t)
    A = _softmax_rows(_logits(Z, Q @ E, K @ E, spec.beta))
    return (A @ Z - Z) @ V.T


def velocity(state, spec: ModelSpec, t=0.0):
    """Dispatch to the field matching ``spec.variant``."""
    v = spec.variant
    if v in (Variant.SA, Variant.QKV):
        return velocity_sa(state, spec)
    if v == Variant.USA:
        return velocity_usa(state, spec)
    if v == Variant.MULTIHEAD:
        return velocity_multihead(state, spec)
    if v == Variant.ANGULAR:
        return velocity_angular(state, spec)
    if v == Variant.HARDMAX:
        return velocity_hardmax(state, spec)
    if v == Variant.EUCLIDEAN_RESCALED:
        return velocity_euclidean_rescaled(state, t, spec)
    raise DomainError(f"unknown variant {v}")


def angular_to_tangent(theta, thetadot):
    """Map angle velocities to R^2 tangent vectors along (-sin, cos)."""
    theta = np.asarray(theta, dtype=float)
    return np.asarray(thetadot)[..., None] * np.stack([-np.sin(theta), np.cos(theta)], axis=-1)


def random_qkv(d, kind, seed, v_kind="identity"):
    """Seeded random (Q, K, V) presets for general-matrix phase diagrams.

    ``kind``: identity | ginibre | wigner-sym.  ``v_kind``: identity |
    equalsQK | gaussian-PSD.  Entries have variance 1/d.
    """
    rng = np.random.default_rng(seed)
    s = 1.0 / np.sqrt(d)
    I = np.eye(d)
    if kind == "identity":
        Q, K = I, I
    elif kind == "ginibre":
        Q = s * rng.standard_normal((d, d))
        K = s * rng.standard_normal((d, d))
    elif kind == "wigner-sym":
        G = s * rng.standard_normal((d, d))
        Q, K = I, (G + G.T) / np.sqrt(2.0)
    else:
        raise DomainError(f"unknown qkv kind {kind!r}")
    if v_kind == "identity":
        V = I
    elif v_kind == "equalsQK":
        V = Q.T @ K
    elif v_kind == "gaussian-PSD":
        G = s * rng.standard_normal((d, d))
        V = G @ G.T
    else:
        raise DomainError(f"unknown value-matrix kind {v_kind!r}")
    return Q, K, V
