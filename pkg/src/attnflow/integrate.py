"""Time integration of the particle systems and of the scalar gamma ODE.

Sphere variants use RK4 in retraction charts (classical fourth order on the
sphere); angles and R^d states use plain RK4.  SA/USA with Q = K = I and
V = +-I go through the compiled kernels, after reducing to the span of the
points when d > n.
"""
import csv
import io
import json
import math
import os
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, List, Optional

import numpy as np

from . import _kernels
from .dynamics import Coupling, ModelSpec, SPHERE_VARIANTS, EUCLIDEAN_VARIANTS, Variant, velocity
from .energy import energy_circle, energy_e0, energy_kuramoto, interaction_energy
from .geometry import (Configuration, DomainError, UNIT_TOL, as_points, circle_points,
                       project_rows, retract_rows, span_reduce)

__version__ = "0.1.0"

ENERGY_SLACK = 1e-9


class Scheme(str, Enum):
    RK4_RETRACT = "RK4_RETRACT"
    EULER_RETRACT = "EULER_RETRACT"


class Retraction(str, Enum):
    EXP_MAP = "EXP_MAP"
    NORMALIZE = "NORMALIZE"


class StepSizeWarning(UserWarning):
    """dt is large compared with the Lipschitz scale of the field."""


@dataclass(frozen=True)
class IntegratorConfig:
    scheme: Scheme = Scheme.RK4_RETRACT
    dt: float = 1e-2
    t_end: float = 10.0
    sample_every: float = 1e-1
    retraction: Retraction = Retraction.EXP_MAP
    noise_sigma: float = 0.0
    seed: int = 0
    max_steps: int = 10 ** 9
    # stop once the max pairwise distance drops below this (None: never)
    stop_tol: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "retraction", Retraction(self.retraction))
        if not self.dt > 0:
            raise DomainError("dt must be > 0")
        if self.t_end < 0:
            raise DomainError("t_end must be >= 0")
        if not self.sample_every > 0:
            raise DomainError("sample_every must be > 0")
        if self.t_end > 0 and not self.dt <= self.sample_every * (1 + 1e-12):
            raise DomainError("need dt <= sample_every")
        if self.t_end > 0 and self.sample_every > self.t_end * (1 + 1e-12):
            raise DomainError("need sample_every <= t_end")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be >= 0")
        if self.noise_sigma > 0:
            object.__setattr__(self, "scheme", Scheme.EULER_RETRACT)

    @property
    def stride(self) -> int:
        return max(1, int(round(self.sample_every / self.dt)))

    @property
    def nsteps(self) -> int:
        return int(math.ceil(self.t_end / self.dt - 1e-9))

    @property
    def exp_map(self) -> bool:
        return self.retraction == Retraction.EXP_MAP

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        d["retraction"] = self.retraction.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IntegratorConfig":
        return cls(**d)


@dataclass
class Trajectory:
    times: List[float]
    states: list
    energies: List[float]
    min_gram: List[float]
    max_offdiag_gram: List[float]
    model: ModelSpec
    integrator: IntegratorConfig
    kind: str = "sphere"
    error: Optional[str] = None
    violations: List[str] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def final(self):
        return self.states[-1]

    def points(self) -> np.ndarray:
        """(T, n, d) array of stored states (angles are embedded in R^2)."""
        arr = np.stack([np.asarray(s, dtype=float) for s in self.states])
        return circle_points(arr) if self.kind == "angles" else arr

    def __len__(self):
        return len(self.times)


def state_kind(spec: ModelSpec) -> str:
    if spec.variant in SPHERE_VARIANTS:
        return "sphere"
    if spec.variant == Variant.ANGULAR:
        return "angles"
    return "euclidean"


def _diagnostics(P, spec: ModelSpec, kind: str):
    """(energy, min Gram entry, max off-diagonal Gram entry) of a state."""
    if kind == "euclidean":
        return float("nan"), float("nan"), float("nan")
    if kind == "angles":
        theta = P
        if spec.coupling == Coupling.EXP_COS and spec.beta > 0:
            e = energy_circle(theta, spec.beta)
        else:
            e = energy_kuramoto(theta, spec.Kc)
        X = circle_points(theta)
    else:
        X = P
        e = interaction_energy(X, spec.beta) if spec.beta > 0 else energy_e0(X)
    G = X @ X.T
    n = G.shape[0]
    off = G[~np.eye(n, dtype=bool)]
    mx = float(np.max(off)) if off.size else 1.0
    return e, float(min(np.min(G), 1.0)), mx


def _max_distance(P, kind):
    if kind == "angles":
        P = circle_points(P)
    if kind == "euclidean":
        D = P[:, None, :] - P[None, :, :]
        return float(np.sqrt(np.max(np.sum(D * D, axis=-1))))
    return float(np.sqrt(max(0.0, 2.0 - 2.0 * np.min(P @ P.T))))


def energy_direction(spec: ModelSpec, noisy=False) -> int:
    """+1 / -1 when the stored energy must rise / fall, 0 when no law applies."""
    if noisy:
        return 0
    if spec.variant in (Variant.SA, Variant.USA) and spec.identity_qk and spec.V is None:
        return spec.value_sign
    if spec.variant == Variant.ANGULAR and spec.omega is None:
        return 1
    return 0


def _check_step_size(spec: ModelSpec, n, dt):
    if spec.variant in (Variant.SA, Variant.USA, Variant.QKV, Variant.MULTIHEAD):
        limit = 0.1 / (max(1.0, spec.beta) * n)
        if dt > limit and spec.variant == Variant.USA and spec.beta > 1:
            warnings.warn(f"dt={dt:g} exceeds 0.1/(max(1,beta) n)={limit:.3g}; "
                          "large-beta USA runs may be inaccurate", StepSizeWarning, stacklevel=3)


def _stepper(spec: ModelSpec, cfg: IntegratorConfig, kind: str, n: int, d: int):
    """Return ``advance(state, t, k) -> state`` doing k steps from time t."""
    dt = cfg.dt
    exp_map = cfg.exp_map
    euler = cfg.scheme == Scheme.EULER_RETRACT
    if kind == "sphere" and spec.simple_sphere:
        normalized = spec.variant == Variant.SA

        def advance(P, t, k):
            X = np.ascontiguousarray(P, dtype=float)[None].copy()
            _kernels.advance_sphere(X, spec.beta, spec.value_sign, normalized, dt, k,
                                    exp_map, euler)
            return X[0]
        return advance
    if kind == "sphere":
        mode = "exp" if exp_map else "normalize"

        def f(P):
            return velocity(P, spec)

        def advance(P, t, k):
            for _ in range(k):
                if euler:
                    P = retract_rows(P, f(P), dt, mode)
                else:
                    P = _kernels.chart_rk4_step(P, f, dt, exp_map)
            return P
        return advance
    if kind == "angles":
        expcos = spec.coupling == Coupling.EXP_COS
        omega = np.zeros(n) if spec.omega is None else spec.omega

        def advance(P, t, k):
            T = np.array(P, dtype=float)[None]
            _kernels.advance_angular(T, spec.beta, spec.Kc, omega, expcos, dt, k)
            return T[0]
        return advance

    def g(Z, t):
        return velocity(Z, spec, t)

    def advance(Z, t, k):
        for _ in range(k):
            if euler:
                Z = Z + dt * g(Z, t)
            else:
                k1 = g(Z, t)
                k2 = g(Z + 0.5 * dt * k1, t + 0.5 * dt)
                k3 = g(Z + 0.5 * dt * k2, t + 0.5 * dt)
                k4 = g(Z + dt * k3, t + dt)
                Z = Z + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
            t += dt
        return Z
    return advance


def _as_state(c0, kind):
    if kind == "sphere":
        X = as_points(c0)
        Configuration(X)  # validates the sphere constraint
        return np.array(X, dtype=float)
    return np.array(c0, dtype=float)


def integrate(c0, model: ModelSpec, cfg: IntegratorConfig = IntegratorConfig()) -> Trajectory:
    """Integrate from ``c0`` and record samples every ``cfg.sample_every``."""
    if cfg.noise_sigma > 0 or model.noise_sigma > 0:
        return integrate_with_noise(c0, model, cfg)
    kind = state_kind(model)
    P = _as_state(c0, kind)
    n = P.shape[0]
    d = P.shape[1] if P.ndim == 2 else 2
    _check_step_size(model, n, cfg.dt)
    basis = None
    if kind == "sphere" and model.simple_sphere:
        P, basis = span_reduce(P)
    advance = _stepper(model, cfg, kind, n, P.shape[-1] if P.ndim == 2 else 1)
    return _run(P, basis, advance, model, cfg, kind, noisy=False)


def _run(P, basis, advance, model, cfg, kind, noisy, step_hook=None):
    def lift(S):
        return S if basis is None else S @ basis

    traj = Trajectory([], [], [], [], [], model, cfg, kind)

    def record(step, S):
        X = lift(S)
        e, mn, mx = _diagnostics(X, model, kind)
        traj.times.append(step * cfg.dt)
        traj.states.append(Configuration(X) if kind == "sphere" else X)
        traj.energies.append(e)
        traj.min_gram.append(mn)
        traj.max_offdiag_gram.append(mx)

    record(0, P)
    step = 0
    total = min(cfg.nsteps, cfg.max_steps)
    while step < total:
        k = min(cfg.stride, total - step)
        try:
            with np.errstate(over="raise", invalid="raise"):
                Q = advance(P, step * cfg.dt, k)
        except (FloatingPointError, DomainError) as exc:
            traj.error = f"integration stopped at t={step * cfg.dt:g}: {exc}"
            break
        if not np.all(np.isfinite(Q)):
            traj.error = f"non-finite state after t={step * cfg.dt:g}"
            break
        P = Q
        step += k
        if kind == "sphere":
            drift = float(np.max(np.abs(np.linalg.norm(lift(P), axis=-1) - 1.0)))
            if drift > UNIT_TOL:
                traj.violations.append(f"sphere constraint drift {drift:.3g} at t={step * cfg.dt:g}")
                P = P / np.linalg.norm(P, axis=-1, keepdims=True)
        record(step, P)
        if cfg.stop_tol is not None and _max_distance(lift(P), kind) < cfg.stop_tol:
            traj.stopped_early = step < total
            break
    sign = energy_direction(model, noisy)
    if sign and kind != "euclidean":
        diffs = sign * np.diff(np.asarray(traj.energies))
        scale = max(1.0, float(np.max(np.abs(traj.energies))))
        bad = np.flatnonzero(diffs < -ENERGY_SLACK * scale)
        if bad.size:
            word = "decrease" if sign > 0 else "increase"
            traj.violations.append(
                f"energy {word} of {float(-diffs[bad[0]]):.3g} at t={traj.times[bad[0] + 1]:g}")
    return traj


def integrate_with_noise(c0, model: ModelSpec, cfg: IntegratorConfig) -> Trajectory:
    """Projected Euler-Maruyama on the sphere.

    Each step retracts along dt * v(x) + sigma sqrt(dt) P_x^perp xi with
    standard Gaussian xi.  With sigma = 0 this is the deterministic Euler
    scheme.  Energy monotonicity is not checked.
    """
    sigma = cfg.noise_sigma or model.noise_sigma
    if sigma == 0:
        return integrate(c0, model, replace(cfg, scheme=Scheme.EULER_RETRACT))
    kind = state_kind(model)
    if kind != "sphere":
        raise DomainError("noise is only supported for sphere variants")
    P = _as_state(c0, kind)
    rng = np.random.default_rng(cfg.seed)
    mode = "exp" if cfg.exp_map else "normalize"
    sq = sigma * math.sqrt(cfg.dt)

    def advance(X, t, k):
        for _ in range(k):
            xi = rng.standard_normal(X.shape)
            inc = cfg.dt * velocity(X, model) + sq * project_rows(X, xi)
            X = retract_rows(X, inc, 1.0, mode)
        return X
    return _run(P, None, advance, model, cfg, kind, noisy=True)


# ---------------------------------------------------------- gamma ODE ----


def _normalized(variant) -> bool:
    v = variant if isinstance(variant, Variant) else Variant(str(variant).upper())
    if v not in (Variant.SA, Variant.USA):
        raise DomainError("gamma ODE is defined for SA and USA")
    return v == Variant.SA


def _rhs(g, beta, n, normalized):
    e = math.exp(beta * (g - 1.0))
    core = 2.0 * e * (1.0 - g) * ((n - 1) * g + 1.0)
    if normalized:
        return core / (1.0 + (n - 1) * e)
    return core * math.exp(beta) / n


def gamma_rhs(g, beta, n, variant="SA"):
    """gamma' for the common inner product of initially orthonormal particles."""
    return _rhs(g, beta, n, _normalized(variant))


def _gamma_dt0(beta, n, variant):
    # stiffness near gamma = 1 is about 2 (SA) or 2 e^beta (USA)
    lip = 2.0 * (1.0 + beta) if _normalized(variant) else 2.0 * math.exp(beta) * (1.0 + beta)
    return min(1e-2, 0.25 / lip)


@dataclass
class ScalarCurve:
    times: np.ndarray
    values: np.ndarray
    beta: float
    n: int
    variant: str
    dt: float

    def value_at(self, t) -> float:
        """gamma(t), stepping from the nearest stored sample with the curve's dt."""
        if t < 0:
            raise DomainError("t must be >= 0")
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        if k >= len(self.times) - 1 and t > self.times[-1] + 1e-12:
            raise DomainError(f"t={t:g} beyond curve horizon {self.times[-1]:g}")
        k = max(0, min(k, len(self.times) - 1))
        g = float(self.values[k])
        rem = t - float(self.times[k])
        if rem <= 0:
            return g
        steps = max(1, int(math.ceil(rem / self.dt - 1e-9)))
        h = rem / steps
        for _ in range(steps):
            g = _rk4_scalar(g, h, self.beta, self.n, self.variant)
        return g


def _rk4_scalar(g, h, beta, n, variant):
    nm = _normalized(variant)
    a = _rhs(g, beta, n, nm)
    b = _rhs(g + 0.5 * h * a, beta, n, nm)
    c = _rhs(g + 0.5 * h * b, beta, n, nm)
    e = _rhs(g + h * c, beta, n, nm)
    return g + h * (a + 2.0 * b + 2.0 * c + e) / 6.0


def integrate_gamma(beta, n, variant="SA", cfg: Optional[IntegratorConfig] = None,
                    tol=1e-10, max_halvings=20) -> ScalarCurve:
    """RK4 for gamma with dt halved until two refinements agree to ``tol`` (sup norm)."""
    if n < 2:
        raise DomainError("n must be >= 2")
    if beta < 0:
        raise DomainError("beta must be >= 0")
    cfg = cfg or IntegratorConfig(t_end=20.0)
    normalized = _normalized(variant)
    variant = "SA" if normalized else "USA"
    sample = cfg.sample_every
    nsamp = int(math.ceil(cfg.t_end / sample - 1e-9))
    dt0 = min(cfg.dt, _gamma_dt0(beta, n, variant))
    stride = max(1, int(math.ceil(sample / dt0 - 1e-9)))

    def curve(stride):
        return _kernels.gamma_curve(beta, n, normalized, sample / stride, nsamp * stride, stride)

    prev = curve(stride)
    for _ in range(max_halvings):
        stride *= 2
        cur = curve(stride)
        if np.max(np.abs(cur - prev)) < tol:
            prev = cur
            break
        prev = cur
    times = np.arange(nsamp + 1) * sample
    return ScalarCurve(times, prev, float(beta), int(n), variant, sample / stride)


def _hit_time(beta, n, variant, level, dt, max_steps):
    normalized = _normalized(variant)
    k, g = _kernels.gamma_hit(beta, n, normalized, dt, level, max_steps)
    if k < 0:
        return None
    # Newton on the length s of the final partial RK4 step
    s = min(dt, max(0.0, (level - g) / gamma_rhs(g, beta, n, variant)))
    for _ in range(50):
        val = _rk4_scalar(g, s, beta, n, variant)
        step = (val - level) / gamma_rhs(val, beta, n, variant)
        s = min(dt, max(0.0, s - step))
        if abs(step) < 1e-15 * max(1.0, k * dt):
            break
    return k * dt + s


def solve_gamma_hitting_time(beta, n, variant="SA", level=0.999, t_max=1e6, tol=1e-10):
    """First t with gamma(t) = level, refined until dt-halving changes it by < tol."""
    if not 0.0 < level < 1.0:
        raise DomainError("level must lie in (0, 1)")
    if n < 2:
        raise DomainError("n must be >= 2")
    dt = _gamma_dt0(beta, n, variant)
    prev = None
    for _ in range(12):
        t = _hit_time(beta, n, variant, level, dt, int(t_max / dt) + 1)
        if t is None:
            raise DomainError(
                f"gamma did not reach {level} within horizon t_max={t_max:g} "
                f"(beta={beta}, n={n}, {variant}); raise t_max")
        if prev is not None and abs(t - prev) < tol * max(1.0, t):
            return t
        prev = t
        dt /= 2.0
    return prev


def theoretical_deviation_bound(t, beta, n, d, gamma_curve: ScalarCurve):
    """min of the short-time concentration bound and the long-time clustering bound.

    The short-time branch 2 c^{nt} sqrt(log d / d), c = e^{10 max(1, beta)},
    is evaluated in log space and returns inf when it would overflow.
    """
    if d < 2:
        raise DomainError("d must be >= 2")
    log_first = (math.log(2.0) + 10.0 * max(1.0, beta) * n * t
                 + 0.5 * math.log(math.log(d) / d))
    first = math.exp(log_first) if log_first < 700 else math.inf
    g1n = gamma_curve.value_at(1.0 / n)
    a = (1.0 - g1n * t) / (2.0 * n * math.exp(2.0 * beta))
    eb2 = math.exp(beta / 2.0)
    b = n * n * math.exp(beta) / (2.0 * (n + eb2)) - n * t / (n + eb2)
    second = (math.exp(a) if a < 700 else math.inf) + 0.5 * (math.exp(b) if b < 700 else math.inf)
    return min(first, second)


# ------------------------------------------------------------ ensembles ----


def run_seed(master_seed, index) -> np.random.SeedSequence:
    """Seed stream of run ``index``; depends only on (master_seed, index)."""
    return np.random.SeedSequence([int(master_seed), int(index)])


def run_rng(master_seed, index) -> np.random.Generator:
    return np.random.default_rng(run_seed(master_seed, index))


def default_threads() -> int:
    return os.cpu_count() or 1


def map_chunks(fn: Callable[[range], list], n_runs, threads=None, chunk=8) -> list:
    """Apply ``fn`` to fixed-size index chunks on a thread pool.

    Chunk boundaries do not depend on ``threads`` and results are
    concatenated in run-index order, so output is schedule independent.
    """
    chunks = [range(a, min(a + chunk, n_runs)) for a in range(0, n_runs, chunk)]
    threads = threads or default_threads()
    if threads <= 1 or len(chunks) <= 1:
        parts = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(fn, chunks))
    return [r for part in parts for r in part]


# ----------------------------------------------------------------- I/O ----


def atomic_write(path, text):
    """Write via a temporary file and os.replace so readers never see partial output."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(x) -> str:
    return "%.17g" % x


def trajectory_csv(traj: Trajectory) -> str:
    P = traj.points() if traj.kind != "angles" else np.stack(traj.states)[..., None]
    d = P.shape[-1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "particle"] + [f"coord{k}" for k in range(d)])
    for t, S in zip(traj.times, P):
        for i, row in enumerate(S):
            w.writerow([fmt(t), i] + [fmt(v) for v in row])
    return buf.getvalue()


def trajectory_manifest(traj: Trajectory, extra=None) -> dict:
    m = {"version": f"attnflow {__version__}", "kind": traj.kind,
         "model": traj.model.to_dict(), "integrator": traj.integrator.to_dict(),
         "seed": traj.integrator.seed, "samples": len(traj.times), "error": traj.error,
         "violations": traj.violations, "stopped_early": traj.stopped_early}
    if extra:
        m.update(extra)
    return m


def save_trajectory(traj: Trajectory, path, extra=None):
    """Write ``path`` (CSV) and ``path + '.json'`` (manifest)."""
    atomic_write(path, trajectory_csv(traj))
    atomic_write(os.fspath(path) + ".json",
                 json.dumps(trajectory_manifest(traj, extra), indent=2, sort_keys=True))


def load_trajectory(path):
    """Return (times, states (T, n, d), manifest) from a saved trajectory."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    times, states, cur, last_t = [], [], [], None
    for r in body:
        t = float(r[0])
        if last_t is None or t != last_t:
            if cur:
                states.append(cur)
            cur = []
            times.append(t)
            last_t = t
        cur.append([float(v) for v in r[2:]])
    if cur:
        states.append(cur)
    manifest = None
    if os.path.exists(os.fspath(path) + ".json"):
        with open(os.fspath(path) + ".json") as fh:
            manifest = json.load(fh)
    return np.array(times), np.array(states), manifest
