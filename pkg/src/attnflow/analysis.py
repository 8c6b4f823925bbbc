"""Clustering diagnostics, rate fits, histograms and Monte-Carlo studies."""
import csv
import io
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import gammaln

from . import _kernels
from .dynamics import ModelSpec, Variant, velocity_sa
from .geometry import (DomainError, as_points, circle_points, sample_orthonormal,
                       sample_uniform_array, span_reduce)
from .integrate import (IntegratorConfig, Trajectory, fmt, integrate_gamma,
                        map_chunks, run_rng, solve_gamma_hitting_time)

RESIDUAL_SENTINEL = 2.0
MEAN_TOL = 1e-9


# ----------------------------------------------------------- clusters ----


@dataclass
class ClusterSummary:
    time: float
    delta: float
    count: int
    labels: np.ndarray
    max_intra_angle: float
    residual: float

    @property
    def single(self) -> bool:
        return self.count == 1


def _components(adj):
    """Union-find labels; each label is the smallest index of its component."""
    n = adj.shape[0]
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    I, J = np.nonzero(np.triu(adj, 1))
    for i, j in zip(I.tolist(), J.tolist()):
        a, b = find(i), find(j)
        if a != b:
            parent[max(a, b)] = min(a, b)
    return np.array([find(i) for i in range(n)])


def consensus_residual(X) -> float:
    """1 - min_i <x_i, xbar> for the normalized mean xbar; 2 if the mean vanishes."""
    X = np.asarray(X, dtype=float)
    m = np.sum(X, axis=0)
    nm = np.linalg.norm(m)
    if nm < MEAN_TOL * X.shape[0]:
        return RESIDUAL_SENTINEL
    w = m / nm
    # |x - w|^2 / 2 avoids the cancellation in 1 - <x, w>
    return float(np.max(np.sum((X - w) ** 2, axis=1)) / 2.0)


def cluster_summary(c, delta, time=0.0) -> ClusterSummary:
    """Clusters are connected components of the graph {<x_i, x_j> >= 1 - delta}."""
    if not 0.0 < delta < 1.0:
        raise DomainError("delta must lie in (0, 1)")
    X = as_points(c)
    G = np.clip(X @ X.T, -1.0, 1.0)
    labels = _components(G >= 1.0 - delta)
    same = labels[:, None] == labels[None, :]
    max_angle = float(np.max(np.arccos(G[same]))) if np.any(same) else 0.0
    return ClusterSummary(float(time), delta, int(np.unique(labels).size), labels,
                          max_angle, consensus_residual(X))


def cluster_timeline(traj: Trajectory, delta) -> List[ClusterSummary]:
    if traj.kind == "euclidean":
        raise DomainError("cluster timelines need sphere or angle trajectories")
    P = traj.points()
    return [cluster_summary(X, delta, t) for t, X in zip(traj.times, P)]


def metastable_plateaus(timeline, min_duration, times=None) -> List[Tuple[int, float, float]]:
    """Maximal runs of constant cluster count >= 2 lasting at least ``min_duration``.

    ``timeline`` is a list of ClusterSummary or of plain counts; with plain
    counts ``times`` defaults to 0, 1, 2, ...
    """
    if timeline and isinstance(timeline[0], ClusterSummary):
        counts = [s.count for s in timeline]
        times = [s.time for s in timeline]
    else:
        counts = list(timeline)
        times = list(range(len(counts))) if times is None else list(times)
    out = []
    i = 0
    while i < len(counts):
        j = i
        while j + 1 < len(counts) and counts[j + 1] == counts[i]:
            j += 1
        if counts[i] >= 2 and times[j] - times[i] >= min_duration:
            out.append((int(counts[i]), float(times[i]), float(times[j])))
        i = j + 1
    return out


# --------------------------------------------------------- rate fits ----


@dataclass
class RateFit:
    lam: float
    c: float
    r2: float
    window: Tuple[float, float]
    truncated: bool = False
    converged: bool = True


UNDERFLOW = 1e-15


def fit_exponential_rate(traj, window=None) -> RateFit:
    """Least-squares line through (t, log residual); the rate is minus the slope.

    ``traj`` is a Trajectory or a pair (times, residuals).  Samples whose
    residual has underflowed below 1e-15 end the window early.
    """
    if isinstance(traj, Trajectory):
        times = np.asarray(traj.times)
        res = np.array([consensus_residual(X) for X in traj.points()])
    else:
        times, res = (np.asarray(a, dtype=float) for a in traj)
    lo, hi = window if window is not None else (times[0], times[-1])
    mask = (times >= lo - 1e-12) & (times <= hi + 1e-12)
    t, r = times[mask], res[mask]
    truncated = False
    small = np.flatnonzero(r < UNDERFLOW)
    if small.size:
        t, r = t[: small[0]], r[: small[0]]
        truncated = True
    if t.size < 3:
        raise DomainError("fewer than 3 usable samples in the fit window")
    y = np.log(r)
    A = np.column_stack([t, np.ones_like(t)])
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - (slope * t + icpt)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 1e-300 else 0.0
    lam = float(-slope)
    converged = lam > 1e-12 and r2 > 0.5
    return RateFit(lam, float(math.exp(icpt)), float(max(0.0, min(1.0, r2))),
                   (float(t[0]), float(t[-1])), truncated, converged)


def cone_radius(X, w) -> float:
    """r = min_i <x_i, w>."""
    return float(np.min(np.asarray(X) @ w))


# ------------------------------------------------------------ histograms ----


def gram_histogram(traj_or_config, t=None, bins=200):
    """Counts of off-diagonal Gram entries over uniform bins on [-1, 1].

    Returns ``(edges, counts)``; counts sum to n(n-1).
    """
    if isinstance(traj_or_config, Trajectory):
        times = np.asarray(traj_or_config.times)
        t = times[-1] if t is None else t
        k = int(np.argmin(np.abs(times - t)))
        if abs(times[k] - t) > 1e-9:
            raise DomainError(f"t={t:g} is not a stored sample")
        X = traj_or_config.points()[k]
    else:
        X = as_points(traj_or_config)
    n = X.shape[0]
    G = np.clip(X @ X.T, -1.0, 1.0)
    vals = G[~np.eye(n, dtype=bool)]
    counts, edges = np.histogram(vals, bins=bins, range=(-1.0, 1.0))
    return edges, counts


# ---------------------------------------------------------- phase diagram ----


@dataclass
class PhaseGrid:
    t_grid: np.ndarray
    beta_grid: np.ndarray
    prob: np.ndarray
    reps: int
    n: int
    d: int
    delta: float
    seed: int
    dt: float = 1e-2
    qkv: Optional[str] = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["beta", "t", "prob", "reps"])
        for i, b in enumerate(self.beta_grid):
            for j, t in enumerate(self.t_grid):
                w.writerow([fmt(b), fmt(t), fmt(self.prob[i, j]), self.reps])
        return buf.getvalue()


def _grid_schedule(t_grid, dt):
    """(steps, h) per grid interval: equal sub-steps h <= dt landing on each t."""
    sched = []
    prev = 0.0
    for t in t_grid:
        gap = float(t) - prev
        k = int(math.ceil(gap / dt - 1e-9)) if gap > 0 else 0
        sched.append((k, gap / k if k else 0.0))
        prev = float(t)
    return sched


def _phase_initial(n, d, master_seed, rep):
    X = sample_uniform_array((n, d), run_rng(master_seed, rep))
    C, _ = span_reduce(X)
    return C


def _settled(C, delta):
    """Cone test: r = min <x_i, w> with w the normalized mean never decreases, and
    <x_i, x_j> >= 2 r^2 - 1, so 2 r^2 - 1 >= 1 - delta fixes every pair for good."""
    m = np.sum(C, axis=-2)
    nm = np.linalg.norm(m, axis=-1, keepdims=True)
    w = m / np.where(nm > 0, nm, 1.0)
    r = np.min(np.einsum("rnd,rd->rn", C, w), axis=-1)
    return (nm[..., 0] > 0) & (r > 0) & (2.0 * r * r - 1.0 >= 1.0 - delta)


def empirical_phase_diagram(n, d, delta, t_grid, beta_grid, reps, master_seed, threads=None,
                            dt=1e-2, chunk=8, qkv=None, all_pairs=False) -> PhaseGrid:
    """P(<x_1(t), x_2(t)> >= 1 - delta) for SA from uniform starts, over a (beta, t) grid.

    Run ``r`` uses the same seeded initial configuration in every beta row.
    Runs are stopped once the cone test proves all pairs clustered for good.
    ``qkv`` selects a random (Q, K, V) preset (``kind`` or ``kind:v_kind``),
    drawn once from the master seed; those runs use the generic integrator.
    ``all_pairs`` averages the indicator over all ordered pairs i != j
    instead of the pair (1, 2).
    """
    t_grid = np.asarray(t_grid, dtype=float)
    beta_grid = np.asarray(beta_grid, dtype=float)
    if reps < 1:
        raise DomainError("reps must be >= 1")
    if np.any(np.diff(t_grid) <= 0) or np.any(np.diff(beta_grid) <= 0):
        raise DomainError("grids must be strictly increasing")
    if t_grid[0] < 0:
        raise DomainError("t_grid must be nonnegative")
    sched = _grid_schedule(t_grid, dt)
    nb, nt = beta_grid.size, t_grid.size
    mats = None
    if qkv and qkv != "identity":
        from .dynamics import random_qkv
        kind, _, v_kind = qkv.partition(":")
        mats = random_qkv(d, kind, master_seed, v_kind or "identity")
    off = ~np.eye(n, dtype=bool)

    def indicator(C):
        G = C @ np.swapaxes(C, -1, -2)
        if all_pairs:
            return np.mean((G >= 1.0 - delta)[..., off], axis=-1)
        return (G[..., 0, 1] >= 1.0 - delta).astype(float)

    def work(ids):
        ids = list(ids)
        out = {}
        for b in sorted({i // reps for i in ids}):
            reps_b = [i % reps for i in ids if i // reps == b]
            beta = beta_grid[b]
            if mats is None:
                C = np.stack([_phase_initial(n, d, master_seed, r) for r in reps_b])
            else:
                C = np.stack([sample_uniform_array((n, d), run_rng(master_seed, r))
                              for r in reps_b])
            res = np.zeros((len(reps_b), nt))
            active = np.ones(len(reps_b), dtype=bool)
            for j, (k, h) in enumerate(sched):
                if k and np.any(active):
                    sub = np.ascontiguousarray(C[active])
                    if mats is None:
                        _kernels.advance_sphere(sub, beta, 1.0, True, h, k)
                    else:
                        spec = ModelSpec(Variant.QKV, beta=beta, Q=mats[0], K=mats[1], V=mats[2])
                        for _ in range(k):
                            sub = _kernels.chart_rk4_step(sub, lambda P: velocity_sa(P, spec),
                                                          h, True)
                    C[active] = sub
                res[:, j] = np.where(active, indicator(C), 1.0)
                if mats is None:
                    active &= ~_settled(C, delta)
            for r, row in zip(reps_b, res):
                out[b * reps + r] = row
        return [out[i] for i in ids]

    rows = map_chunks(work, nb * reps, threads=threads, chunk=chunk)
    hits = np.array(rows).reshape(nb, reps, nt)
    prob = hits.mean(axis=1)
    return PhaseGrid(t_grid, beta_grid, prob, int(reps), int(n), int(d), float(delta),
                     int(master_seed), float(dt), qkv)


def phase_curve_infty(n, beta_grid, delta, variant="SA", t_max=1e7):
    """[(beta, t*)] with gamma_beta(t*) = 1 - delta."""
    if not 0.0 < delta < 1.0:
        raise DomainError("delta must lie in (0, 1)")
    return [(float(b), solve_gamma_hitting_time(float(b), n, variant, 1.0 - delta, t_max=t_max))
            for b in beta_grid]


def empirical_boundary(grid: PhaseGrid, level=0.5):
    """[(beta, first t with prob > level or None)], the finite-d boundary proxy."""
    out = []
    for b, row in zip(grid.beta_grid, grid.prob):
        k = np.flatnonzero(row > level)
        out.append((float(b), float(grid.t_grid[k[0]]) if k.size else None))
    return out


def curve_csv(pairs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["beta", "t_star"])
    for b, t in pairs:
        w.writerow([fmt(b), "" if t is None else fmt(t)])
    return buf.getvalue()


def histogram_csv(edges, values, column="count") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", column])
    for lo, hi, v in zip(edges[:-1], edges[1:], values):
        w.writerow([fmt(lo), fmt(hi), v if column == "count" else fmt(v)])
    return buf.getvalue()


# ----------------------------------------------------- concentration ----


def deviation_vs_dimension(n, beta, t_probe, d_list, reps, master_seed, variant="SA",
                           orthonormal=False, dt=1e-2, threads=None):
    """[(d, mean, stderr)] of max_{t <= t_probe, i != j} |<x_i, x_j> - gamma(t)|.

    Initial points are uniform (or exactly orthonormal with ``orthonormal``);
    the comparison runs on every integration step.
    """
    d_list = list(d_list)
    if any(b <= a for a, b in zip(d_list, d_list[1:])):
        raise DomainError("d_list must be increasing")
    if min(d_list) < n:
        raise DomainError("each d must be >= n")
    normalized = Variant(variant) == Variant.SA
    steps = int(round(t_probe / dt))
    curve = integrate_gamma(beta, n, variant,
                            IntegratorConfig(dt=dt, t_end=steps * dt, sample_every=dt)).values
    iu = np.triu_indices(n, 1)
    out = []
    for k, d in enumerate(d_list):
        def work(ids, d=d, k=k):
            res = []
            for r in ids:
                rng = run_rng(master_seed, k * reps + r)
                if orthonormal:
                    X = sample_orthonormal(n, d, rng).points
                else:
                    X = sample_uniform_array((n, d), rng)
                C = span_reduce(X)[0][None].copy()
                worst = 0.0
                for s in range(steps + 1):
                    if s:
                        _kernels.advance_sphere(C, beta, 1.0, normalized, dt, 1)
                    G = C[0] @ C[0].T
                    worst = max(worst, float(np.max(np.abs(G[iu] - curve[s]))))
                res.append(worst)
            return res
        vals = np.array(map_chunks(work, reps, threads=threads))
        out.append((int(d), float(vals.mean()),
                    float(vals.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0))
    return out


def loglog_slope(points):
    """Least-squares slope of log(mean) against log(d)."""
    d = np.log([p[0] for p in points])
    m = np.log([p[1] for p in points])
    return float(np.polyfit(d, m, 1)[0])


# ------------------------------------------------------ circle studies ----


@dataclass
class PairCorrelation:
    edges: np.ndarray
    density: np.ndarray
    counts: np.ndarray
    reps: int

    @property
    def stderr(self):
        w = np.diff(self.edges)
        p = self.counts / self.reps
        return np.sqrt(p * (1.0 - p) / self.reps) / w

    def mass_within(self, radius) -> float:
        centers = 0.5 * (self.edges[:-1] + self.edges[1:])
        return float(np.sum(self.counts[np.abs(centers) < radius]) / self.reps)


def pair_correlation_circle(model: ModelSpec, n, t_probe, reps, bins=128, master_seed=0,
                            dt=1e-2, threads=None) -> PairCorrelation:
    """Histogram density of theta_2(t) - theta_1(t) on [-pi, pi) over seeded uniform starts.

    ``model`` is ANGULAR (angle dynamics) or SA/USA with Q = K = V = I on the circle.
    """
    if model.variant not in (Variant.ANGULAR, Variant.SA, Variant.USA):
        raise DomainError("pair correlation needs an ANGULAR, SA or USA model")
    if model.variant != Variant.ANGULAR and not model.simple_sphere:
        raise DomainError("SA/USA pair correlation supports Q = K = V = I only")
    steps = int(round(t_probe / dt))
    omega = np.zeros(n) if model.omega is None else model.omega

    def work(ids):
        T = np.stack([run_rng(master_seed, r).uniform(0.0, 2.0 * np.pi, n) for r in ids])
        if steps:
            if model.variant == Variant.ANGULAR:
                _kernels.advance_angular(T, model.beta, model.Kc, omega,
                                         model.coupling.value == "EXP_COS", dt, steps)
            else:
                X = np.ascontiguousarray(circle_points(T))
                _kernels.advance_sphere(X, model.beta, model.value_sign,
                                        model.variant == Variant.SA, dt, steps)
                T = np.arctan2(X[..., 1], X[..., 0])
        diff = np.mod(T[:, 1] - T[:, 0] + np.pi, 2.0 * np.pi) - np.pi
        return list(diff)

    diffs = np.array(map_chunks(work, reps, threads=threads, chunk=64))
    counts, edges = np.histogram(diffs, bins=bins, range=(-np.pi, np.pi))
    density = counts / (reps * np.diff(edges))
    return PairCorrelation(edges, density, counts, int(reps))


def fourier_coefficients_hbeta(beta, k_max):
    """c_k = (1/2 pi) int e^{beta cos t} cos(k t) dt over the circle, i.e. I_k(beta).

    Summed from the power series sum_m (beta/2)^{2m+k} / (m! (m+k)!), whose
    terms are all positive, so every coefficient keeps full relative precision
    (quadrature loses the small high-order ones to cancellation).
    """
    if k_max < 0:
        raise DomainError("k_max must be >= 0")
    if beta < 0:
        raise DomainError("beta must be >= 0")
    if beta == 0:
        return [1.0] + [0.0] * k_max
    half = math.log(beta / 2.0)
    m = np.arange(int(beta + k_max + 80))
    out = []
    for k in range(k_max + 1):
        logs = (2 * m + k) * half - gammaln(m + 1) - gammaln(m + k + 1)
        top = float(np.max(logs))
        out.append(math.exp(top) * float(np.sum(np.exp(logs - top))))
    return out
