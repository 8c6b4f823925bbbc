"""Hot inner loops, each in a numba flavour (``*_nb``) and a vectorised numpy
flavour (``*_np``).  The public names at the bottom pick one according to
``ATTNFLOW_DISABLE_NUMBA``.

Sphere kernels cover SA/USA with Q = K = I and V = vsign * I on a batch of
configurations ``X`` of shape (R, n, d), advanced in place.

RK4 on the sphere is run in the chart of the retraction centred at the
current point: stage velocities are pulled back through the exact inverse
differential of the chart, which keeps classical fourth order.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------- numba ----


@njit(cache=True, nogil=True)
def _velocity_nb(P, beta, vsign, normalized, out, w):
    n, d = P.shape
    # w is an (n, n) work array: Gram matrix, then attention weights.  The row
    # maximum of a Gram matrix of unit vectors is its diagonal entry 1, so the
    # shifted kernel e^{beta (g_ij - 1)} is symmetric and half of it suffices.
    w[:, :] = np.dot(P, P.T)
    for i in range(n):
        w[i, i] = 1.0
        for j in range(i + 1, n):
            e = math.exp(beta * (w[i, j] - 1.0))
            w[i, j] = e
            w[j, i] = e
    if normalized:
        for i in range(n):
            z = 0.0
            for j in range(n):
                z += w[i, j]
            z = vsign / z
            for j in range(n):
                w[i, j] *= z
    else:
        scale = vsign * math.exp(beta) / n
        for i in range(n):
            for j in range(n):
                w[i, j] *= scale
    out[:, :] = np.dot(w, P)
    for i in range(n):
        dot = 0.0
        for k in range(d):
            dot += out[i, k] * P[i, k]
        for k in range(d):
            out[i, k] -= dot * P[i, k]


@njit(cache=True, nogil=True)
def _retract_nb(X, V, h, exp_map, out):
    n, d = X.shape
    for i in range(n):
        r2 = 0.0
        for k in range(d):
            r2 += (h * V[i, k]) ** 2
        if r2 == 0.0:
            for k in range(d):
                out[i, k] = X[i, k]
            continue
        if exp_map:
            r = math.sqrt(r2)
            c = math.cos(r)
            s = math.sin(r) / r
            nrm = 0.0
            for k in range(d):
                out[i, k] = c * X[i, k] + s * h * V[i, k]
                nrm += out[i, k] ** 2
        else:
            nrm = 0.0
            for k in range(d):
                out[i, k] = X[i, k] + h * V[i, k]
                nrm += out[i, k] ** 2
        nrm = math.sqrt(nrm)
        for k in range(d):
            out[i, k] /= nrm


@njit(cache=True, nogil=True)
def _pullback_nb(X, V, h, F, exp_map, out):
    """Chart coordinates velocity at displacement h*V given the field F there."""
    n, d = X.shape
    for i in range(n):
        r2 = 0.0
        for k in range(d):
            r2 += (h * V[i, k]) ** 2
        if r2 == 0.0:
            for k in range(d):
                out[i, k] = F[i, k]
            continue
        if exp_map:
            r = math.sqrt(r2)
            c = math.cos(r)
            s = math.sin(r)
            fr = 0.0
            for k in range(d):
                u = h * V[i, k] / r
                fr += F[i, k] * (-s * X[i, k] + c * u)
            ratio = r / s
            for k in range(d):
                u = h * V[i, k] / r
                er = -s * X[i, k] + c * u
                out[i, k] = fr * u + ratio * (F[i, k] - fr * er)
        else:
            xf = 0.0
            ny = 0.0
            for k in range(d):
                xf += X[i, k] * F[i, k]
                ny += (X[i, k] + h * V[i, k]) ** 2
            ny = math.sqrt(ny)
            for k in range(d):
                out[i, k] = ny * (F[i, k] - xf * (X[i, k] + h * V[i, k]))


@njit(cache=True, nogil=True)
def _project_nb(X, V):
    n, d = X.shape
    for i in range(n):
        dot = 0.0
        for k in range(d):
            dot += X[i, k] * V[i, k]
        for k in range(d):
            V[i, k] -= dot * X[i, k]


@njit(cache=True, nogil=True)
def advance_sphere_nb(X, beta, vsign, normalized, dt, nsteps, exp_map, euler):
    R, n, d = X.shape
    k1 = np.empty((n, d))
    k2 = np.empty((n, d))
    k3 = np.empty((n, d))
    k4 = np.empty((n, d))
    F = np.empty((n, d))
    P = np.empty((n, d))
    inc = np.empty((n, d))
    w = np.empty((n, n))
    for r in range(R):
        x = X[r]
        for _ in range(nsteps):
            _velocity_nb(x, beta, vsign, normalized, k1, w)
            if euler:
                _retract_nb(x, k1, dt, exp_map, P)
                x[:, :] = P
                continue
            _retract_nb(x, k1, 0.5 * dt, exp_map, P)
            _velocity_nb(P, beta, vsign, normalized, F, w)
            _pullback_nb(x, k1, 0.5 * dt, F, exp_map, k2)
            _retract_nb(x, k2, 0.5 * dt, exp_map, P)
            _velocity_nb(P, beta, vsign, normalized, F, w)
            _pullback_nb(x, k2, 0.5 * dt, F, exp_map, k3)
            _retract_nb(x, k3, dt, exp_map, P)
            _velocity_nb(P, beta, vsign, normalized, F, w)
            _pullback_nb(x, k3, dt, F, exp_map, k4)
            for i in range(n):
                for k in range(d):
                    inc[i, k] = (k1[i, k] + 2.0 * k2[i, k] + 2.0 * k3[i, k] + k4[i, k]) / 6.0
            _project_nb(x, inc)
            _retract_nb(x, inc, dt, exp_map, P)
            x[:, :] = P


@njit(cache=True, nogil=True)
def _angular_vel_nb(T, beta, Kc, omega, expcos, out):
    n = T.shape[0]
    c = np.cos(T)
    s = np.sin(T)
    for i in range(n):
        out[i] = 0.0
    # the coupling is odd in t_i - t_j, so each pair is visited once
    for i in range(n):
        for j in range(i + 1, n):
            su = s[i] * c[j] - c[i] * s[j]
            if expcos:
                w = math.exp(beta * (c[i] * c[j] + s[i] * s[j])) * su
            else:
                w = Kc * su
            out[i] -= w
            out[j] += w
    for i in range(n):
        out[i] = out[i] / n + omega[i]


@njit(cache=True, nogil=True)
def advance_angular_nb(T, beta, Kc, omega, expcos, dt, nsteps):
    R, n = T.shape
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    y = np.empty(n)
    for r in range(R):
        x = T[r]
        for _ in range(nsteps):
            _angular_vel_nb(x, beta, Kc, omega, expcos, k1)
            for i in range(n):
                y[i] = x[i] + 0.5 * dt * k1[i]
            _angular_vel_nb(y, beta, Kc, omega, expcos, k2)
            for i in range(n):
                y[i] = x[i] + 0.5 * dt * k2[i]
            _angular_vel_nb(y, beta, Kc, omega, expcos, k3)
            for i in range(n):
                y[i] = x[i] + dt * k3[i]
            _angular_vel_nb(y, beta, Kc, omega, expcos, k4)
            for i in range(n):
                x[i] += dt * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0


@njit(cache=True, nogil=True)
def _gamma_rhs(g, beta, n, normalized):
    e = math.exp(beta * (g - 1.0))
    core = 2.0 * e * (1.0 - g) * ((n - 1) * g + 1.0)
    if normalized:
        return core / (1.0 + (n - 1) * e)
    return core * math.exp(beta) / n


@njit(cache=True, nogil=True)
def gamma_curve_nb(beta, n, normalized, dt, nsteps, stride):
    out = np.empty(nsteps // stride + 1)
    g = 0.0
    out[0] = g
    for s in range(1, nsteps + 1):
        a = _gamma_rhs(g, beta, n, normalized)
        b = _gamma_rhs(g + 0.5 * dt * a, beta, n, normalized)
        c = _gamma_rhs(g + 0.5 * dt * b, beta, n, normalized)
        e = _gamma_rhs(g + dt * c, beta, n, normalized)
        g += dt * (a + 2.0 * b + 2.0 * c + e) / 6.0
        if s % stride == 0:
            out[s // stride] = g
    return out


@njit(cache=True, nogil=True)
def gamma_hit_nb(beta, n, normalized, dt, level, max_steps):
    """Steps taken before the curve first reaches ``level``, and the value there."""
    g = 0.0
    for s in range(max_steps):
        a = _gamma_rhs(g, beta, n, normalized)
        b = _gamma_rhs(g + 0.5 * dt * a, beta, n, normalized)
        c = _gamma_rhs(g + 0.5 * dt * b, beta, n, normalized)
        e = _gamma_rhs(g + dt * c, beta, n, normalized)
        nxt = g + dt * (a + 2.0 * b + 2.0 * c + e) / 6.0
        if nxt >= level:
            return s, g
        g = nxt
    return -1, g


@njit(cache=True, nogil=True)
def _affine_min_nb(P, S, k):
    d = P.shape[1]
    M = np.zeros((k + 1, k + 1))
    rhs = np.zeros(k + 1)
    for a in range(k):
        for b in range(a, k):
            acc = 0.0
            for c in range(d):
                acc += P[S[a], c] * P[S[b], c]
            M[a, b] = acc
            M[b, a] = acc
        M[a, k] = 1.0
        M[k, a] = 1.0
    rhs[k] = 1.0
    return np.linalg.lstsq(M, rhs)[0][:k]


@njit(cache=True, nogil=True)
def _combine_nb(P, S, lam, k):
    d = P.shape[1]
    p = np.zeros(d)
    for a in range(k):
        for c in range(d):
            p[c] += lam[a] * P[S[a], c]
    return p


@njit(cache=True, nogil=True)
def min_norm_point_nb(P, tol, max_iter):
    """Wolfe's active-set method; mirrors geometry.min_norm_point."""
    m, d = P.shape
    S = np.empty(m, np.int64)
    lam = np.empty(m)
    norms = np.empty(m)
    for i in range(m):
        acc = 0.0
        for c in range(d):
            acc += P[i, c] * P[i, c]
        norms[i] = acc
    scale = max(1.0, norms.max())
    S[0] = np.argmin(norms)
    lam[0] = 1.0
    k = 1
    p = P[S[0]].copy()
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        pp = np.dot(p, p)
        if pp <= tol * tol:
            converged = True
            break
        dots = np.dot(P, p)
        j = np.argmin(dots)
        member = False
        for a in range(k):
            if S[a] == j:
                member = True
        if pp - dots[j] <= 1e-12 * scale or member:
            converged = True
            break
        S[k] = j
        lam[k] = 0.0
        k += 1
        while True:
            it += 1
            mu = _affine_min_nb(P, S, k)
            if np.all(mu > 1e-14):
                lam[:k] = mu
                p = _combine_nb(P, S, lam, k)
                break
            theta = np.inf
            drop = -1
            for a in range(k):
                if mu[a] <= 1e-14:
                    r = lam[a] / (lam[a] - mu[a])
                    if r < theta:
                        theta = r
                        drop = a
            kk = 0
            total = 0.0
            for a in range(k):
                v = lam[a] + theta * (mu[a] - lam[a])
                if v > 1e-14 and a != drop:
                    S[kk] = S[a]
                    lam[kk] = v
                    total += v
                    kk += 1
            k = kk
            for a in range(k):
                lam[a] /= total
            p = _combine_nb(P, S, lam, k)
            if it >= max_iter:
                break
    w = np.zeros(m)
    for a in range(k):
        w[S[a]] = lam[a]
    return p, w, converged, it


# ---------------------------------------------------------------- numpy ----


def _velocity_np(X, beta, vsign, normalized):
    n = X.shape[-2]
    G = X @ np.swapaxes(X, -1, -2)
    W = np.exp(beta * (G - 1.0))
    idx = np.arange(n)
    W[..., idx, idx] = 1.0
    if normalized:
        scale = vsign / np.sum(W, axis=-1, keepdims=True)
    else:
        scale = vsign * np.exp(beta) / n
    S = W @ X
    S = S - np.sum(S * X, axis=-1, keepdims=True) * X
    return scale * S


def _retract_np(X, V, h, exp_map):
    step = h * V
    r = np.sqrt(np.sum(step * step, axis=-1, keepdims=True))
    zero = r == 0.0
    if exp_map:
        safe = np.where(zero, 1.0, r)
        out = np.cos(r) * X + (np.sin(r) / safe) * step
    else:
        out = X + step
    out = out / np.sqrt(np.sum(out * out, axis=-1, keepdims=True))
    return np.where(zero, X, out)


def _pullback_np(X, V, h, F, exp_map):
    step = h * V
    if exp_map:
        r = np.sqrt(np.sum(step * step, axis=-1, keepdims=True))
        zero = r == 0.0
        safe = np.where(zero, 1.0, r)
        c, s = np.cos(r), np.sin(r)
        u = step / safe
        er = -s * X + c * u
        fr = np.sum(F * er, axis=-1, keepdims=True)
        ratio = np.where(zero, 1.0, safe / np.where(zero, 1.0, s))
        out = fr * u + ratio * (F - fr * er)
        return np.where(zero, F, out)
    y = X + step
    ny = np.sqrt(np.sum(y * y, axis=-1, keepdims=True))
    xf = np.sum(X * F, axis=-1, keepdims=True)
    return ny * (F - xf * y)


def chart_rk4_step(x, f, dt, exp_map):
    """One chart-RK4 step for a generic tangent field ``f`` on stacked points."""
    k1 = f(x)
    k2 = _pullback_np(x, k1, 0.5 * dt, f(_retract_np(x, k1, 0.5 * dt, exp_map)), exp_map)
    k3 = _pullback_np(x, k2, 0.5 * dt, f(_retract_np(x, k2, 0.5 * dt, exp_map)), exp_map)
    k4 = _pullback_np(x, k3, dt, f(_retract_np(x, k3, dt, exp_map)), exp_map)
    inc = (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    inc = inc - np.sum(inc * x, axis=-1, keepdims=True) * x
    return _retract_np(x, inc, dt, exp_map)


def advance_sphere_np(X, beta, vsign, normalized, dt, nsteps, exp_map, euler):
    def f(P):
        return _velocity_np(P, beta, vsign, normalized)
    x = X
    for _ in range(nsteps):
        if euler:
            x = _retract_np(x, f(x), dt, exp_map)
        else:
            x = chart_rk4_step(x, f, dt, exp_map)
    X[...] = x


def _angular_vel_np(T, beta, Kc, omega, expcos):
    n = T.shape[-1]
    u = T[..., :, None] - T[..., None, :]
    if expcos:
        s = -np.sum(np.exp(beta * np.cos(u)) * np.sin(u), axis=-1)
    else:
        s = -Kc * np.sum(np.sin(u), axis=-1)
    return s / n + omega


def advance_angular_np(T, beta, Kc, omega, expcos, dt, nsteps):
    x = T.copy()
    for _ in range(nsteps):
        k1 = _angular_vel_np(x, beta, Kc, omega, expcos)
        k2 = _angular_vel_np(x + 0.5 * dt * k1, beta, Kc, omega, expcos)
        k3 = _angular_vel_np(x + 0.5 * dt * k2, beta, Kc, omega, expcos)
        k4 = _angular_vel_np(x + dt * k3, beta, Kc, omega, expcos)
        x = x + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    T[...] = x


def _gamma_rhs_np(g, beta, n, normalized):
    e = math.exp(beta * (g - 1.0))
    core = 2.0 * e * (1.0 - g) * ((n - 1) * g + 1.0)
    if normalized:
        return core / (1.0 + (n - 1) * e)
    return core * math.exp(beta) / n


def gamma_curve_np(beta, n, normalized, dt, nsteps, stride):
    out = np.empty(nsteps // stride + 1)
    g = 0.0
    out[0] = g
    f = _gamma_rhs_np
    for s in range(1, nsteps + 1):
        a = f(g, beta, n, normalized)
        b = f(g + 0.5 * dt * a, beta, n, normalized)
        c = f(g + 0.5 * dt * b, beta, n, normalized)
        e = f(g + dt * c, beta, n, normalized)
        g += dt * (a + 2.0 * b + 2.0 * c + e) / 6.0
        if s % stride == 0:
            out[s // stride] = g
    return out


def gamma_hit_np(beta, n, normalized, dt, level, max_steps):
    g = 0.0
    f = _gamma_rhs_np
    for s in range(max_steps):
        a = f(g, beta, n, normalized)
        b = f(g + 0.5 * dt * a, beta, n, normalized)
        c = f(g + 0.5 * dt * b, beta, n, normalized)
        e = f(g + dt * c, beta, n, normalized)
        nxt = g + dt * (a + 2.0 * b + 2.0 * c + e) / 6.0
        if nxt >= level:
            return s, g
        g = nxt
    return -1, g


# ------------------------------------------------------------- dispatch ----

if USE_NUMBA:
    def advance_sphere(X, beta, vsign, normalized, dt, nsteps, exp_map=True, euler=False):
        advance_sphere_nb(X, float(beta), float(vsign), bool(normalized), float(dt),
                          int(nsteps), bool(exp_map), bool(euler))

    def advance_angular(T, beta, Kc, omega, expcos, dt, nsteps):
        advance_angular_nb(T, float(beta), float(Kc), np.ascontiguousarray(omega, dtype=float),
                           bool(expcos), float(dt), int(nsteps))

    def gamma_curve(beta, n, normalized, dt, nsteps, stride):
        return gamma_curve_nb(float(beta), int(n), bool(normalized), float(dt), int(nsteps),
                              int(stride))

    def gamma_hit(beta, n, normalized, dt, level, max_steps):
        return gamma_hit_nb(float(beta), int(n), bool(normalized), float(dt), float(level),
                            int(max_steps))
else:
    def advance_sphere(X, beta, vsign, normalized, dt, nsteps, exp_map=True, euler=False):
        advance_sphere_np(X, beta, vsign, normalized, dt, nsteps, exp_map, euler)

    def advance_angular(T, beta, Kc, omega, expcos, dt, nsteps):
        advance_angular_np(T, beta, Kc, np.asarray(omega, dtype=float), expcos, dt, nsteps)

    def gamma_curve(beta, n, normalized, dt, nsteps, stride):
        return gamma_curve_np(beta, n, normalized, dt, nsteps, stride)

    def gamma_hit(beta, n, normalized, dt, level, max_steps):
        return gamma_hit_np(beta, n, normalized, dt, level, max_steps)
