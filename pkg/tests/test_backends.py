"""The compiled kernels and their numpy twins must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnflow import _kernels
from attnflow._accel import HAVE_NUMBA
from attnflow.geometry import sample_uniform_array

pytestmark = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 9), st.integers(2, 6), st.floats(0.0, 10.0),
       st.sampled_from([1.0, -1.0]), st.booleans(), st.booleans(), st.booleans(),
       st.integers(0, 2 ** 32 - 1))
def test_advance_sphere(R, n, d, beta, vsign, normalized, exp_map, euler, seed):
    X = sample_uniform_array((R, n, d), np.random.default_rng(seed))
    A, B = X.copy(), X.copy()
    dt = 0.01 if normalized else 0.01 / max(1.0, np.exp(beta) / 8)
    _kernels.advance_sphere_nb(A, beta, vsign, normalized, dt, 7, exp_map, euler)
    _kernels.advance_sphere_np(B, beta, vsign, normalized, dt, 7, exp_map, euler)
    assert np.allclose(A, B, atol=1e-12, rtol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 8), st.floats(0.0, 5.0), st.booleans(),
       st.integers(0, 2 ** 32 - 1))
def test_advance_angular(R, n, beta, expcos, seed):
    rng = np.random.default_rng(seed)
    T = rng.uniform(0, 2 * np.pi, (R, n))
    omega = rng.normal(size=n)
    A, B = T.copy(), T.copy()
    _kernels.advance_angular_nb(A, beta, 0.7, omega, expcos, 0.01, 9)
    _kernels.advance_angular_np(B, beta, 0.7, omega, expcos, 0.01, 9)
    assert np.allclose(A, B, atol=1e-12, rtol=0)


@pytest.mark.parametrize("normalized", [True, False])
def test_gamma_kernels(normalized):
    a = _kernels.gamma_curve_nb(2.0, 7, normalized, 1e-3, 4000, 100)
    b = _kernels.gamma_curve_np(2.0, 7, normalized, 1e-3, 4000, 100)
    assert np.allclose(a, b, atol=1e-14, rtol=0)
    ka, ga = _kernels.gamma_hit_nb(2.0, 7, normalized, 1e-3, 0.9, 10 ** 6)
    kb, gb = _kernels.gamma_hit_np(2.0, 7, normalized, 1e-3, 0.9, 10 ** 6)
    assert ka == kb and abs(ga - gb) < 1e-14
    assert _kernels.gamma_hit_nb(2.0, 7, normalized, 1e-3, 0.9, 10)[0] == -1


def test_numpy_fallback_flag():
    env = dict(os.environ, ATTNFLOW_DISABLE_NUMBA="1")
    code = ("import attnflow, numpy as np;"
            "from attnflow.geometry import hemisphere_witness, regular_simplex;"
            "print(attnflow.backend_name(), hemisphere_witness(regular_simplex(4)).exists)")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.split() == ["numpy", "False"], out.stderr
