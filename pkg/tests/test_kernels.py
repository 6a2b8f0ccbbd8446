import numpy as np
import pytest

from vssbackdoor import _scan_py, kernels
from vssbackdoor.errors import DimensionError


def _inputs(rng, b=3, L=9, E=5, N=4, dtype=np.float64):
    u = rng.standard_normal((b, L, E))
    delta = rng.uniform(1e-9, 0.5, (b, L, E))
    A = -rng.uniform(0.1, 4, (E, N))
    A[0, 0] = 0.0  # zero pole
    Bm, Cm = rng.standard_normal((2, b, L, N))
    return [a.astype(dtype) for a in (u, delta, A, Bm, Cm)]


def test_backend_selection():
    assert kernels.BACKEND in kernels.available_backends()
    assert "numpy" in kernels.available_backends()
    with pytest.raises(ValueError):
        kernels.scan_forward(*_inputs(np.random.default_rng(0)), backend="fortran")


@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="extension not built")
def test_cython_matches_numpy(rng):
    args = _inputs(rng)
    y_np, hs_np = kernels.scan_forward(*args, backend="numpy")
    y_cy, hs_cy = kernels.scan_forward(*args, backend="cython")
    np.testing.assert_allclose(y_cy, y_np, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(hs_cy, hs_np, rtol=1e-12, atol=1e-12)
    dy = rng.standard_normal(y_np.shape)
    g_np = kernels.scan_backward(*args, hs_np, dy, backend="numpy")
    g_cy = kernels.scan_backward(*args, hs_cy, dy, backend="cython")
    for a, b in zip(g_np, g_cy):
        np.testing.assert_allclose(b, a, rtol=1e-10, atol=1e-10)


@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="extension not built")
def test_float32_path(rng):
    args = _inputs(rng, dtype=np.float32)
    y32, _ = kernels.scan_forward(*args, backend="cython")
    y64, _ = kernels.scan_forward(*[a.astype(np.float64) for a in args], backend="numpy")
    assert y32.dtype == np.float32
    np.testing.assert_allclose(y32, y64, rtol=1e-4, atol=1e-5)


def test_gain_branches():
    d, A = 0.3, np.array([0.0, -1e-12, -1e-4, -2.0])
    a = d * A
    g = _scan_py.zoh_gain(a, d, A)
    exact = np.where(a == 0, d, np.expm1(a) / np.where(A == 0, 1, A))
    np.testing.assert_allclose(g, exact, rtol=1e-12)


def test_shape_checks(rng):
    u, delta, A, Bm, Cm = _inputs(rng)
    with pytest.raises(DimensionError):
        kernels.scan_forward(u, delta[:, :-1], A, Bm, Cm)
    with pytest.raises(DimensionError):
        kernels.scan_forward(u, delta, A[:-1], Bm, Cm)
    with pytest.raises(DimensionError):
        kernels.scan_forward(u, delta, A, Bm[:, :, :-1], Cm)


def test_pure_python_switch():
    import os
    import subprocess
    import sys
    env = {**os.environ, "VSSBD_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", "from vssbackdoor import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
