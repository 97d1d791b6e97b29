import os
import subprocess
import sys

import numpy as np
import pytest

from matchsync import kernels
from matchsync.kernels import pack_params, run_batch
from matchsync.linearization import jacobian_matrix
from matchsync.model import vector_field

needs_compiled = pytest.mark.skipif(kernels.BACKEND != "cython",
                                    reason="compiled kernel not built")


def rk4_reference(model, z, u, dt, steps, dz=None):
    """Classical RK4 written directly against vector_field / jacobian_matrix."""
    f = lambda z: vector_field(model, z, u)
    g = lambda z, d: jacobian_matrix(model, z) @ d
    for _ in range(steps):
        k1 = f(z)
        k2 = f(z + dt / 2 * k1)
        k3 = f(z + dt / 2 * k2)
        k4 = f(z + dt * k3)
        if dz is not None:
            l1 = g(z, dz)
            l2 = g(z + dt / 2 * k1, dz + dt / 2 * l1)
            l3 = g(z + dt / 2 * k2, dz + dt / 2 * l2)
            l4 = g(z + dt * k3, dz + dt * l3)
            dz = dz + dt / 6 * (l1 + 2 * l2 + 2 * l3 + l4)
        z = z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return z, dz


def starts(model, z_star, count, seed):
    rng = np.random.default_rng(seed)
    Z = np.repeat(z_star[None], count, 0)
    Z[:, :model.n] += rng.uniform(-1.5, 1.5, (count, model.n))
    Z[:, model.n:] += rng.standard_normal((count, model.N - model.n))
    return Z


@pytest.mark.parametrize("backend", ["python", pytest.param("cython", marks=needs_compiled)])
def test_kernel_matches_reference(bench, bench_eq, backend):
    Z = starts(bench, bench_eq.z_star, 3, 0)
    dZ = np.random.default_rng(1).standard_normal(Z.shape)
    rec, rec_dz, status, zf, dzf = run_batch(bench, Z, bench_eq.u_star, 1e-5, 40, 20,
                                             dZ0=dZ, backend=backend)
    assert rec.shape == (3, 3, bench.N) and np.all(status == -1)
    for s in range(3):
        z_ref, dz_ref = rk4_reference(bench, Z[s], bench_eq.u_star, 1e-5, 40, dZ[s])
        scale = np.abs(z_ref) + 1.0
        assert np.max(np.abs(zf[s] - z_ref) / scale) < 1e-12
        assert np.max(np.abs(dzf[s] - dz_ref) / (np.abs(dz_ref) + 1.0)) < 1e-10
        assert np.array_equal(rec[s, -1], zf[s]) and np.array_equal(rec[s, 0], Z[s])


@needs_compiled
def test_backends_agree_on_network(ring):
    Z = starts(ring, np.zeros(ring.N), 5, 2)
    u = ring.input_from_dc(30.0)
    a = run_batch(ring, Z, u, 1e-5, 200, 50, backend="python")
    b = run_batch(ring, Z, u, 1e-5, 200, 50, backend="cython")
    assert np.allclose(a[0], b[0], rtol=1e-11, atol=1e-9)


@needs_compiled
@pytest.mark.parametrize("group", [1, 3, 8, 64])
def test_lane_grouping_is_invisible(bench, bench_eq, group):
    from matchsync import _kernel_c
    Z = starts(bench, bench_eq.z_star, 11, 3)
    args = (None, bench_eq.u_star[bench.sl_vdc], pack_params(bench), np.array([[0, 1]]),
            bench.n, 1e-5, 100, 10, 1e6)
    ref = _kernel_c.integrate_batch(Z, *args, 1)
    out = _kernel_c.integrate_batch(Z, *args, group)
    assert np.array_equal(ref[0], out[0])


@pytest.mark.parametrize("backend", ["python", pytest.param("cython", marks=needs_compiled)])
def test_blowup_is_flagged(bench, bench_eq, backend):
    Z = np.repeat(bench_eq.z_star[None], 2, 0)
    Z[1, 2] += 1.0
    # stable step: nothing flagged
    status = run_batch(bench, Z, bench_eq.u_star, 1e-5, 100, 10, backend=backend)[2]
    assert np.all(status == -1)
    # 2e-4 is ten times past the explicit stability limit
    rec, _, status, zf, _ = run_batch(bench, Z, bench_eq.u_star, 2e-4, 400, 10,
                                      blowup=1e6, backend=backend)
    assert np.all(status >= 0)
    for s in range(2):
        k = status[s] // 10  # last record taken before the blow-up step
        assert np.all(np.isfinite(rec[s, :k + 1]))
        assert np.all(np.isnan(rec[s, k + 1:]))
        assert np.max(np.abs(zf[s])) > 1e6


@pytest.mark.parametrize("backend", ["python", pytest.param("cython", marks=needs_compiled)])
def test_argument_checks(bench, bench_eq, backend):
    with pytest.raises(ValueError):
        run_batch(bench, bench_eq.z_star, bench_eq.u_star, 1e-5, 10, 3, backend=backend)


def test_unknown_backend(bench, bench_eq):
    with pytest.raises(ValueError):
        run_batch(bench, bench_eq.z_star, bench_eq.u_star, 1e-5, 10, 1, backend="fortran")


def test_pack_params(bench):
    p = pack_params(bench)
    assert p[kernels._kernel_py.HM] == pytest.approx(0.165)
    assert p[kernels._kernel_py.BC] == pytest.approx(1e-5 * bench.omega_n + 1.08)


def test_environment_forces_fallback():
    env = dict(os.environ, MATCHSYNC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import matchsync.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
