"""Acceptance suite for the two-converter benchmark and the core invariants.

Each test checks one criterion at its stated tolerance and reports a single
PASS/FAIL line (also repeated in the terminal summary).
"""
import os
import time

import numpy as np
import pytest
from scipy.linalg import null_space

from matchsync.equilibrium import check_condition1, condition1_threshold, feasible_input, solve_equilibrium
from matchsync.linearization import deviation_matrix, jacobian_matrix, zero_direction
from matchsync.model import group_action, rot2, vector_field, wrap_angle
from matchsync.simulation import (
    SweepSpec, estimate_region, integrate, integrate_variational, region_summary, tangent_proxy,
)

from conftest import random_input, random_state, report

EPSILON = 3.5


def h_matrix(model, theta):
    H = np.eye(model.N)
    k = (model.N - 2 * model.n) // 2
    H[model.sl_x, model.sl_x] = np.kron(np.eye(k), rot2(theta))
    return H


def fd_jacobian(model, z, h=1e-6):
    A = np.empty((model.N, model.N))
    for j in range(model.N):
        e = np.zeros(model.N)
        e[j] = h * max(1.0, abs(z[j]))
        A[:, j] = (vector_field(model, z + e) - vector_field(model, z - e)) / (2 * e[j])
    return A


def grid_samples(model, eq, cert, points=41):
    """Angle-offset grid with V(dz0) for every point."""
    sweep = SweepSpec.grid(model.n, points)
    out = []
    for offs in sweep.offsets:
        z0 = eq.z_star.copy()
        z0[model.sl_gamma] += offs
        dz, th = tangent_proxy(model, z0, eq.z_star)
        out.append((offs, z0, dz, th, cert.value(dz)))
    return sweep, out


def test_criterion_1_symmetry(bench):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        z, u, th = random_state(bench, rng), random_input(bench, rng), rng.uniform(-np.pi, np.pi)
        lhs = vector_field(bench, group_action(bench, z, th), u)
        rhs = h_matrix(bench, th) @ vector_field(bench, z, u)
        worst = max(worst, np.max(np.abs(lhs - rhs)))
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and dt < 1.0
    assert report(1, "symmetry invariance", ok, f"max inf-norm {worst:.2e}, {dt:.2f} s")


def test_criterion_2_equilibrium(bench):
    t0 = time.perf_counter()
    eq = solve_equilibrium(bench)
    i_dc = feasible_input(bench, eq.z_star)[bench.sl_vdc]
    vdc = eq.z_star[bench.sl_vdc]
    dt = time.perf_counter() - t0
    rel = np.max(np.abs(i_dc - 37.23)) / 37.23
    ok = eq.residual_norm < 1e-10 and np.all(vdc == 0) and rel < 0.02 and dt < 1.0
    assert report(2, "benchmark equilibrium", ok,
                  f"residual {eq.residual_norm:.2e}, |v_dc| {np.max(np.abs(vdc)):.1e}, "
                  f"i_dc {i_dc.round(3).tolist()}, {dt:.2f} s")


def test_criterion_3_condition(bench, bench_b0):
    t0 = time.perf_counter()
    thr = condition1_threshold(bench.conv)
    good = check_condition1(bench, solve_equilibrium(bench))
    bad = check_condition1(bench_b0, solve_equilibrium(bench_b0))
    dt = time.perf_counter() - t0
    ok = (thr == 34031.25 and all(r.passed for r in good) and not any(r.passed for r in bad)
          and dt < 1.0)
    assert report(3, "reactive-power condition", ok,
                  f"threshold {thr}, q_sw b=1.08 {[round(r.q_sw, 1) for r in good]}, "
                  f"b=0 {[round(r.q_sw, 1) for r in bad]}, {dt:.2f} s")


def test_criterion_4_jacobian(bench, bench_eq):
    t0 = time.perf_counter()
    zs = bench_eq.z_star
    rng = np.random.default_rng(104)
    fd_err = cross = 0.0
    for _ in range(20):
        d = rng.standard_normal(bench.N)
        z = zs + d / np.linalg.norm(d) * rng.uniform(0, 1)
        A = jacobian_matrix(bench, z)
        fd_err = max(fd_err, np.linalg.norm(A - fd_jacobian(bench, z)) / np.linalg.norm(A))
        diff = A - jacobian_matrix(bench, zs)
        G = deviation_matrix(bench, z, zs)
        cross = max(cross, np.max(np.abs(diff - G)) / max(1.0, np.max(np.abs(diff))))
    As = jacobian_matrix(bench, zs)
    v = zero_direction(bench, zs)
    av = np.linalg.norm(As @ v) / (np.linalg.norm(As) * np.linalg.norm(v))
    dt = time.perf_counter() - t0
    ok = fd_err < 1e-6 and av < 1e-8 and cross < 1e-9 and dt < 5.0
    assert report(4, "Jacobian correctness", ok,
                  f"FD {fd_err:.1e}, Av {av:.1e}, cross-path {cross:.1e}, {dt:.2f} s")


def test_criterion_5_spectrum(bench, bench_eq):
    t0 = time.perf_counter()
    A = jacobian_matrix(bench, bench_eq.z_star)
    eigs = np.linalg.eigvals(A)
    zero = np.abs(eigs) < 1e-8 * np.linalg.norm(A, 2)
    dt = time.perf_counter() - t0
    ok = zero.sum() == 1 and len(eigs) == 14 and np.all(eigs[~zero].real < 0) and dt < 1.0
    assert report(5, "spectrum", ok,
                  f"{zero.sum()} zero eigenvalue(s), abscissa of the rest "
                  f"{eigs[~zero].real.max():.4g}, {dt:.2f} s")


def test_criterion_6_certificate(bench, bench_eq):
    from matchsync.linearization import lyapunov_certificate
    t0 = time.perf_counter()
    c = lyapunov_certificate(bench, bench_eq)
    Pi, P, v, A = c.pi_matrix, c.p_matrix, c.v_star, c.a_matrix
    ev, vecs = np.linalg.eigh(Pi)
    psd = ev[0] >= -1e-12 * ev[-1]
    # rank N-1: definite on the complement of v, with v spanning the kernel
    U = null_space(v[None, :])
    try:
        np.linalg.cholesky(U.T @ Pi @ U)
        rank_ok = abs(vecs[:, 0] @ v) / np.linalg.norm(v) > 1 - 1e-9
    except np.linalg.LinAlgError:
        rank_ok = False
    piv = np.linalg.norm(Pi @ v) / (np.linalg.norm(Pi, 2) * np.linalg.norm(v))
    rng = np.random.default_rng(106)
    D = rng.standard_normal((1000, bench.N))
    D -= np.outer(D @ P @ v / (v @ P @ v), v)
    vals = np.einsum("ij,jk,ik->i", D, Pi @ A + A.T @ Pi, D)
    dt = time.perf_counter() - t0
    ok = psd and rank_ok and piv < 1e-12 and np.all(vals < 0) and dt < 5.0
    assert report(6, "certificate validity", ok,
                  f"min eig {ev[0]:.1e}, rank N-1 {rank_ok}, |Pi v| {piv:.1e}, "
                  f"{np.sum(vals < 0)}/1000 decreasing, {dt:.2f} s")


def test_criterion_7_variational(bench, bench_eq, bench_cert):
    t0 = time.perf_counter()
    rng = np.random.default_rng(107)
    # (a) tangent dynamics against two-trajectory central differences
    z0 = bench_eq.z_star.copy()
    z0[bench.sl_gamma] += [0.4, -0.3]
    d0 = rng.standard_normal(bench.N)
    d0 /= np.linalg.norm(d0)
    h = 1e-4
    tv = integrate_variational(bench, z0, d0, bench_eq.u_star, t_end=0.1, record_every=100)
    plus = integrate(bench, z0 + h * d0, bench_eq.u_star, t_end=0.1, record_every=100).states
    minus = integrate(bench, z0 - h * d0, bench_eq.u_star, t_end=0.1, record_every=100).states
    fd = (plus - minus) / (2 * h)
    fd_err = np.max(np.linalg.norm(fd - tv.variational, axis=1)
                    / np.linalg.norm(tv.variational, axis=1))
    # (b) V(dz(t)) step by step for every grid start with V(dz0) <= epsilon
    _, samples = grid_samples(bench, bench_eq, bench_cert)
    inside = [s for s in samples if s[4] <= EPSILON]
    worst, bad = -np.inf, 0
    for offs, z0, dz, th, v0 in inside:
        start = group_action(bench, z0, -th)
        tr = integrate_variational(bench, start, dz, bench_eq.u_star, t_end=0.1,
                                   cert=bench_cert)
        inc = np.diff(tr.lyapunov)
        rel = inc.max() / v0 if v0 > 0 else (0.0 if inc.max() <= 0 else np.inf)
        worst = max(worst, rel)
        bad += bool(np.any(inc > 1e-9 * v0))
    dt = time.perf_counter() - t0
    ok = fd_err < 1e-4 and bad == 0 and dt < 30.0
    assert report(7, "variational consistency", ok,
                  f"FD rel err {fd_err:.1e}; V non-increasing for {len(inside) - bad}/"
                  f"{len(inside)} starts with V0 <= {EPSILON} (worst step increase "
                  f"{worst:.1e} V0); {dt:.1f} s")


@pytest.fixture(scope="module")
def region(bench, bench_eq, bench_cert):
    t0 = time.perf_counter()
    sweep = SweepSpec.grid(bench.n, 41)
    est = estimate_region(bench, bench_eq, bench_cert, sweep, workers=os.cpu_count() or 1)
    return est, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_8_region(bench, bench_eq, region):
    est, elapsed = region
    zs = bench_eq.z_star
    xs = zs[bench.sl_x]
    inside = [s for s in est.samples if s.v0 <= EPSILON]
    fails = []
    for s in inside:
        z = s.final_state
        _, th = tangent_proxy(bench, z, zs)
        ang = wrap_angle(np.diff(z[bench.sl_gamma] - zs[bench.sl_gamma]))
        ac = group_action(bench, zs, th)[bench.sl_x]
        ac_err = np.linalg.norm(z[bench.sl_x] - ac) / np.linalg.norm(xs)
        ok = (s.converged and np.max(np.abs(ang)) < 1e-4
              and np.max(np.abs(z[bench.sl_vdc])) < 1e-4 * bench.conv.v_dc_star and ac_err < 0.01)
        if not ok:
            fails.append(s.index)
    summ = region_summary(est, EPSILON)
    ok = len(inside) > 0 and not fails
    assert report(8, "region sweep", ok,
                  f"{len(inside) - len(fails)}/{len(inside)} starts with V0 <= {EPSILON} "
                  f"converge and synchronize; grid {summ['converged']}/{summ['samples']} "
                  f"converged, epsilon_star {est.epsilon_star:.4g}, {elapsed:.0f} s")


def test_criterion_9_quotient(bench, bench_eq):
    t0 = time.perf_counter()
    rng = np.random.default_rng(109)
    z0 = bench_eq.z_star.copy()
    z0[bench.sl_gamma] += [0.4, -0.3]
    z0[bench.sl_x] += rng.standard_normal(bench.N - 2 * bench.n)
    base = integrate(bench, z0, bench_eq.u_star, t_end=0.5, record_every=500).states
    worst = 0.0
    for th in rng.uniform(-np.pi, np.pi, 10):
        moved = integrate(bench, group_action(bench, z0, th), bench_eq.u_star, t_end=0.5,
                          record_every=500).states
        d = moved - np.array([group_action(bench, s, th) for s in base])
        d[:, bench.sl_gamma] = wrap_angle(d[:, bench.sl_gamma])
        worst = max(worst, np.max(np.abs(d)))
    dt = time.perf_counter() - t0
    ok = worst < 1e-7 and dt < 30.0
    assert report(9, "quotient-system property", ok, f"max deviation {worst:.1e}, {dt:.2f} s")
