"""Time integration, convergence classification and region-of-contraction sweeps."""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .equilibrium import Equilibrium
from .kernels import run_batch
from .linearization import LyapunovCertificate
from .model import Model, _as_z, group_action, quotient_distance, vector_field, wrap_angle


class DivergenceError(RuntimeError):
    def __init__(self, msg, time):
        super().__init__(msg)
        self.time = time


class CertificateMissing(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    variational: np.ndarray | None = None
    lyapunov: np.ndarray | None = None
    distances: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.times)
        if t.ndim != 1 or (t.size > 1 and np.any(np.diff(t) <= 0)):
            raise ValueError("times must be a strictly increasing 1-D grid")
        for name in ("states", "variational", "lyapunov", "distances"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != t.size:
                raise ValueError(f"{name} has length {len(arr)}, expected {t.size}")

    def __len__(self):
        return self.times.size


def _record_grid(t_end: float, dt: float, record_every: int):
    if dt <= 0 or t_end <= 0:
        raise ValueError("dt and t_end must be positive")
    n_steps = int(round(t_end / dt))
    if n_steps < 1 or abs(n_steps * dt - t_end) > 1e-9 * max(t_end, 1.0):
        raise ValueError(f"t_end={t_end} is not a whole number of steps of dt={dt}")
    if n_steps % record_every:
        raise ValueError("the step count must be a multiple of record_every")
    return n_steps, dt * record_every * np.arange(n_steps // record_every + 1)


def integrate(model: Model, z0, u=None, t_end: float = 1.0, dt: float = 1e-5,
              method: str = "rk4", record_every: int = 1, rtol: float = 1e-9,
              atol: float = 1e-9, blowup: float = 1e6, reference=None,
              backend: str | None = None) -> Trajectory:
    """Integrate the network from ``z0``.

    ``method="rk4"`` is fixed-step classical RK4 (compiled kernel when
    available); ``"rk45"`` is scipy's adaptive Dormand-Prince with the given
    tolerances, sampled on the same output grid.  When ``reference`` (a state
    on the target orbit) is given, quotient distances to it are recorded.
    """
    z0 = _as_z(model, z0)
    u = model.nominal_input() if u is None else np.asarray(u, dtype=float)
    n_steps, times = _record_grid(t_end, dt, record_every)
    if method == "rk4":
        rec, _, status, zf, _ = run_batch(model, z0[None], u, dt, n_steps, record_every,
                                          blowup=blowup, backend=backend)
        if status[0] >= 0:
            raise DivergenceError(f"state left |z| <= {blowup:g} at t = {status[0] * dt:.6g} s",
                                  float(status[0] * dt))
        states = rec[0]
    elif method == "rk45":
        def blow(t, z):
            return blowup - np.max(np.abs(z)) if np.all(np.isfinite(z)) else -1.0
        blow.terminal = True
        sol = solve_ivp(lambda t, z: vector_field(model, z, u), (0.0, times[-1]), z0,
                        method="RK45", t_eval=times, rtol=rtol, atol=atol, events=blow)
        if sol.status == 1 or not np.all(np.isfinite(sol.y)):
            tb = float(sol.t_events[0][0]) if sol.t_events[0].size else float(sol.t[-1])
            raise DivergenceError(f"state left |z| <= {blowup:g} at t = {tb:.6g} s", tb)
        if sol.status != 0:
            raise RuntimeError(f"adaptive integration failed: {sol.message}")
        states = sol.y.T.copy()
    else:
        raise ValueError(f"unknown method {method!r}")
    dist = None
    if reference is not None:
        dist = np.array([quotient_distance(model, s, reference)[0] for s in states])
    return Trajectory(times, states, distances=dist)


def integrate_variational(model: Model, z0, delta_z0, u=None, t_end: float = 1.0,
                          dt: float = 1e-5, record_every: int = 1,
                          cert: LyapunovCertificate | None = None, blowup: float = 1e6,
                          backend: str | None = None) -> Trajectory:
    """Co-integrate the state and its tangent vector with RK4.

    The tangent follows the analytic Jacobian along the computed solution.
    With ``cert`` the value ``V(dz(t))`` is recorded at every output time.
    """
    z0 = _as_z(model, z0)
    dz0 = np.asarray(delta_z0, dtype=float)
    if dz0.shape != z0.shape:
        raise ValueError(f"delta_z0 has shape {dz0.shape}, expected {z0.shape}")
    u = model.nominal_input() if u is None else np.asarray(u, dtype=float)
    n_steps, times = _record_grid(t_end, dt, record_every)
    rec, rec_dz, status, _, _ = run_batch(model, z0[None], u, dt, n_steps, record_every,
                                          dZ0=dz0[None], blowup=blowup, backend=backend)
    if status[0] >= 0:
        raise DivergenceError(f"integration diverged at t = {status[0] * dt:.6g} s",
                              float(status[0] * dt))
    lyap = None
    if cert is not None:
        lyap = np.einsum("ij,jk,ik->i", rec_dz[0], cert.pi_matrix, rec_dz[0])
    return Trajectory(times, rec[0], variational=rec_dz[0], lyapunov=lyap)


# --- orbit distances for many states at once ----------------------------------

def batch_orbit_distance(model: Model, Z, z_ref, newton_steps: int = 4):
    """Unweighted quotient distance from each row of ``Z`` to the orbit of ``z_ref``.

    Newton iterations on the rotation angle start from the AC alignment angle
    and from the circular mean of the angle differences; the smallest value
    found is returned, so the result never underestimates the exact distance.
    Near the orbit both starts coincide with the minimizer.
    """
    Z = np.asarray(Z, dtype=float)
    z_ref = _as_z(model, z_ref)
    n = model.n
    shape = Z.shape[:-1]
    Z2 = Z.reshape(-1, model.N)
    dg = Z2[:, :n] - z_ref[:n]
    dv2 = np.sum((Z2[:, n:2 * n] - z_ref[n:2 * n]) ** 2, axis=1)
    x = Z2[:, 2 * n:].reshape(len(Z2), -1, 2)
    xr = z_ref[2 * n:].reshape(-1, 2)
    c = np.einsum("skj,kj->s", x, xr)
    jxr = np.stack([-xr[:, 1], xr[:, 0]], axis=1)
    s = np.einsum("skj,kj->s", x, jxr)

    def exact(th):
        ct, st = np.cos(th)[:, None], np.sin(th)[:, None]
        rx0 = ct * xr[None, :, 0] - st * xr[None, :, 1]
        rx1 = st * xr[None, :, 0] + ct * xr[None, :, 1]
        ax = np.sum((x[..., 0] - rx0) ** 2 + (x[..., 1] - rx1) ** 2, axis=1)
        ang = np.sum(wrap_angle(dg - th[:, None]) ** 2, axis=1)
        return ang + dv2 + ax

    best_v = np.full(len(Z2), np.inf)
    best_t = np.zeros(len(Z2))
    starts = (np.arctan2(s, c), np.arctan2(np.sum(np.sin(dg), 1), np.sum(np.cos(dg), 1)))
    for th in starts:
        th = th.copy()
        for _ in range(newton_steps + 1):
            val = exact(th)
            better = val < best_v
            best_v = np.where(better, val, best_v)
            best_t = np.where(better, th, best_t)
            w = wrap_angle(dg - th[:, None])
            grad = -2.0 * np.sum(w, axis=1) + 2.0 * (c * np.sin(th) - s * np.cos(th))
            hess = 2.0 * n + 2.0 * (c * np.cos(th) + s * np.sin(th))
            th = np.where(hess > 0, th - grad / np.where(hess > 0, hess, 1.0), th)
    dist = np.sqrt(np.maximum(best_v, 0.0))
    dist[~np.all(np.isfinite(Z2), axis=1)] = np.nan
    return dist.reshape(shape), wrap_angle(best_t).reshape(shape)


def classify_convergence(model: Model, traj: Trajectory, eq: Equilibrium, tol: float = 1e-4,
                         window: float | None = None) -> dict:
    """Converged iff the orbit distance stays below ``tol`` over the trailing window.

    ``window`` defaults to 20% of the trajectory length.  ``time_to_converge``
    is the first recorded time after which the distance stays below ``tol``
    (``None`` when not converged).
    """
    t = traj.times
    T = t[-1] - t[0]
    window = 0.2 * T if window is None else window
    if window < 0 or window > T:
        raise ValueError("window must lie within the trajectory span")
    dist = traj.distances
    if dist is None:
        dist = np.array([quotient_distance(model, s, eq.z_star)[0] for s in traj.states])
    dist = np.where(np.isfinite(dist), dist, np.inf)
    final = float(quotient_distance(model, traj.states[-1], eq.z_star)[0]) \
        if np.all(np.isfinite(traj.states[-1])) else math.inf
    dist = dist.copy()
    dist[-1] = final
    in_window = t >= t[-1] - window - 1e-12 * max(T, 1.0)
    converged = bool(np.all(dist[in_window] < tol))
    ttc = None
    if converged:
        bad = np.flatnonzero(dist >= tol)
        ttc = float(t[bad[-1] + 1] - t[0]) if bad.size else 0.0
    return {"converged": converged, "final_distance": final, "time_to_converge": ttc}


# --- region sweeps ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SweepSpec:
    """Initial angle offsets (K, n) with an optional grid description."""

    offsets: np.ndarray
    description: dict = field(default_factory=dict)

    @classmethod
    def grid(cls, n: int = 2, points: int = 41, lo: float = -math.pi / 2,
             hi: float = math.pi / 2) -> "SweepSpec":
        if points < 1:
            raise ValueError("points must be positive")
        if points ** n > 10 ** 6:
            raise ValueError(f"{points}^{n} grid points is too many")
        axis = np.linspace(lo, hi, points) if points > 1 else np.array([0.5 * (lo + hi)])
        offs = np.array(list(itertools.product(axis, repeat=n)), dtype=float)
        return cls(offs, {"kind": "grid", "points": points, "lo": lo, "hi": hi, "n": n})

    @classmethod
    def from_offsets(cls, offsets) -> "SweepSpec":
        offs = np.atleast_2d(np.asarray(offsets, dtype=float))
        return cls(offs, {"kind": "explicit", "count": len(offs)})


@dataclass(frozen=True, eq=False)
class RegionSample:
    index: int
    offset: np.ndarray
    initial_state: np.ndarray
    theta0: float
    v0: float
    converged: bool
    diverged: bool
    final_distance: float
    time_to_converge: float | None
    horizon: float
    final_state: np.ndarray


@dataclass(frozen=True, eq=False)
class RegionEstimate:
    samples: list
    epsilon_star: float
    grid_spec: dict


def tangent_proxy(model: Model, z0, z_star):
    """Displacement of ``z0`` from its nearest orbit point, pulled back to ``z_star``.

    Returns ``(dz, theta)`` where ``theta`` is the rotation of the nearest
    orbit point; ``dz = g_{-theta}(z0) - z_star`` with wrapped angles, so that
    it can be measured with a certificate built at ``z_star``.
    """
    _, th = quotient_distance(model, z0, z_star)
    dz = group_action(model, z0, -th) - _as_z(model, z_star)
    dz[model.sl_gamma] = wrap_angle(dz[model.sl_gamma])
    return dz, th


def epsilon_star(v0, converged) -> float:
    """Largest sampled level ``eps`` such that every sample with ``v0 <= eps`` converged.

    Zero when no converged sample lies below the smallest non-converged one.
    """
    v0 = np.asarray(v0, dtype=float)
    conv = np.asarray(converged, dtype=bool)
    if conv.all():
        return float(v0.max()) if v0.size else 0.0
    bound = v0[~conv].min()
    ok = v0[conv & (v0 < bound)]
    return float(ok.max()) if ok.size else 0.0


def _run_chunk(model, Z, u, dt, n_steps, record_every, backend, workers):
    if workers <= 1 or len(Z) < 2 * workers:
        return run_batch(model, Z, u, dt, n_steps, record_every, backend=backend)
    parts = np.array_split(np.arange(len(Z)), workers)
    with ThreadPoolExecutor(workers) as ex:
        outs = list(ex.map(lambda idx: run_batch(model, Z[idx], u, dt, n_steps, record_every,
                                                 backend=backend), parts))
    return (np.concatenate([o[0] for o in outs]), None, np.concatenate([o[2] for o in outs]),
            np.concatenate([o[3] for o in outs]), None)


def estimate_region(model: Model, eq: Equilibrium, cert: LyapunovCertificate | None,
                    sweep: SweepSpec, horizon: float | None = None, dt: float = 1e-5,
                    tol: float = 1e-4, window_frac: float = 0.2, chunk: float = 2.5,
                    max_horizon: float = 300.0, record_dt: float = 0.01,
                    workers: int = 1, backend: str | None = None) -> RegionEstimate:
    """Classify convergence of angle-offset initial conditions.

    Each sample starts at the equilibrium with angles ``gamma* + offset`` and
    every other coordinate unchanged.  With a fixed ``horizon`` a sample
    converged iff its orbit distance is below ``tol`` over the last
    ``window_frac * horizon`` seconds.  With ``horizon=None`` the horizon is
    adaptive: samples are advanced in chunks and each one stops at the first
    chunk end ``T`` where the same test passes on ``[(1 - window_frac) T, T]``,
    or is declared non-converged at ``max_horizon``.
    """
    if cert is None:
        raise CertificateMissing("region estimation needs a Lyapunov certificate")
    if not 0 < window_frac <= 1:
        raise ValueError("window_frac must be in (0, 1]")
    offs = np.asarray(sweep.offsets, dtype=float)
    if offs.ndim != 2 or offs.shape[1] != model.n:
        raise ValueError(f"offsets must have shape (K, {model.n})")
    K = len(offs)
    zs = eq.z_star
    Z0 = np.repeat(zs[None], K, axis=0)
    Z0[:, model.sl_gamma] += offs
    v0 = np.empty(K)
    theta0 = np.empty(K)
    for k in range(K):
        dz, theta0[k] = tangent_proxy(model, Z0[k], zs)
        v0[k] = cert.value(dz)

    rec_every = max(1, int(round(record_dt / dt)))
    if horizon is not None:
        step_chunk = int(round(horizon / dt))
        if step_chunk < 1 or abs(step_chunk * dt - horizon) > 1e-9 * max(horizon, 1.0):
            raise ValueError("horizon must be a whole number of steps")
        rec_every = math.gcd(rec_every, step_chunk)
        limit = step_chunk
    else:
        step_chunk = int(round(chunk / dt))
        step_chunk -= step_chunk % rec_every
        if step_chunk < rec_every:
            raise ValueError("chunk is shorter than the recording interval")
        limit = int(round(max_horizon / dt))

    # per-sample bookkeeping, in steps
    last_bad = np.full(K, -1, dtype=np.int64)  # last recorded step with distance >= tol
    d0 = batch_orbit_distance(model, Z0, zs)[0]
    last_bad[~(d0 < tol)] = 0
    done = np.zeros(K, dtype=bool)
    converged = np.zeros(K, dtype=bool)
    diverged = np.zeros(K, dtype=bool)
    stop_step = np.zeros(K, dtype=np.int64)
    Z = Z0.copy()
    elapsed = 0
    active = np.arange(K)
    while active.size:
        nstep = min(step_chunk, limit - elapsed)
        nstep -= nstep % rec_every
        if nstep <= 0:
            break
        rec, _, status, zf, _ = _run_chunk(model, Z[active], eq.u_star, dt, nstep, rec_every,
                                           backend, workers)
        d, _ = batch_orbit_distance(model, rec[:, 1:], zs)
        steps = elapsed + rec_every * np.arange(1, d.shape[1] + 1)
        Z[active] = zf
        bad = ~(d < tol)
        has_bad = bad.any(axis=1)
        last_idx = d.shape[1] - 1 - np.argmax(bad[:, ::-1], axis=1)
        last_bad[active[has_bad]] = steps[last_idx[has_bad]]
        elapsed += nstep
        blown = status >= 0
        if blown.any():
            idx = active[blown]
            diverged[idx] = True
            done[idx] = True
            stop_step[idx] = elapsed - nstep + status[blown]
        ok = ~blown & (last_bad[active] < (1.0 - window_frac) * elapsed)
        converged[active[ok]] = True
        done[active[ok]] = True
        stop_step[active[ok]] = elapsed
        if horizon is not None or elapsed >= limit:
            rest = active[~done[active]]
            stop_step[rest] = elapsed
            done[rest] = True
        active = active[~done[active]]

    samples = []
    for k in range(K):
        zf = Z[k]
        if np.all(np.isfinite(zf)):
            fd = float(quotient_distance(model, zf, zs)[0])
        else:
            fd = math.inf
        ttc = float((last_bad[k] + rec_every) * dt) if last_bad[k] >= 0 else 0.0
        samples.append(RegionSample(
            index=k, offset=offs[k].copy(), initial_state=Z0[k].copy(), theta0=float(theta0[k]),
            v0=float(v0[k]), converged=bool(converged[k]), diverged=bool(diverged[k]),
            final_distance=fd, time_to_converge=ttc if converged[k] else None,
            horizon=float(stop_step[k] * dt), final_state=zf.copy()))
    spec = dict(sweep.description)
    spec.update({"dt": dt, "tol": tol, "window_frac": window_frac,
                 "horizon": horizon if horizon is not None else "adaptive",
                 "max_horizon": None if horizon is not None else max_horizon,
                 "chunk": None if horizon is not None else step_chunk * dt})
    return RegionEstimate(samples, epsilon_star(v0, converged), spec)


# --- export -------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def trajectory_header(model: Model) -> list[str]:
    n, m = model.n, model.m
    cols = ["time"]
    cols += [f"gamma_{k + 1}" for k in range(n)]
    cols += [f"vdc_{k + 1}" for k in range(n)]
    cols += [f"i_{a}_{k + 1}" for k in range(n) for a in "dq"]
    cols += [f"v_{a}_{k + 1}" for k in range(n) for a in "dq"]
    cols += [f"il_{a}_{e + 1}" for e in range(m) for a in "dq"]
    return cols + ["V", "dist"]


def trajectory_csv(model: Model, traj: Trajectory) -> str:
    """CSV text of a trajectory; ``vdc`` columns hold the relative DC voltage."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trajectory_header(model))
    for k, t in enumerate(traj.times):
        V = "" if traj.lyapunov is None else _fmt(traj.lyapunov[k])
        dist = "" if traj.distances is None else _fmt(traj.distances[k])
        w.writerow([_fmt(t)] + [_fmt(x) for x in traj.states[k]] + [V, dist])
    return buf.getvalue()


def region_csv(est: RegionEstimate) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = len(est.samples[0].offset) if est.samples else 0
    w.writerow([f"dgamma{k + 1}" for k in range(n)]
               + ["v0", "converged", "final_distance", "time_to_converge", "diverged"])
    for s in est.samples:
        ttc = "" if s.time_to_converge is None else _fmt(s.time_to_converge)
        w.writerow([_fmt(x) for x in s.offset]
                   + [_fmt(s.v0), int(s.converged), _fmt(s.final_distance), ttc, int(s.diverged)])
    return buf.getvalue()


def region_summary(est: RegionEstimate, epsilon: float | None = None) -> dict:
    v0 = np.array([s.v0 for s in est.samples])
    conv = np.array([s.converged for s in est.samples], dtype=bool)
    out = {
        "epsilon_star": est.epsilon_star,
        "samples": len(est.samples),
        "converged": int(conv.sum()),
        "diverged": int(sum(s.diverged for s in est.samples)),
        "min_v0_not_converged": float(v0[~conv].min()) if (~conv).any() else None,
        "grid_spec": est.grid_spec,
        "tangent_proxy": "dz0 = initial state minus its nearest orbit point, "
                         "measured with the certificate at the equilibrium",
    }
    if epsilon is not None:
        inside = v0 <= epsilon
        out["epsilon"] = epsilon
        out["inside_epsilon"] = int(inside.sum())
        out["inside_epsilon_converged"] = int((inside & conv).sum())
    return out


def region_json(est: RegionEstimate, epsilon: float | None = None) -> str:
    return json.dumps(region_summary(est, epsilon), indent=2, sort_keys=True) + "\n"
