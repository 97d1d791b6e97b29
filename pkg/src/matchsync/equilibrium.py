"""Synchronous equilibria, feasible inputs and the decentralized reactive-power test."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .linearization import jacobian_matrix
from .model import (
    ConverterParams, LineParams, Model, SystemState, Topology, _as_z, assemble_model,
    rot_columns, quotient_distance, vector_field, J2,
)


class NoConvergence(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


class RankDeficiency(RuntimeError):
    pass


@dataclass(frozen=True)
class ConditionRecord:
    k: int
    q_sw: float
    threshold: float
    margin: float
    passed: bool

    def to_dict(self) -> dict:
        return {"k": self.k, "q_sw": self.q_sw, "threshold": self.threshold,
                "margin": self.margin, "pass": self.passed}


@dataclass(frozen=True, eq=False)
class Equilibrium:
    """Gauge-fixed steady state.

    ``residual_norm`` is the sup-norm of ``K f(z*, u*)``, the equilibrium
    equations in physical units; ``raw_residual`` is ``|f(z*, u*)|_inf``,
    which carries the 1/L, 1/C factors and hence a larger rounding floor.
    """

    z_star: np.ndarray
    u_star: np.ndarray
    gauge_angle: float
    residual_norm: float
    raw_residual: float
    iterations: int
    slack: float
    condition1: tuple[ConditionRecord, ...] = field(default=())

    def state(self, model: Model) -> SystemState:
        return model.state(self.z_star)


def feasible_input(model: Model, z) -> np.ndarray:
    """Input whose DC block is (mu/2) r(gamma_k)^T i_k, other blocks zero."""
    z = _as_z(model, z)
    r = rot_columns(z[model.sl_gamma])
    i = z[model.sl_i].reshape(model.n, 2)
    return model.input_from_dc(0.5 * model.conv.mu * np.einsum("kj,kj->k", r, i))


def equation_residual(model: Model, z, u) -> np.ndarray:
    """K f(z, u): the equilibrium equations before division by the storage constants."""
    return vector_field(model, z, u) / model.k_inv


def ac_steady_state(model: Model, gamma, v_dc_tilde=None) -> np.ndarray:
    """Solve the linear AC subsystem for x with angles and DC voltages frozen."""
    n = model.n
    z = np.zeros(model.N)
    z[model.sl_gamma] = gamma
    if v_dc_tilde is not None:
        z[model.sl_vdc] = v_dc_tilde
    A = jacobian_matrix(model, z)
    b = vector_field(model, z)[model.sl_x]
    z[model.sl_x] = np.linalg.solve(A[2 * n:, 2 * n:], -b)
    return z


def solve_equilibrium(model: Model, u=None, gauge_angle: float = 0.0, guess=None,
                      max_iter: int = 50, tol: float = 1e-10, balance: str = "uniform",
                      rcond: float = 1e-13) -> Equilibrium:
    """Bordered Newton for ``f(z, u) = 0`` with ``gamma_1`` pinned to ``gauge_angle``.

    With ``balance="uniform"`` a common offset ``s`` is added to every DC
    current and solved for alongside ``z``, so that a dispatch which is only
    approximately feasible (rounded data) still has an exact equilibrium; the
    offset is reported as ``slack`` and ``u_star`` includes it.  With
    ``balance="none"`` the input is used as given and the (N+1) x N bordered
    system is solved in the least-squares sense.
    """
    if balance not in ("uniform", "none"):
        raise ValueError(f"unknown balance mode {balance!r}")
    N, n = model.N, model.n
    u = model.nominal_input() if u is None else np.asarray(u, dtype=float)
    if u.shape != (N,):
        raise ValueError(f"input has shape {u.shape}, expected ({N},)")
    mask = np.ones(N, dtype=bool)
    mask[model.sl_vdc] = False
    if np.any(u[mask] != 0):
        raise ValueError("input must be nonzero only in the DC-current block")
    if guess is None:
        z = ac_steady_state(model, np.full(n, gauge_angle))
    else:
        z = _as_z(model, guess).copy()
    k_diag = 1.0 / model.k_inv
    e_dc = model.input_from_dc(1.0)
    use_slack = balance == "uniform"
    s = 0.0

    def residual(z, s):
        res = np.empty(N + 1)
        res[:N] = equation_residual(model, z, u + s * e_dc)
        res[N] = z[0] - gauge_angle
        return res

    res = residual(z, s)
    it = 0
    while True:
        if np.max(np.abs(res)) <= tol:
            break
        if it >= max_iter:
            raise NoConvergence(
                f"Newton did not converge in {max_iter} iterations "
                f"(residual {np.max(np.abs(res)):.3e})", float(np.max(np.abs(res))))
        A = jacobian_matrix(model, z) * k_diag[:, None]
        cols = N + 1 if use_slack else N
        Jb = np.zeros((N + 1, cols))
        Jb[:N, :N] = A
        Jb[N, 0] = 1.0
        if use_slack:
            Jb[:N, N] = e_dc
        sv = np.linalg.svd(Jb, compute_uv=False)
        if sv[-1] <= rcond * sv[0]:
            raise RankDeficiency(
                f"bordered Jacobian is rank deficient (sigma_min/sigma_max = {sv[-1] / sv[0]:.2e})")
        step = np.linalg.lstsq(Jb, -res, rcond=None)[0]
        z = z + step[:N]
        if use_slack:
            s += step[N]
        new_res = residual(z, s)
        it += 1
        if not np.all(np.isfinite(new_res)):
            raise NoConvergence("Newton iterate became non-finite", float("inf"))
        # least-squares stagnation on an inconsistent input
        if not use_slack and np.max(np.abs(new_res)) > 0.999 * np.max(np.abs(res)) and it > 5:
            res = new_res
            raise NoConvergence(
                f"Newton stagnated (residual {np.max(np.abs(res)):.3e}); input is not feasible",
                float(np.max(np.abs(res))))
        res = new_res
    u_star = u + s * e_dc
    eq = Equilibrium(
        z_star=z, u_star=u_star, gauge_angle=float(gauge_angle),
        residual_norm=float(np.max(np.abs(equation_residual(model, z, u_star)))),
        raw_residual=float(np.max(np.abs(vector_field(model, z, u_star)))),
        iterations=it, slack=float(s),
    )
    return _with_condition(model, eq)


def _with_condition(model: Model, eq: Equilibrium) -> Equilibrium:
    object.__setattr__(eq, "condition1", tuple(check_condition1(model, eq)))
    return eq


def reactive_power_sw(model: Model, z) -> np.ndarray:
    """Q_sw,k = (mu/2) (J r(gamma_k))^T i_k v*_dc for every converter."""
    z = _as_z(model, z)
    r = rot_columns(z[model.sl_gamma])
    jr = r @ J2.T
    i = z[model.sl_i].reshape(model.n, 2)
    c = model.conv
    return 0.5 * c.mu * np.einsum("kj,kj->k", jr, i) * c.v_dc_star


def condition1_threshold(conv: ConverterParams) -> float:
    return conv.mu ** 2 * conv.v_dc_star ** 2 / (16.0 * conv.r_filter)


def check_condition1(model: Model, eq, rel_margin: float = 0.0) -> list[ConditionRecord]:
    """Per-converter test ``Q_sw,k > mu^2 v*_dc^2 / (16 R)``.

    ``eq`` may be an :class:`Equilibrium` or a raw state vector.  A converter
    passes when ``q_sw - threshold > rel_margin * threshold``.
    """
    z = eq.z_star if isinstance(eq, Equilibrium) else eq
    q = reactive_power_sw(model, z)
    thr = condition1_threshold(model.conv)
    return [ConditionRecord(k, float(q[k]), thr, float(q[k] - thr),
                            bool(q[k] - thr > rel_margin * thr))
            for k in range(model.n)]


def synchronization_report(model: Model, eq) -> dict:
    """Relative frequencies eta * vdc_tilde and absolute DC voltages."""
    z = _as_z(model, eq.z_star if isinstance(eq, Equilibrium) else eq)
    vt = z[model.sl_vdc]
    return {"omega": model.conv.eta * vt, "v_dc": vt + model.conv.v_dc_star}


def find_equilibria(model: Model, u=None, spreads=None, gauge_angle: float = 0.0,
                    distinct_tol: float = 1e-4, **kw) -> list[Equilibrium]:
    """Run the solver from several initial angle spreads and keep distinct orbits.

    ``spreads`` is an iterable of length-n angle offsets added to the gauge
    angle for the initial guess; defaults to a uniform sweep of the last
    n - 1 angles.
    """
    n = model.n
    if spreads is None:
        base = np.linspace(-math.pi, math.pi, 8, endpoint=False)
        spreads = [np.concatenate([[0.0], np.full(n - 1, b)]) for b in base]
    found: list[Equilibrium] = []
    for sp in spreads:
        guess = ac_steady_state(model, gauge_angle + np.asarray(sp, dtype=float))
        try:
            eq = solve_equilibrium(model, u, gauge_angle, guess=guess, **kw)
        except (NoConvergence, RankDeficiency):
            continue
        if all(quotient_distance(model, eq.z_star, f.z_star)[0] > distinct_tol for f in found):
            found.append(eq)
    return found


def synchronous_dc_current(conv: ConverterParams, line: LineParams, topo: Topology,
                           omega_n: float) -> float:
    """Feasible DC current of the all-angles-equal steady state (node 0)."""
    model = assemble_model(conv, line, topo, omega_n)
    z = ac_steady_state(model, np.zeros(model.n))
    return float(feasible_input(model, z)[model.sl_vdc][0])


def calibrate_omega_n(conv: ConverterParams, line: LineParams, topo: Topology,
                      target_i_dc: float, bracket=(1.0, 1500.0)) -> float:
    """Nominal frequency (rad/s) at which the synchronous steady state draws ``target_i_dc``.

    The feasible DC current is not monotone in frequency; the root inside
    ``bracket`` is returned.
    """
    return brentq(lambda w: synchronous_dc_current(conv, line, topo, w) - target_i_dc,
                  *bracket, xtol=1e-12, rtol=1e-14)


def equilibrium_to_dict(model: Model, eq: Equilibrium) -> dict:
    z = eq.z_star
    sync = synchronization_report(model, eq)
    return {
        "gamma": z[model.sl_gamma].tolist(),
        "v_dc_tilde": z[model.sl_vdc].tolist(),
        "x": z[model.sl_x].tolist(),
        "u_dc": eq.u_star[model.sl_vdc].tolist(),
        "feasible_u_dc": feasible_input(model, z)[model.sl_vdc].tolist(),
        "gauge_angle": eq.gauge_angle,
        "residual": eq.residual_norm,
        "raw_residual": eq.raw_residual,
        "iterations": eq.iterations,
        "slack": eq.slack,
        "omega": sync["omega"].tolist(),
        "v_dc": sync["v_dc"].tolist(),
        "condition1": [rec.to_dict() for rec in eq.condition1],
    }
