"""Network model of identical DC/AC converters under matching control.

State layout (block contiguous, dq pairs interleaved per node/edge)::

    z = [gamma (n), vdc_tilde (n), i (2n), v (2n), i_line (2m)]

so ``N = 6n + 2m``. Angles are stored unwrapped.
"""
from __future__ import annotations

import json
import math
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

J2 = np.array([[0.0, -1.0], [1.0, 0.0]])

DEFAULT_OMEGA_N = 100.0 * math.pi


class ParameterError(ValueError):
    """A physical or control parameter is outside its admissible domain."""


class TopologyError(ValueError):
    """Edge list is malformed or describes a disconnected graph."""


class ShapeError(ValueError):
    """Array dimensions do not match the model."""


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


@dataclass(frozen=True)
class ConverterParams:
    eta: float
    c_dc: float
    k_p: float
    mu: float
    r_filter: float
    l_filter: float
    c_filter: float
    g_load: float
    v_dc_star: float
    i_dc_star: float = 0.0
    b_load: float = 0.0

    def __post_init__(self):
        for name in ("eta", "c_dc", "k_p", "r_filter", "l_filter", "c_filter",
                     "g_load", "v_dc_star"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ParameterError(f"{name} must be > 0, got {val!r}")
        if not (0.0 <= self.mu <= 1.0):
            raise ParameterError(f"mu out of [0,1]: {self.mu!r}")
        if not (np.isfinite(self.b_load) and np.isfinite(self.i_dc_star)):
            raise ParameterError("b_load and i_dc_star must be finite")


@dataclass(frozen=True)
class LineParams:
    r_line: float
    l_line: float

    def __post_init__(self):
        for name in ("r_line", "l_line"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ParameterError(f"{name} must be > 0, got {val!r}")


@dataclass(frozen=True)
class Topology:
    n: int
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise TopologyError(f"n must be a positive integer, got {self.n!r}")
        edges = tuple((int(i), int(j)) for i, j in self.edges)
        for i, j in edges:
            if i == j:
                raise TopologyError(f"self-loop at node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise TopologyError(f"edge ({i}, {j}) references a missing node")
        object.__setattr__(self, "edges", edges)

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def incidence(self) -> np.ndarray:
        """Oriented incidence matrix, +1 at the tail i and -1 at the head j."""
        inc = np.zeros((self.n, self.m))
        for e, (i, j) in enumerate(self.edges):
            inc[i, e] = 1.0
            inc[j, e] = -1.0
        return inc

    def is_connected(self) -> bool:
        if self.n == 1:
            return True
        rows = [i for i, _ in self.edges]
        cols = [j for _, j in self.edges]
        adj = csr_matrix((np.ones(self.m), (rows, cols)), shape=(self.n, self.n))
        ncomp, _ = connected_components(adj, directed=False)
        return ncomp == 1


@dataclass(frozen=True)
class SystemState:
    """Blockwise view of a stacked state vector."""

    gamma: np.ndarray
    v_dc_tilde: np.ndarray
    i_f: np.ndarray
    v_c: np.ndarray
    i_line: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.i_f, self.v_c, self.i_line])

    def pack(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.v_dc_tilde, self.i_f, self.v_c, self.i_line])

    @classmethod
    def unpack(cls, z, n: int, m: int) -> "SystemState":
        z = np.asarray(z, dtype=float)
        if z.shape != (6 * n + 2 * m,):
            raise ShapeError(f"state has shape {z.shape}, expected ({6 * n + 2 * m},)")
        return cls(
            gamma=z[:n].copy(),
            v_dc_tilde=z[n:2 * n].copy(),
            i_f=z[2 * n:4 * n].copy(),
            v_c=z[4 * n:6 * n].copy(),
            i_line=z[6 * n:].copy(),
        )


@dataclass(frozen=True, eq=False)
class Model:
    conv: ConverterParams
    line: LineParams
    topo: Topology
    omega_n: float = DEFAULT_OMEGA_N
    # derived, filled in __post_init__
    z_r: np.ndarray = field(init=False, repr=False)
    z_c: np.ndarray = field(init=False, repr=False)
    z_l: np.ndarray = field(init=False, repr=False)
    b_mat: np.ndarray = field(init=False, repr=False)
    k_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        c, ln, w = self.conv, self.line, self.omega_n
        eye = np.eye(2)
        set_ = object.__setattr__
        # 2x2 per-node / per-edge impedance blocks
        set_(self, "z_r", c.r_filter * eye + c.l_filter * w * J2)
        set_(self, "z_c", c.g_load * eye + (c.c_filter * w + c.b_load) * J2)
        set_(self, "z_l", ln.r_line * eye + ln.l_line * w * J2)
        set_(self, "b_mat", np.kron(self.topo.incidence, eye))
        n, m = self.n, self.m
        k = np.concatenate([
            np.ones(n), np.full(n, c.c_dc), np.full(2 * n, c.l_filter),
            np.full(2 * n, c.c_filter), np.full(2 * m, ln.l_line),
        ])
        set_(self, "k_inv", 1.0 / k)
        for arr in (self.z_r, self.z_c, self.z_l, self.b_mat, self.k_inv):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.topo.n

    @property
    def m(self) -> int:
        return self.topo.m

    @property
    def N(self) -> int:
        return 6 * self.topo.n + 2 * self.topo.m

    # index helpers
    @property
    def sl_gamma(self) -> slice:
        return slice(0, self.n)

    @property
    def sl_vdc(self) -> slice:
        return slice(self.n, 2 * self.n)

    @property
    def sl_i(self) -> slice:
        return slice(2 * self.n, 4 * self.n)

    @property
    def sl_v(self) -> slice:
        return slice(4 * self.n, 6 * self.n)

    @property
    def sl_il(self) -> slice:
        return slice(6 * self.n, self.N)

    @property
    def sl_x(self) -> slice:
        return slice(2 * self.n, self.N)

    def block_diag(self, block: np.ndarray, count: int) -> np.ndarray:
        return np.kron(np.eye(count), block)

    @property
    def Z_R(self) -> np.ndarray:
        return self.block_diag(self.z_r, self.n)

    @property
    def Z_C(self) -> np.ndarray:
        return self.block_diag(self.z_c, self.n)

    @property
    def Z_l(self) -> np.ndarray:
        return self.block_diag(self.z_l, self.m)

    @property
    def J_x(self) -> np.ndarray:
        """Block-diagonal J acting on the AC signals x."""
        return self.block_diag(J2, 2 * self.n + self.m)

    def state(self, z) -> SystemState:
        return SystemState.unpack(z, self.n, self.m)

    def input_from_dc(self, u_dc) -> np.ndarray:
        """Embed DC-side currents into a full input vector in R^N."""
        u = np.zeros(self.N)
        u[self.sl_vdc] = np.broadcast_to(np.asarray(u_dc, dtype=float), (self.n,))
        return u

    def nominal_input(self) -> np.ndarray:
        return self.input_from_dc(self.conv.i_dc_star)


def assemble_model(conv: ConverterParams, line: LineParams, topo: Topology,
                   omega_n: float = DEFAULT_OMEGA_N) -> Model:
    if not (np.isfinite(omega_n) and omega_n > 0):
        raise ParameterError(f"omega_n must be > 0, got {omega_n!r}")
    if not topo.is_connected():
        raise TopologyError("network graph is not connected")
    return Model(conv, line, topo, float(omega_n))


def rot_columns(gamma) -> np.ndarray:
    """Stack r(gamma_k) = [-sin, cos] as rows, shape (n, 2)."""
    g = np.asarray(gamma, dtype=float)
    return np.stack([-np.sin(g), np.cos(g)], axis=-1)


def _as_z(model: Model, z) -> np.ndarray:
    if isinstance(z, SystemState):
        z = z.pack()
    z = np.asarray(z, dtype=float)
    if z.shape != (model.N,):
        raise ShapeError(f"state has shape {z.shape}, expected ({model.N},)")
    return z


def vector_field(model: Model, z, u=None) -> np.ndarray:
    """Right-hand side ``f(z, u)`` of the lumped network model.

    Only the DC-current block of ``u`` enters the dynamics.
    """
    z = _as_z(model, z)
    if u is None:
        u = np.zeros(model.N)
    u = np.asarray(u, dtype=float)
    if u.shape != (model.N,):
        raise ShapeError(f"input has shape {u.shape}, expected ({model.N},)")
    c = model.conv
    n = model.n
    gamma = z[model.sl_gamma]
    vt = z[model.sl_vdc]
    i = z[model.sl_i].reshape(n, 2)
    v = z[model.sl_v].reshape(n, 2)
    il = z[model.sl_il].reshape(model.m, 2)
    r = rot_columns(gamma)
    half_mu = 0.5 * c.mu

    rhs = np.empty(model.N)
    rhs[model.sl_gamma] = c.eta * vt
    rhs[model.sl_vdc] = -c.k_p * vt - half_mu * np.einsum("kj,kj->k", r, i) + u[model.sl_vdc]
    rhs[model.sl_i] = (-i @ model.z_r.T + half_mu * r * (vt + c.v_dc_star)[:, None] - v).ravel()
    inj = (model.topo.incidence @ il) if model.m else np.zeros((n, 2))
    rhs[model.sl_v] = (-v @ model.z_c.T - inj + i).ravel()
    if model.m:
        rhs[model.sl_il] = (-il @ model.z_l.T + model.topo.incidence.T @ v).ravel()
    return model.k_inv * rhs


def _reduce_angle(theta: float) -> float:
    return float(wrap_angle(theta))


def group_action(model: Model, z, theta: float) -> np.ndarray:
    """Shift all angles by theta and rotate every dq pair by R(theta).

    ``theta`` is reduced to (-pi, pi] first, so a full turn is the identity.
    """
    z = _as_z(model, z).copy()
    th = _reduce_angle(theta)
    z[model.sl_gamma] += th
    x = z[model.sl_x].reshape(-1, 2)
    z[model.sl_x] = (x @ rot2(th).T).ravel()
    return z


def orbit_generator(model: Model, z) -> np.ndarray:
    """Tangent of the group orbit at z: [1_n; 0_n; J x]."""
    z = _as_z(model, z)
    t = np.zeros(model.N)
    t[model.sl_gamma] = 1.0
    t[model.sl_x] = (z[model.sl_x].reshape(-1, 2) @ J2.T).ravel()
    return t


def _quotient_residuals(model: Model, z1, z2, thetas):
    """Difference vectors (len(thetas), N) between z1 and R(theta) z2."""
    n = model.n
    th = np.atleast_1d(np.asarray(thetas, dtype=float))
    d = np.empty((th.size, model.N))
    d[:, :n] = wrap_angle(z1[:n][None, :] - z2[:n][None, :] - th[:, None])
    d[:, n:2 * n] = z1[n:2 * n] - z2[n:2 * n]
    x1 = z1[2 * n:].reshape(-1, 2)
    x2 = z2[2 * n:].reshape(-1, 2)
    c, s = np.cos(th)[:, None], np.sin(th)[:, None]
    rx_d = c * x2[None, :, 0] - s * x2[None, :, 1]
    rx_q = s * x2[None, :, 0] + c * x2[None, :, 1]
    dx = np.empty((th.size, x1.shape[0], 2))
    dx[..., 0] = x1[None, :, 0] - rx_d
    dx[..., 1] = x1[None, :, 1] - rx_q
    d[:, 2 * n:] = dx.reshape(th.size, -1)
    return d


def quotient_distance(model: Model, z1, z2, weight=None, n_grid: int = 720,
                      xtol: float = 1e-12) -> tuple[float, float]:
    """Distance between the orbits of z1 and z2 and the minimizing rotation.

    Returns ``(dist, theta)`` with ``dist = min_theta |z1 - g_theta(z2)|_W``
    where angle differences are wrapped to (-pi, pi]. The minimum is found on
    a uniform grid of ``n_grid`` angles and refined by golden-section search
    on the bracketing cell.
    """
    z1 = _as_z(model, z1)
    z2 = _as_z(model, z2)
    W = None if weight is None else np.asarray(weight, dtype=float)

    def sq(th):
        d = _quotient_residuals(model, z1, z2, th)
        if W is None:
            return np.einsum("ij,ij->i", d, d)
        return np.einsum("ij,jk,ik->i", d, W, d)

    grid = np.linspace(-np.pi, np.pi, n_grid, endpoint=False)
    vals = sq(grid)
    k = int(np.argmin(vals))
    h = 2.0 * np.pi / n_grid
    best_t, best_v = grid[k], vals[k]
    try:
        res = minimize_scalar(lambda t: float(sq(t)[0]), bracket=(grid[k] - h, grid[k], grid[k] + h),
                              method="golden", options={"xtol": xtol})
    except ValueError:  # flat cell, no strict bracket; the grid value stands
        res = None
    if res is not None and res.fun < best_v:
        best_t, best_v = float(res.x), float(res.fun)
    return math.sqrt(max(best_v, 0.0)), _reduce_angle(best_t)


# --- JSON network description --------------------------------------------------

def model_to_dict(model: Model) -> dict:
    return {
        "n": model.n,
        "edges": [list(e) for e in model.topo.edges],
        "omega_n_hz": model.omega_n / (2.0 * math.pi),
        "converter": asdict(model.conv),
        "line": asdict(model.line),
    }


def _pick(section: dict, cls, where: str) -> dict:
    if not isinstance(section, dict):
        raise ParameterError(f"'{where}' must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ParameterError(f"unknown field(s) in '{where}': {', '.join(sorted(unknown))}")
    out = {}
    for k, v in section.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ParameterError(f"field '{where}.{k}' must be a number")
        out[k] = float(v)
    missing = [f.name for f in fields(cls) if f.name not in out and f.default is MISSING]
    if missing:
        raise ParameterError(f"missing field(s) in '{where}': {', '.join(missing)}")
    return out


def model_from_dict(doc: dict, b_load_override: float | None = None) -> Model:
    if not isinstance(doc, dict):
        raise ParameterError("network document must be a JSON object")
    for key in ("n", "converter", "line"):
        if key not in doc:
            raise ParameterError(f"missing field '{key}'")
    conv_kw = _pick(doc["converter"], ConverterParams, "converter")
    if b_load_override is not None:
        conv_kw["b_load"] = float(b_load_override)
    conv = ConverterParams(**conv_kw)
    line = LineParams(**_pick(doc["line"], LineParams, "line"))
    n = doc["n"]
    if isinstance(n, bool) or not isinstance(n, int):
        raise TopologyError("field 'n' must be an integer")
    edges = doc.get("edges", [])
    if not isinstance(edges, list) or any(
            not isinstance(e, (list, tuple)) or len(e) != 2 for e in edges):
        raise TopologyError("field 'edges' must be a list of [i, j] pairs")
    topo = Topology(n, tuple(tuple(e) for e in edges))
    hz = doc.get("omega_n_hz")
    if hz is not None and (isinstance(hz, bool) or not isinstance(hz, (int, float))):
        raise ParameterError("field 'omega_n_hz' must be a number")
    omega = DEFAULT_OMEGA_N if hz is None else 2.0 * math.pi * float(hz)
    return assemble_model(conv, line, topo, omega)


def load_network(path: str | Path, b_load_override: float | None = None) -> Model:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return model_from_dict(doc, b_load_override)


def single_node_rhs(conv: ConverterParams, omega_n: float, gamma: float, v_dc: float,
                    i: Sequence[float], v: Sequence[float], i_net: Sequence[float],
                    i_dc_star: float) -> np.ndarray:
    """Per-converter closed loop in absolute DC voltage, returned as time derivatives.

    Kept separate from :func:`vector_field` on purpose; it is written against
    the scalar per-node equations and used to cross-check the lumped model.
    """
    i = np.asarray(i, dtype=float)
    v = np.asarray(v, dtype=float)
    i_net = np.asarray(i_net, dtype=float)
    r = np.array([-math.sin(gamma), math.cos(gamma)])
    dv = v_dc - conv.v_dc_star
    zr = conv.r_filter * np.eye(2) + conv.l_filter * omega_n * J2
    zc = conv.g_load * np.eye(2) + (conv.c_filter * omega_n + conv.b_load) * J2
    d_gamma = conv.eta * dv
    d_vdc = (-conv.k_p * dv - 0.5 * conv.mu * r @ i + i_dc_star) / conv.c_dc
    d_i = (-zr @ i + 0.5 * conv.mu * r * v_dc - v) / conv.l_filter
    d_v = (-zc @ v + i - i_net) / conv.c_filter
    return np.concatenate([[d_gamma, d_vdc], d_i, d_v])
