"""Analytic Jacobian, orbit direction and the projected Lyapunov certificate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space, solve_continuous_lyapunov

from .model import J2, Model, _as_z, orbit_generator, rot_columns


class CertificateRefused(RuntimeError):
    """The reactive-power condition fails at some converter."""


class InstabilityDetected(RuntimeError):
    """Reduced Jacobian on the complement of the orbit direction is not Hurwitz."""

    def __init__(self, msg, eigenvalues):
        super().__init__(msg)
        self.eigenvalues = eigenvalues


class LyapunovSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class JacobianData:
    a_matrix: np.ndarray
    n: int

    @property
    def a11(self):
        return self.a_matrix[:2 * self.n, :2 * self.n]

    @property
    def a12(self):
        return self.a_matrix[:2 * self.n, 2 * self.n:]

    @property
    def a21(self):
        return self.a_matrix[2 * self.n:, :2 * self.n]

    @property
    def a22(self):
        return self.a_matrix[2 * self.n:, 2 * self.n:]


def _r_blocks(gamma):
    """Rot(gamma) as a (2n, n) matrix with r(gamma_k) in column k."""
    n = len(gamma)
    r = rot_columns(gamma)
    out = np.zeros((2 * n, n))
    for k in range(n):
        out[2 * k:2 * k + 2, k] = r[k]
    return out


def jacobian_matrix(model: Model, z) -> np.ndarray:
    z = _as_z(model, z)
    c = model.conv
    n, m, N = model.n, model.m, model.N
    gamma = z[model.sl_gamma]
    vt = z[model.sl_vdc]
    i = z[model.sl_i].reshape(n, 2)
    r = rot_columns(gamma)
    jr = r @ J2.T  # d r / d gamma
    hm = 0.5 * c.mu
    A = np.zeros((N, N))
    ig, iv = 0, n
    ii, ivc, il = 2 * n, 4 * n, 6 * n
    for k in range(n):
        A[ig + k, iv + k] = c.eta
        A[iv + k, ig + k] = -hm * jr[k] @ i[k] / c.c_dc
        A[iv + k, iv + k] = -c.k_p / c.c_dc
        A[iv + k, ii + 2 * k:ii + 2 * k + 2] = -hm * r[k] / c.c_dc
        rows = slice(ii + 2 * k, ii + 2 * k + 2)
        A[rows, ig + k] = hm * jr[k] * (vt[k] + c.v_dc_star) / c.l_filter
        A[rows, iv + k] = hm * r[k] / c.l_filter
        A[rows, rows] = -model.z_r / c.l_filter
        A[rows, ivc + 2 * k:ivc + 2 * k + 2] = -np.eye(2) / c.l_filter
        vrows = slice(ivc + 2 * k, ivc + 2 * k + 2)
        A[vrows, vrows] = -model.z_c / c.c_filter
        A[vrows, rows] = np.eye(2) / c.c_filter
    if m:
        B = model.b_mat
        A[ivc:il, il:] = -B / c.c_filter
        A[il:, ivc:il] = B.T / model.line.l_line
        A[il:, il:] = -np.kron(np.eye(m), model.z_l) / model.line.l_line
    return A


def jacobian(model: Model, z) -> JacobianData:
    """Analytic Jacobian of the vector field (the input enters additively)."""
    return JacobianData(jacobian_matrix(model, z), model.n)


def deviation_matrix(model: Model, z, z_star) -> np.ndarray:
    """G(z) = df/dz(z) - A(z*), built directly from its nonzero blocks."""
    z = _as_z(model, z)
    zs = _as_z(model, z_star)
    c = model.conv
    n, N = model.n, model.N
    hm = 0.5 * c.mu
    g, gs = z[model.sl_gamma], zs[model.sl_gamma]
    i, i_s = z[model.sl_i], zs[model.sl_i]
    v_dc = z[model.sl_vdc] + c.v_dc_star
    Jn = np.kron(np.eye(n), J2)
    rot, rot_s = _r_blocks(g), _r_blocks(gs)
    W_hat = hm * np.diag((Jn @ rot).T @ i - (Jn @ rot_s).T @ i_s)
    Y_hat = hm * (rot - rot_s)
    M_hat = hm * ((Jn @ rot) * np.repeat(v_dc, 2)[:, None] - c.v_dc_star * (Jn @ rot_s))
    G = np.zeros((N, N))
    dc, cur = model.sl_vdc, model.sl_i
    G[dc, model.sl_gamma] = -W_hat / c.c_dc
    G[dc, cur] = -Y_hat.T / c.c_dc
    G[cur, model.sl_gamma] = M_hat / c.l_filter
    G[cur, dc] = Y_hat / c.l_filter
    return G


def zero_direction(model: Model, z_star) -> np.ndarray:
    """v(z*) = [1_n; 0_n; J x*], unnormalized."""
    return orbit_generator(model, z_star)


@dataclass(frozen=True, eq=False)
class LyapunovCertificate:
    v_star: np.ndarray
    p_matrix: np.ndarray
    pi_matrix: np.ndarray
    q1: float
    q2: float
    sigma: float
    q_matrix: np.ndarray
    a_matrix: np.ndarray
    a_spectrum: np.ndarray
    reduced_spectrum: np.ndarray
    decrease_spectrum: np.ndarray
    block_deviation: float
    q_mode: str

    def value(self, delta_z) -> float:
        return lyapunov_value(self, delta_z)


def weight_q(model: Model, z_star, q1: float, q2: float) -> np.ndarray:
    """Q = diag(q1 I_2n, q2 (Jx*)(Jx*)^T / |Jx*|^2)."""
    zs = _as_z(model, z_star)
    n, N = model.n, model.N
    Q = np.zeros((N, N))
    Q[:2 * n, :2 * n] = q1 * np.eye(2 * n)
    jx = orbit_generator(model, zs)[model.sl_x]
    nrm2 = float(jx @ jx)
    if nrm2 > 0:
        Q[2 * n:, 2 * n:] = q2 * np.outer(jx, jx) / nrm2
    return Q


def lyapunov_certificate(model: Model, eq, q1: float = 1.0, q2: float = 1.0,
                         sigma: float = 1e-6, q_mode: str = "regularized",
                         require_condition: bool = True,
                         hurwitz_tol: float = 1e-9) -> LyapunovCertificate:
    """Construct P, Pi for V(dz) = dz^T Pi dz around the equilibrium orbit.

    P is obtained from a Lyapunov solve restricted to the orthogonal complement
    of v(z*) and lifted back with a unit weight along v(z*).  ``q_mode`` is
    ``"regularized"`` (Q + sigma I, strictly definite) or ``"rank1"`` (the
    rank-deficient Q alone).
    """
    if q1 <= 0 or q2 <= 0:
        raise ValueError("q1 and q2 must be positive")
    if q_mode not in ("regularized", "rank1"):
        raise ValueError(f"unknown q_mode {q_mode!r}")
    if require_condition:
        from .equilibrium import check_condition1
        failing = [rec.k for rec in check_condition1(model, eq) if not rec.passed]
        if failing:
            raise CertificateRefused(f"reactive-power condition violated at converter(s) {failing}")
    zs = eq.z_star
    N = model.N
    A = jacobian_matrix(model, zs)
    v = zero_direction(model, zs)
    U = null_space(v[None, :])  # orthonormal basis of the complement, N x (N-1)
    Ar = U.T @ A @ U
    red_eigs = np.linalg.eigvals(Ar)
    if np.max(red_eigs.real) >= -hurwitz_tol:
        bad = red_eigs[red_eigs.real >= -hurwitz_tol]
        raise InstabilityDetected(
            f"reduced Jacobian is not Hurwitz; offending eigenvalues {bad}", red_eigs)
    Q = weight_q(model, zs, q1, q2)
    if q_mode == "regularized":
        Q = Q + sigma * np.eye(N)
    Qr = U.T @ Q @ U
    Pr = solve_continuous_lyapunov(Ar.T, -Qr)
    if not np.all(np.isfinite(Pr)):
        raise LyapunovSolveError("reduced Lyapunov solve returned non-finite values")
    Pr = 0.5 * (Pr + Pr.T)
    P = U @ Pr @ U.T + np.outer(v, v) / float(v @ v)
    P = 0.5 * (P + P.T)
    if np.min(np.linalg.eigvalsh(P)) <= 0:
        raise LyapunovSolveError("lifted P is not positive definite")
    Pv = P @ v
    Pi = P - np.outer(Pv, Pv) / float(v @ Pv)
    Pi = 0.5 * (Pi + Pi.T)
    # decrease matrix restricted to the complement of v
    S = Pi @ A + A.T @ Pi
    dec = np.linalg.eigvalsh(U.T @ S @ U)
    k = 2 * model.n
    block_dev = float(np.linalg.norm(P[:k, k:]) / np.linalg.norm(P))
    return LyapunovCertificate(
        v_star=v, p_matrix=P, pi_matrix=Pi, q1=float(q1), q2=float(q2), sigma=float(sigma),
        q_matrix=Q, a_matrix=A, a_spectrum=np.linalg.eigvals(A), reduced_spectrum=red_eigs,
        decrease_spectrum=dec, block_deviation=block_dev, q_mode=q_mode,
    )


def lyapunov_value(cert: LyapunovCertificate, delta_z) -> float:
    """V(dz) = dz^T Pi dz."""
    dz = np.asarray(delta_z, dtype=float)
    if dz.shape != cert.v_star.shape:
        raise ValueError(f"delta_z has shape {dz.shape}, expected {cert.v_star.shape}")
    return max(float(dz @ cert.pi_matrix @ dz), 0.0)


def p_distance_to_orbit_direction(cert: LyapunovCertificate, delta_z) -> float:
    """P-weighted distance from dz to span{v(z*)}, computed by explicit projection."""
    dz = np.asarray(delta_z, dtype=float)
    P, v = cert.p_matrix, cert.v_star
    alpha = float(v @ P @ dz) / float(v @ P @ v)
    r = dz - alpha * v
    return float(np.sqrt(max(r @ P @ r, 0.0)))


# --- export -------------------------------------------------------------------

MATRIX_FORMAT_VERSION = 1
_HEADER = np.dtype("<i4")


def write_matrix(path, mat) -> None:
    """Binary dump: int32 header (rows, cols, version), then row-major little-endian float64."""
    mat = np.asarray(mat, dtype="<f8")
    if mat.ndim != 2:
        raise ValueError("only 2-D matrices can be written")
    with open(path, "wb") as fh:
        fh.write(np.array([mat.shape[0], mat.shape[1], MATRIX_FORMAT_VERSION], dtype=_HEADER).tobytes())
        fh.write(np.ascontiguousarray(mat).tobytes())


def read_matrix(path) -> np.ndarray:
    raw = open(path, "rb").read()
    rows, cols, version = np.frombuffer(raw[:12], dtype=_HEADER)
    if version != MATRIX_FORMAT_VERSION:
        raise ValueError(f"unsupported matrix format version {version}")
    body = np.frombuffer(raw[12:], dtype="<f8")
    if body.size != rows * cols:
        raise ValueError("matrix file is truncated or has trailing data")
    return body.reshape(rows, cols).astype(float)


def _pairs(eigs) -> list:
    eigs = np.asarray(eigs)
    order = np.lexsort((eigs.imag, eigs.real))
    return [[float(e.real), float(e.imag)] for e in eigs[order]]


def decrease_rounding_floor(cert: LyapunovCertificate) -> float:
    """eps |Pi| |A|: entries of the decrease spectrum below this are not resolved."""
    return float(np.finfo(float).eps * np.linalg.norm(cert.pi_matrix, 2)
                 * np.linalg.norm(cert.a_matrix, 2))


def certificate_to_dict(cert: LyapunovCertificate) -> dict:
    N = len(cert.v_star)
    pi_eigs = np.linalg.eigvalsh(cert.pi_matrix)
    return {
        "N": N,
        "q1": cert.q1,
        "q2": cert.q2,
        "sigma": cert.sigma,
        "q_mode": cert.q_mode,
        "v_star": cert.v_star.tolist(),
        "jacobian_eigenvalues": _pairs(cert.a_spectrum),
        "reduced_eigenvalues": _pairs(cert.reduced_spectrum),
        "decrease_spectrum": [float(x) for x in np.sort(cert.decrease_spectrum)],
        "decrease_rounding_floor": decrease_rounding_floor(cert),
        "pi_eigenvalues": [float(x) for x in pi_eigs],
        "block_deviation": cert.block_deviation,
        "matrix_format": {"header": "int32 rows, cols, version", "version": MATRIX_FORMAT_VERSION,
                          "data": "float64 little-endian, row-major"},
    }
