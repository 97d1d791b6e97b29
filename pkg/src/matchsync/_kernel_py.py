"""Pure numpy batch RK4 kernel, vectorized across samples.

Mirrors ``_kernel_c.pyx`` exactly (same arguments, same outputs); used when
the compiled extension is unavailable or ``MATCHSYNC_PURE_PYTHON=1``.
"""
import numpy as np

# packed parameter layout shared with the Cython kernel
ETA, CDC, KP, HM, RF, XF, LF, GL, BC, CF, VSTAR, RL, XL, LL = range(14)
N_PARAMS = 14


def _rhs(z, dz, p, u_dc, edges, n, m):
    S = z.shape[0]
    g = z[:, :n]
    vt = z[:, n:2 * n]
    i = z[:, 2 * n:4 * n].reshape(S, n, 2)
    v = z[:, 4 * n:6 * n].reshape(S, n, 2)
    il = z[:, 6 * n:].reshape(S, m, 2)
    s, c = np.sin(g), np.cos(g)
    hm = p[HM]
    f = np.empty_like(z)
    f[:, :n] = p[ETA] * vt
    f[:, n:2 * n] = (-p[KP] * vt - hm * (-s * i[..., 0] + c * i[..., 1]) + u_dc) / p[CDC]
    vdc = vt + p[VSTAR]
    fi = f[:, 2 * n:4 * n].reshape(S, n, 2)
    fi[..., 0] = (-(p[RF] * i[..., 0] - p[XF] * i[..., 1]) - hm * s * vdc - v[..., 0]) / p[LF]
    fi[..., 1] = (-(p[RF] * i[..., 1] + p[XF] * i[..., 0]) + hm * c * vdc - v[..., 1]) / p[LF]
    _ac_linear(i, v, il, p, edges, n, m, f)
    df = None
    if dz is not None:
        dg = dz[:, :n]
        dvt = dz[:, n:2 * n]
        di = dz[:, 2 * n:4 * n].reshape(S, n, 2)
        dv = dz[:, 4 * n:6 * n].reshape(S, n, 2)
        dil = dz[:, 6 * n:].reshape(S, m, 2)
        df = np.empty_like(dz)
        df[:, :n] = p[ETA] * dvt
        jr_i = -c * i[..., 0] - s * i[..., 1]
        df[:, n:2 * n] = (-p[KP] * dvt - hm * (jr_i * dg - s * di[..., 0] + c * di[..., 1])) / p[CDC]
        dfi = df[:, 2 * n:4 * n].reshape(S, n, 2)
        dfi[..., 0] = (-(p[RF] * di[..., 0] - p[XF] * di[..., 1])
                       - hm * c * vdc * dg - hm * s * dvt - dv[..., 0]) / p[LF]
        dfi[..., 1] = (-(p[RF] * di[..., 1] + p[XF] * di[..., 0])
                       - hm * s * vdc * dg + hm * c * dvt - dv[..., 1]) / p[LF]
        _ac_linear(di, dv, dil, p, edges, n, m, df)
    return f, df


def _ac_linear(i, v, il, p, edges, n, m, out):
    """Capacitor and line rows (linear in x), written into ``out``."""
    S = i.shape[0]
    fv = out[:, 4 * n:6 * n].reshape(S, n, 2)
    fv[..., 0] = i[..., 0] - p[GL] * v[..., 0] + p[BC] * v[..., 1]
    fv[..., 1] = i[..., 1] - p[GL] * v[..., 1] - p[BC] * v[..., 0]
    if m:
        a, b = edges[:, 0], edges[:, 1]
        np.subtract.at(fv, (slice(None), a), il)
        np.add.at(fv, (slice(None), b), il)
        fl = out[:, 6 * n:].reshape(S, m, 2)
        dvab = v[:, a] - v[:, b]
        fl[..., 0] = (-(p[RL] * il[..., 0] - p[XL] * il[..., 1]) + dvab[..., 0]) / p[LL]
        fl[..., 1] = (-(p[RL] * il[..., 1] + p[XL] * il[..., 0]) + dvab[..., 1]) / p[LL]
    fv /= p[CF]


def integrate_batch(Z0, dZ0, u_dc, params, edges, n, dt, n_steps, record_every, blowup):
    """Fixed-step classical RK4 for a batch of initial states.

    Returns ``(rec_z, rec_dz, status, z_final, dz_final)``.  ``rec_z`` has
    shape (S, n_steps // record_every + 1, N) and holds the state at steps
    0, record_every, 2 * record_every, ...; ``status[s]`` is -1 for a finite
    run or the first step at which any coordinate exceeded ``blowup`` (or
    became non-finite), after which that sample's records are NaN.
    """
    Z = np.array(Z0, dtype=np.float64, order="C", copy=True)
    S, N = Z.shape
    m = (N - 6 * n) // 2
    edges = np.asarray(edges, dtype=np.int64).reshape(m, 2)
    p = np.asarray(params, dtype=np.float64)
    u_dc = np.asarray(u_dc, dtype=np.float64)
    var = dZ0 is not None
    dZ = np.array(dZ0, dtype=np.float64, order="C", copy=True) if var else None
    if n_steps % record_every:
        raise ValueError("n_steps must be a multiple of record_every")
    R = n_steps // record_every + 1
    rec_z = np.full((S, R, N), np.nan)
    rec_dz = np.full((S, R, N), np.nan) if var else None
    status = np.full(S, -1, dtype=np.int64)
    rec_z[:, 0] = Z
    if var:
        rec_dz[:, 0] = dZ
    alive = np.ones(S, dtype=bool)
    h2, h6 = 0.5 * dt, dt / 6.0
    for step in range(1, n_steps + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        z = Z[idx]
        dz = dZ[idx] if var else None
        k1, l1 = _rhs(z, dz, p, u_dc, edges, n, m)
        k2, l2 = _rhs(z + h2 * k1, dz + h2 * l1 if var else None, p, u_dc, edges, n, m)
        k3, l3 = _rhs(z + h2 * k2, dz + h2 * l2 if var else None, p, u_dc, edges, n, m)
        k4, l4 = _rhs(z + dt * k3, dz + dt * l3 if var else None, p, u_dc, edges, n, m)
        z = z + h6 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        Z[idx] = z
        bad = ~np.all(np.isfinite(z) & (np.abs(z) <= blowup), axis=1)
        if var:
            dz = dz + h6 * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
            dZ[idx] = dz
            bad |= ~np.all(np.isfinite(dz), axis=1)
        if bad.any():
            status[idx[bad]] = step
            alive[idx[bad]] = False
        if step % record_every == 0:
            r = step // record_every
            ok = alive[idx]
            rec_z[idx[ok], r] = z[ok]
            if var:
                rec_dz[idx[ok], r] = dz[ok]
    return rec_z, rec_dz, status, Z, dZ
