# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batch RK4 kernel; same contract as ``_kernel_py.integrate_batch``.

Samples advance in lockstep groups stored as ``[coordinate][lane]`` so the
stage arithmetic runs over contiguous lanes and vectorizes.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, fabs
from libc.float cimport DBL_MAX
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef enum:
    ETA = 0
    CDC = 1
    KP = 2
    HM = 3
    RF = 4
    XF = 5
    LF = 6
    GL = 7
    BC = 8
    CF = 9
    VSTAR = 10
    RL = 11
    XL = 12
    LL = 13

DEF RESYNC = 32


cdef void stage_trig(const double* z, const double* zb, const double* sb, const double* cb,
                     double* sn, double* cs, int L) noexcept nogil:
    # sin/cos at the stage angles from those at the start of the step
    cdef int o
    cdef double d, d2, sd, cd, dmax = 0.0
    for o in range(L):
        d = fabs(z[o] - zb[o])
        if d > dmax:
            dmax = d
    if dmax < 1e-3:
        for o in range(L):
            d = z[o] - zb[o]
            d2 = d * d
            sd = d * (1.0 - d2 / 6.0 * (1.0 - d2 / 20.0))
            cd = 1.0 - d2 / 2.0 * (1.0 - d2 / 12.0 * (1.0 - d2 / 30.0))
            sn[o] = sb[o] * cd + cb[o] * sd
            cs[o] = cb[o] * cd - sb[o] * sd
    else:
        for o in range(L):
            sn[o] = sin(z[o])
            cs[o] = cos(z[o])


cdef void ac_linear(const double* z, double* f, const double* p, const double* q,
                    const long long* edges, int n, int m, int G) noexcept nogil:
    # capacitor rows then line rows
    cdef int k, e, a, b, g, iv = 4 * n, ii = 2 * n, il = 6 * n
    cdef double gl = p[GL], bc = p[BC], rl = p[RL], xl = p[XL], qll = q[LL], qcf = q[CF]
    cdef const double* zid
    cdef const double* ziq
    cdef const double* zvd
    cdef const double* zvq
    cdef const double* ld
    cdef const double* lq
    cdef const double* vad
    cdef const double* vaq
    cdef const double* vbd
    cdef const double* vbq
    cdef double* fvd
    cdef double* fvq
    cdef double* fld
    cdef double* flq
    cdef double* fad
    cdef double* faq
    cdef double* fbd
    cdef double* fbq
    for k in range(n):
        zid = z + (ii + 2 * k) * G
        ziq = zid + G
        zvd = z + (iv + 2 * k) * G
        zvq = zvd + G
        fvd = f + (iv + 2 * k) * G
        fvq = fvd + G
        for g in range(G):
            fvd[g] = zid[g] - gl * zvd[g] + bc * zvq[g]
            fvq[g] = ziq[g] - gl * zvq[g] - bc * zvd[g]
    for e in range(m):
        a = <int>edges[2 * e]
        b = <int>edges[2 * e + 1]
        ld = z + (il + 2 * e) * G
        lq = ld + G
        vad = z + (iv + 2 * a) * G
        vaq = vad + G
        vbd = z + (iv + 2 * b) * G
        vbq = vbd + G
        fld = f + (il + 2 * e) * G
        flq = fld + G
        fad = f + (iv + 2 * a) * G
        faq = fad + G
        fbd = f + (iv + 2 * b) * G
        fbq = fbd + G
        for g in range(G):
            fad[g] -= ld[g]
            faq[g] -= lq[g]
            fbd[g] += ld[g]
            fbq[g] += lq[g]
            fld[g] = (-(rl * ld[g] - xl * lq[g]) + vad[g] - vbd[g]) * qll
            flq[g] = (-(rl * lq[g] + xl * ld[g]) + vaq[g] - vbq[g]) * qll
    for g in range(2 * n * G):
        f[iv * G + g] *= qcf


cdef void rhs(const double* z, double* f, const double* p, const double* q,
              const double* u, const long long* edges, int n, int m, int G,
              const double* sn, const double* cs) noexcept nogil:
    cdef int k, g, ii = 2 * n, iv = 4 * n
    cdef double hm = p[HM], eta = p[ETA], kp = p[KP], vstar = p[VSTAR]
    cdef double rf = p[RF], xf = p[XF], qcdc = q[CDC], qlf = q[LF], uk, vdc
    cdef const double* s
    cdef const double* c
    cdef const double* vt
    cdef const double* i_d
    cdef const double* i_q
    cdef const double* v_d
    cdef const double* v_q
    cdef double* fg
    cdef double* fv
    cdef double* fid
    cdef double* fiq
    for k in range(n):
        s = sn + k * G
        c = cs + k * G
        vt = z + (n + k) * G
        i_d = z + (ii + 2 * k) * G
        i_q = i_d + G
        v_d = z + (iv + 2 * k) * G
        v_q = v_d + G
        fg = f + k * G
        fv = f + (n + k) * G
        fid = f + (ii + 2 * k) * G
        fiq = fid + G
        uk = u[k]
        for g in range(G):
            vdc = vt[g] + vstar
            fg[g] = eta * vt[g]
            fv[g] = (-kp * vt[g] - hm * (-s[g] * i_d[g] + c[g] * i_q[g]) + uk) * qcdc
            fid[g] = (-(rf * i_d[g] - xf * i_q[g]) - hm * s[g] * vdc - v_d[g]) * qlf
            fiq[g] = (-(rf * i_q[g] + xf * i_d[g]) + hm * c[g] * vdc - v_q[g]) * qlf
    ac_linear(z, f, p, q, edges, n, m, G)


cdef void rhs_var(const double* z, const double* dz, double* df, const double* p,
                  const double* q, const long long* edges, int n, int m, int G,
                  const double* sn, const double* cs) noexcept nogil:
    # Jacobian-vector product df = A(z) dz
    cdef int k, g, ii = 2 * n, iv = 4 * n
    cdef double hm = p[HM], eta = p[ETA], kp = p[KP], vstar = p[VSTAR]
    cdef double rf = p[RF], xf = p[XF], qcdc = q[CDC], qlf = q[LF], vdc
    cdef const double* s
    cdef const double* c
    cdef const double* vt
    cdef const double* i_d
    cdef const double* i_q
    cdef const double* dg
    cdef const double* dvt
    cdef const double* di_d
    cdef const double* di_q
    cdef const double* dv_d
    cdef const double* dv_q
    cdef double* fg
    cdef double* fv
    cdef double* fid
    cdef double* fiq
    for k in range(n):
        s = sn + k * G
        c = cs + k * G
        vt = z + (n + k) * G
        i_d = z + (ii + 2 * k) * G
        i_q = i_d + G
        dg = dz + k * G
        dvt = dz + (n + k) * G
        di_d = dz + (ii + 2 * k) * G
        di_q = di_d + G
        dv_d = dz + (iv + 2 * k) * G
        dv_q = dv_d + G
        fg = df + k * G
        fv = df + (n + k) * G
        fid = df + (ii + 2 * k) * G
        fiq = fid + G
        for g in range(G):
            vdc = vt[g] + vstar
            fg[g] = eta * dvt[g]
            fv[g] = (-kp * dvt[g] - hm * ((-c[g] * i_d[g] - s[g] * i_q[g]) * dg[g]
                                          - s[g] * di_d[g] + c[g] * di_q[g])) * qcdc
            fid[g] = (-(rf * di_d[g] - xf * di_q[g]) - hm * c[g] * vdc * dg[g]
                      - hm * s[g] * dvt[g] - dv_d[g]) * qlf
            fiq[g] = (-(rf * di_q[g] + xf * di_d[g]) - hm * s[g] * vdc * dg[g]
                      + hm * c[g] * dvt[g] - dv_q[g]) * qlf
    ac_linear(dz, df, p, q, edges, n, m, G)


cdef inline void axpy(double* out, const double* x, double a, const double* y, int L) noexcept nogil:
    cdef int j
    for j in range(L):
        out[j] = x[j] + a * y[j]


def integrate_batch(Z0, dZ0, u_dc, params, edges, int n, double dt, long n_steps,
                    long record_every, double blowup, int group=32):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Z = np.array(Z0, dtype=np.float64, order="C", copy=True)
    cdef int S = Z.shape[0], N = Z.shape[1]
    cdef int m = (N - 6 * n) // 2
    cdef bint var = dZ0 is not None
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dZ
    if var:
        dZ = np.array(dZ0, dtype=np.float64, order="C", copy=True)
    else:
        dZ = np.zeros((S, N), dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] E = np.ascontiguousarray(
        np.asarray(edges, dtype=np.int64).reshape(-1))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] P = np.ascontiguousarray(params, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] U = np.ascontiguousarray(u_dc, dtype=np.float64)
    if n_steps % record_every:
        raise ValueError("n_steps must be a multiple of record_every")
    if U.shape[0] != n or P.shape[0] != 14 or E.shape[0] != 2 * m:
        raise ValueError("inconsistent kernel arguments")
    if group < 1:
        raise ValueError("group must be positive")
    cdef long R = n_steps // record_every + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=3] rec_z = np.full((S, R, N), np.nan)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] rec_dz = np.full((S if var else 0, R, N), np.nan)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] status = np.full(S, -1, dtype=np.int64)
    if S == 0:
        return rec_z, (rec_dz if var else None), status, Z, (dZ if var else None)
    # reciprocals of the storage constants
    cdef cnp.ndarray[cnp.float64_t, ndim=1] Q = np.ones(14)
    for idx in (CDC, LF, CF, LL):
        Q[idx] = 1.0 / P[idx]

    cdef int G = group if group < S else S
    cdef int L = N * G, nG = n * G
    cdef double* p = &P[0]
    cdef double* q = &Q[0]
    cdef double* u = &U[0] if n > 0 else NULL
    cdef const long long* ep = <const long long*>(&E[0]) if m > 0 else NULL
    cdef double* buf = <double*>malloc((12 * L + 5 * nG + 2 * G) * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef double* z = buf
    cdef double* tmp = buf + L
    cdef double* k1 = buf + 2 * L
    cdef double* k2 = buf + 3 * L
    cdef double* k3 = buf + 4 * L
    cdef double* k4 = buf + 5 * L
    cdef double* dz = buf + 6 * L
    cdef double* dtmp = buf + 7 * L
    cdef double* l1 = buf + 8 * L
    cdef double* l2 = buf + 9 * L
    cdef double* l3 = buf + 10 * L
    cdef double* l4 = buf + 11 * L
    cdef double* zb = buf + 12 * L
    cdef double* sb = zb + nG
    cdef double* cb = sb + nG
    cdef double* sn = cb + nG
    cdef double* cs = sn + nG
    cdef double* alive = cs + nG
    cdef double* bad = alive + G
    cdef double h2 = 0.5 * dt, h6 = dt / 6.0
    cdef int g0, gs, g, j, o, src, nalive
    cdef long step, r
    try:
        with nogil:
            g0 = 0
            while g0 < S:
                gs = G if g0 + G <= S else S - g0
                # a short last group is padded with copies of its first sample
                for g in range(G):
                    src = g0 + (g if g < gs else 0)
                    for j in range(N):
                        z[j * G + g] = Z[src, j]
                        dz[j * G + g] = dZ[src, j]
                    alive[g] = 1.0 if g < gs else 0.0
                for g in range(gs):
                    for j in range(N):
                        rec_z[g0 + g, 0, j] = Z[g0 + g, j]
                        if var:
                            rec_dz[g0 + g, 0, j] = dZ[g0 + g, j]
                nalive = gs
                for step in range(1, n_steps + 1):
                    # step-start trig: exact every RESYNC steps, else rotated
                    # forward from the previous step start
                    if step % RESYNC == 1 or RESYNC == 1:
                        for o in range(nG):
                            sb[o] = sin(z[o])
                            cb[o] = cos(z[o])
                    else:
                        stage_trig(z, zb, sb, cb, sn, cs, nG)
                        for o in range(nG):
                            sb[o] = sn[o]
                            cb[o] = cs[o]
                    for o in range(nG):
                        zb[o] = z[o]
                    rhs(z, k1, p, q, u, ep, n, m, G, sb, cb)
                    axpy(tmp, z, h2, k1, L)
                    if var:
                        rhs_var(z, dz, l1, p, q, ep, n, m, G, sb, cb)
                        axpy(dtmp, dz, h2, l1, L)
                    stage_trig(tmp, zb, sb, cb, sn, cs, nG)
                    rhs(tmp, k2, p, q, u, ep, n, m, G, sn, cs)
                    if var:
                        rhs_var(tmp, dtmp, l2, p, q, ep, n, m, G, sn, cs)
                        axpy(dtmp, dz, h2, l2, L)
                    axpy(tmp, z, h2, k2, L)
                    stage_trig(tmp, zb, sb, cb, sn, cs, nG)
                    rhs(tmp, k3, p, q, u, ep, n, m, G, sn, cs)
                    if var:
                        rhs_var(tmp, dtmp, l3, p, q, ep, n, m, G, sn, cs)
                        axpy(dtmp, dz, dt, l3, L)
                    axpy(tmp, z, dt, k3, L)
                    stage_trig(tmp, zb, sb, cb, sn, cs, nG)
                    rhs(tmp, k4, p, q, u, ep, n, m, G, sn, cs)
                    for o in range(L):
                        z[o] = z[o] + h6 * (k1[o] + 2.0 * k2[o] + 2.0 * k3[o] + k4[o])
                    if var:
                        rhs_var(tmp, dtmp, l4, p, q, ep, n, m, G, sn, cs)
                        for o in range(L):
                            dz[o] = dz[o] + h6 * (l1[o] + 2.0 * l2[o] + 2.0 * l3[o] + l4[o])
                    # divergence check (NaN fails the comparison); a dead lane
                    # keeps its last state in Z and is parked at zero
                    for g in range(G):
                        bad[g] = 0.0
                    for j in range(N):
                        for g in range(G):
                            bad[g] += 0.0 if fabs(z[j * G + g]) <= blowup else 1.0
                    if var:
                        for j in range(N):
                            for g in range(G):
                                bad[g] += 0.0 if fabs(dz[j * G + g]) <= DBL_MAX else 1.0
                    for g in range(gs):
                        if alive[g] != 0.0 and bad[g] != 0.0:
                            status[g0 + g] = step
                            alive[g] = 0.0
                            nalive -= 1
                            for o in range(N):
                                Z[g0 + g, o] = z[o * G + g]
                                dZ[g0 + g, o] = dz[o * G + g]
                                z[o * G + g] = 0.0
                                dz[o * G + g] = 0.0
                    if step % record_every == 0:
                        r = step // record_every
                        for g in range(gs):
                            if alive[g] != 0.0:
                                for j in range(N):
                                    rec_z[g0 + g, r, j] = z[j * G + g]
                                    if var:
                                        rec_dz[g0 + g, r, j] = dz[j * G + g]
                    if nalive == 0:
                        break
                for g in range(gs):
                    if alive[g] != 0.0:
                        for j in range(N):
                            Z[g0 + g, j] = z[j * G + g]
                            dZ[g0 + g, j] = dz[j * G + g]
                g0 += G
    finally:
        free(buf)
    return rec_z, (rec_dz if var else None), status, Z, (dZ if var else None)
