# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: the online multicalibration round and the greedy cover scan.

Both functions mirror ``_kernels_py`` operation for operation; the pure-Python
module is the reference and the fallback when this extension is unavailable.
"""
from libc.math cimport exp, fabs, INFINITY

import numpy as np

cdef double REBASE_GAP = 600.0
cdef double Z_FLOOR = 1e-200


cdef inline long bucket_of_index(long i, long m) nogil:
    return (i + 2 * m - 1) // (4 * m)


cdef void rebase(double[:, ::1] S, double[:, ::1] Wdiff, double[:, ::1] Wsum,
                 double[::1] zcol, double[::1] shift, double half_eta) nogil:
    cdef Py_ssize_t D = S.shape[0], V = S.shape[1], g, v
    cdef double c = 0.0, a, ep, em
    for g in range(D):
        for v in range(V):
            a = fabs(half_eta * S[g, v])
            if a > c:
                c = a
    shift[0] = c
    for v in range(V):
        zcol[v] = 0.0
    for g in range(D):
        for v in range(V):
            a = half_eta * S[g, v]
            ep = exp(a - c)
            em = exp(-a - c)
            Wdiff[g, v] = ep - em
            Wsum[g, v] = ep + em
    for v in range(V):
        for g in range(D):
            zcol[v] = zcol[v] + Wsum[g, v]


def mc_chunk(const double[:, ::1] G, const double[::1] y, const double[::1] u,
             double[:, ::1] S, double[:, ::1] Wdiff, double[:, ::1] Wsum,
             double[::1] zcol, double[::1] shift, double[:, ::1] R,
             long lam, long m, double eta, bint track_realized,
             double[::1] yhat, double[::1] value,
             long[::1] ia_out, long[::1] ib_out, double[::1] alpha_out):
    cdef Py_ssize_t n_rounds = G.shape[0], D = G.shape[1], V = lam + 1
    cdef Py_ssize_t t, g, v
    cdef long n = 4 * lam * m
    cdef double dn = <double> n
    cdef double half_eta = 0.5 * eta
    cdef double[::1] dv = np.zeros(V)
    cdef long[::1] lo = np.zeros(V, dtype=np.int64)
    cdef long[::1] hi = np.zeros(V, dtype=np.int64)
    cdef double best, val, sv, sa, sb, al, pa, pb, z, wa, wb, gv, a, ep, em, yt, r
    cdef long ia, ib, va, vb, idx, vr
    cdef double alpha
    cdef bint need_rebase

    for v in range(V):
        lo[v] = 0 if v == 0 else (2 * v - 1) * 2 * m + 1
        hi[v] = n if v == lam else (2 * v + 1) * 2 * m

    with nogil:
        for t in range(n_rounds):
            # signed weight of each bucket under the current Hedge distribution (unnormalised)
            for v in range(V):
                dv[v] = 0.0
            for g in range(D):
                gv = G[t, g]
                if gv != 0.0:
                    for v in range(V):
                        dv[v] = dv[v] + gv * Wdiff[g, v]
            z = 0.0
            for v in range(V):
                z = z + zcol[v]

            # minimax step: best point mass per bucket, then sign-change pairs at boundaries
            best = INFINITY
            ia = 0
            ib = 0
            alpha = 1.0
            for v in range(V):
                sv = dv[v]
                if sv > 0.0:
                    val = sv * lo[v] / dn
                    idx = lo[v]
                elif sv < 0.0:
                    val = -sv * (1.0 - hi[v] / dn)
                    idx = hi[v]
                else:
                    val = 0.0
                    idx = lo[v]
                if val < best:
                    best = val
                    ia = idx
                    ib = idx
                    alpha = 1.0
            for v in range(V - 1):
                sa = dv[v]
                sb = dv[v + 1]
                if (sa < 0.0 and sb > 0.0) or (sa > 0.0 and sb < 0.0):
                    al = sb / (sb - sa)
                    pa = hi[v] / dn
                    pb = (hi[v] + 1) / dn
                    val = al * sa * pa + (1.0 - al) * sb * pb
                    if val < best:
                        best = val
                        ia = hi[v]
                        ib = hi[v] + 1
                        alpha = al

            yt = y[t]
            pa = ia / dn
            pb = ib / dn
            yhat[t] = pa if u[t] < alpha else pb
            value[t] = best / z
            ia_out[t] = ia
            ib_out[t] = ib
            alpha_out[t] = alpha

            # Hedge update with the expected signed payoff of the randomized prediction
            va = bucket_of_index(ia, m)
            vb = bucket_of_index(ib, m)
            wa = alpha * (pa - yt)
            wb = (1.0 - alpha) * (pb - yt)
            need_rebase = False
            for g in range(D):
                gv = G[t, g]
                if gv != 0.0:
                    S[g, va] = S[g, va] + gv * wa
                    a = half_eta * S[g, va]
                    ep = exp(a - shift[0])
                    em = exp(-a - shift[0])
                    Wdiff[g, va] = ep - em
                    Wsum[g, va] = ep + em
                    if fabs(a) - shift[0] > REBASE_GAP:
                        need_rebase = True
                    if ib != ia:
                        S[g, vb] = S[g, vb] + gv * wb
                        a = half_eta * S[g, vb]
                        ep = exp(a - shift[0])
                        em = exp(-a - shift[0])
                        Wdiff[g, vb] = ep - em
                        Wsum[g, vb] = ep + em
                        if fabs(a) - shift[0] > REBASE_GAP:
                            need_rebase = True
            zcol[va] = 0.0
            for g in range(D):
                zcol[va] = zcol[va] + Wsum[g, va]
            if ib != ia:
                zcol[vb] = 0.0
                for g in range(D):
                    zcol[vb] = zcol[vb] + Wsum[g, vb]
            if not need_rebase:
                z = 0.0
                for v in range(V):
                    z = z + zcol[v]
                need_rebase = z < Z_FLOOR
            if need_rebase:
                rebase(S, Wdiff, Wsum, zcol, shift, half_eta)

            if track_realized:
                vr = va if yhat[t] == pa else vb
                r = yhat[t] - yt
                for g in range(D):
                    R[g, vr] = R[g, vr] + G[t, g] * r


def greedy_cover(const double[:, ::1] F, double eps_total, const long[::1] order, long n_forced):
    """Sequential epsilon-net scan with early exit on the running L1 sum.

    Rows are visited in ``order``; the first ``n_forced`` visited rows are
    always selected.
    """
    cdef Py_ssize_t n = order.shape[0], T = F.shape[1], pos, i, j, t, k
    cdef long[::1] sel = np.zeros(n, dtype=np.int64)
    cdef Py_ssize_t n_sel = 0
    cdef double dist
    cdef bint covered
    with nogil:
        for pos in range(n):
            i = order[pos]
            covered = False
            if pos >= n_forced:
                for k in range(n_sel):
                    j = sel[k]
                    dist = 0.0
                    for t in range(T):
                        dist = dist + fabs(F[i, t] - F[j, t])
                        if dist > eps_total:
                            break
                    if dist <= eps_total:
                        covered = True
                        break
            if not covered:
                sel[n_sel] = i
                n_sel += 1
    return np.asarray(sel[:n_sel]).copy()


def indicator_matrix(const double[:, ::1] tx, const double[:, ::1] thetas, const double[::1] offsets,
                     long k, const long[::1] cols, const long[::1] gs, double[:, ::1] out,
                     const long[::1] out_cols):
    """out[i, out_cols[j]] = 1 if candidate cols[j]'s most likely component at
    row i is gs[j] (first maximum wins), else 0."""
    cdef Py_ssize_t n = tx.shape[0], P = tx.shape[1], n_models = thetas.shape[0] // k
    cdef Py_ssize_t i, c, g, j, r
    cdef double s
    cdef signed char[:, ::1] am = np.zeros((n, n_models), dtype=np.int8)
    cdef double[::1] best = np.zeros(n)
    with nogil:
        for c in range(n_models):
            for g in range(k):
                r = c * k + g
                for i in range(n):
                    s = tx[i, 0] * thetas[r, 0]
                    for j in range(1, P):
                        s = s + tx[i, j] * thetas[r, j]
                    s = s + offsets[r]
                    # strict comparison keeps the first maximum
                    if g == 0:
                        best[i] = s
                    else:
                        am[i, c] = <signed char> g if s > best[i] else am[i, c]
                        best[i] = s if s > best[i] else best[i]
        for i in range(n):
            for j in range(cols.shape[0]):
                out[i, out_cols[j]] = 1.0 if am[i, cols[j]] == gs[j] else 0.0
