"""Pure-Python versions of the compiled kernels.

Each function follows the compiled loop order closely enough that both
backends produce the same prediction sequence; the bucket signal is reduced
over rows in index order and decisions never depend on the normaliser.
"""
from __future__ import annotations

import numpy as np

REBASE_GAP = 600.0
Z_FLOOR = 1e-200


def bucket_of_index(i: int, m: int) -> int:
    return (i + 2 * m - 1) // (4 * m)


def bucket_bounds(lam: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    n = 4 * lam * m
    v = np.arange(lam + 1)
    lo = np.where(v == 0, 0, (2 * v - 1) * 2 * m + 1)
    hi = np.where(v == lam, n, (2 * v + 1) * 2 * m)
    return lo.astype(np.int64), hi.astype(np.int64)


def solve_signal(dv, lo, hi, dn: float) -> tuple[float, int, int, float]:
    """Exact minimiser over grid distributions of the max-over-outcome payoff."""
    best = float("inf")
    ia = ib = 0
    alpha = 1.0
    V = len(dv)
    for v in range(V):
        sv = float(dv[v])
        if sv > 0.0:
            val = sv * float(lo[v]) / dn
            idx = int(lo[v])
        elif sv < 0.0:
            val = -sv * (1.0 - float(hi[v]) / dn)
            idx = int(hi[v])
        else:
            val = 0.0
            idx = int(lo[v])
        if val < best:
            best, ia, ib, alpha = val, idx, idx, 1.0
    for v in range(V - 1):
        sa = float(dv[v])
        sb = float(dv[v + 1])
        if (sa < 0.0 and sb > 0.0) or (sa > 0.0 and sb < 0.0):
            al = sb / (sb - sa)
            pa = float(hi[v]) / dn
            pb = float(hi[v] + 1) / dn
            val = al * sa * pa + (1.0 - al) * sb * pb
            if val < best:
                best, ia, ib, alpha = val, int(hi[v]), int(hi[v]) + 1, al
    return best, ia, ib, alpha


def _refresh(S, Wdiff, Wsum, col, half_eta, c) -> bool:
    a = half_eta * S[:, col]
    ep = np.exp(a - c)
    em = np.exp(-a - c)
    Wdiff[:, col] = ep - em
    Wsum[:, col] = ep + em
    return bool(a.size and np.abs(a).max() - c > REBASE_GAP)


def _seqsum(vals) -> float:
    z = 0.0
    for x in vals:
        z = z + float(x)
    return z


def rebase(S, Wdiff, Wsum, zcol, shift, half_eta) -> None:
    c = float(np.abs(half_eta * S).max()) if S.size else 0.0
    c = max(c, 0.0)
    shift[0] = c
    a = half_eta * S
    ep = np.exp(a - c)
    em = np.exp(-a - c)
    Wdiff[...] = ep - em
    Wsum[...] = ep + em
    zcol[...] = Wsum.sum(axis=0)


def mc_chunk(G, y, u, S, Wdiff, Wsum, zcol, shift, R, lam, m, eta, track_realized,
             yhat, value, ia_out, ib_out, alpha_out) -> None:
    n = 4 * lam * m
    dn = float(n)
    half_eta = 0.5 * eta
    lo, hi = bucket_bounds(lam, m)
    for t in range(G.shape[0]):
        gt = G[t]
        nz = np.flatnonzero(gt)
        if nz.size:
            dv = (gt[nz, None] * Wdiff[nz]).sum(axis=0)
        else:
            dv = np.zeros(lam + 1)
        z = _seqsum(zcol)
        best, ia, ib, alpha = solve_signal(dv, lo, hi, dn)

        yt = float(y[t])
        pa = ia / dn
        pb = ib / dn
        yhat[t] = pa if u[t] < alpha else pb
        value[t] = best / z
        ia_out[t] = ia
        ib_out[t] = ib
        alpha_out[t] = alpha

        va = bucket_of_index(ia, m)
        vb = bucket_of_index(ib, m)
        wa = alpha * (pa - yt)
        wb = (1.0 - alpha) * (pb - yt)
        c = float(shift[0])
        S[nz, va] = S[nz, va] + gt[nz] * wa
        need = _refresh(S, Wdiff, Wsum, va, half_eta, c)
        if ib != ia:
            S[nz, vb] = S[nz, vb] + gt[nz] * wb
            need = _refresh(S, Wdiff, Wsum, vb, half_eta, c) or need
        zcol[va] = Wsum[:, va].sum()
        if ib != ia:
            zcol[vb] = Wsum[:, vb].sum()
        if not need:
            need = _seqsum(zcol) < Z_FLOOR
        if need:
            rebase(S, Wdiff, Wsum, zcol, shift, half_eta)

        if track_realized:
            vr = va if yhat[t] == pa else vb
            R[:, vr] = R[:, vr] + gt * (yhat[t] - yt)


def greedy_cover(F, eps_total: float, order, n_forced: int) -> np.ndarray:
    F = np.ascontiguousarray(F, dtype=float)
    sel: list[int] = []
    centers = np.empty((0, F.shape[1]))
    for pos, i in enumerate(order):
        if pos >= n_forced and centers.shape[0]:
            dist = np.abs(centers - F[i]).sum(axis=1)
            if np.any(dist <= eps_total):
                continue
        sel.append(int(i))
        centers = F[sel]
    return np.asarray(sel, dtype=np.int64)


def indicator_matrix(tx, thetas, offsets, k, cols, gs, out, out_cols) -> None:
    n = tx.shape[0]
    acc = tx[:, 0:1] * thetas[None, :, 0]
    for j in range(1, thetas.shape[1]):
        acc = acc + tx[:, j:j + 1] * thetas[None, :, j]
    acc = acc + offsets[None, :]
    sc = acc.reshape(n, -1, k)
    best = sc[..., 0]
    am = np.zeros(best.shape, dtype=np.int64)
    for g in range(1, k):
        better = sc[..., g] > best
        am[better] = g
        best = np.where(better, sc[..., g], best)
    out[:, out_cols] = am[:, cols] == gs[None, :]
