"""Pure-numpy fallbacks for the compiled kernels in ``_ckernels.pyx``.

Both implementations perform the same floating-point operations in the same
order, so results agree bit for bit.
"""
from __future__ import annotations

import numpy as np


def integrate_trajectories(v0, stall, fault_target, fault_substeps, nbr_idx, nbr_valid,
                           a, eps, v_ref, v_th, v_floor, h, n_sub, n_rec):
    v = np.array(v0, dtype=np.float64)
    stall = np.asarray(stall, dtype=np.float64)
    fault_target = np.asarray(fault_target, dtype=np.float64)
    fault_substeps = np.asarray(fault_substeps, dtype=np.int64)
    nbr_valid = np.asarray(nbr_valid, dtype=bool)
    B, N = v.shape
    out = np.empty((B, n_rec, N), dtype=np.float64)
    bad = np.full(B, -1, dtype=np.int64)
    out[:, 0] = v
    step = 0
    for r in range(1, n_rec):
        for _ in range(n_sub):
            acc = np.zeros_like(v)
            for k in range(nbr_idx.shape[1]):
                acc = acc + np.where(nbr_valid[:, k], v[:, nbr_idx[:, k]] - v, 0.0)
            target = np.where((step < fault_substeps)[:, None], fault_target, v_ref)
            m = v_th - v
            m = np.where(m < 0.0, 0.0, m)
            dv = a * (target - v) - stall * m + eps * acc
            x = v + h * dv
            v = np.where(x < v_floor, v_floor, x)
            nonfinite = ~np.isfinite(v).all(axis=1) & (bad < 0)
            bad[nonfinite] = step
            step += 1
        out[:, r] = v
    return out, bad


def sfcm_memberships(d2, g, lam):
    d2 = np.asarray(d2, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    n, C = d2.shape
    u = np.zeros((n, C), dtype=np.float64)
    is_zero = d2 == 0.0
    zeros = is_zero.sum(axis=1)
    hit = zeros > 0
    if hit.any():
        u[hit] = np.where(is_zero[hit], 1.0 / np.maximum(zeros[hit], 1)[:, None], 0.0)
    rest = ~hit
    if rest.any():
        dr, gr = d2[rest], g[rest]
        inv_sum = np.zeros(dr.shape[0])
        gsum = np.zeros(dr.shape[0])
        for k in range(C):
            inv_sum = inv_sum + 1.0 / dr[:, k]
            gsum = gsum + gr[:, k]
        num = 1.0 + lam * (1.0 - gsum)
        u[rest] = (num[:, None] / (dr * inv_sum[:, None]) + lam * gr) / (1.0 + lam)
    return u
