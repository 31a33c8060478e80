# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Must stay operation-for-operation identical to _pykernels.py."""
import numpy as np
cimport numpy as cnp
from libc.math cimport isfinite

cnp.import_array()


def integrate_trajectories(
    const double[:, ::1] v0,
    const double[:, ::1] stall,
    const double[:, ::1] fault_target,
    const long long[::1] fault_substeps,
    const long long[:, ::1] nbr_idx,
    const unsigned char[:, ::1] nbr_valid,
    double a,
    double eps,
    double v_ref,
    double v_th,
    double v_floor,
    double h,
    long long n_sub,
    long long n_rec,
):
    cdef Py_ssize_t B = v0.shape[0]
    cdef Py_ssize_t N = v0.shape[1]
    cdef Py_ssize_t W = nbr_idx.shape[1]
    out_arr = np.empty((B, n_rec, N), dtype=np.float64)
    bad_arr = np.full(B, -1, dtype=np.int64)
    cdef double[:, :, ::1] out = out_arr
    cdef long long[::1] bad = bad_arr
    cdef double[::1] v = np.empty(N, dtype=np.float64)
    cdef double[::1] vn = np.empty(N, dtype=np.float64)
    cdef Py_ssize_t b, i, k, r, s
    cdef long long step
    cdef double acc, target, m, dv, x
    with nogil:
        for b in range(B):
            for i in range(N):
                v[i] = v0[b, i]
                out[b, 0, i] = v[i]
            step = 0
            for r in range(1, n_rec):
                for s in range(n_sub):
                    for i in range(N):
                        acc = 0.0
                        for k in range(W):
                            if nbr_valid[i, k]:
                                acc = acc + (v[nbr_idx[i, k]] - v[i])
                        if step < fault_substeps[b]:
                            target = fault_target[b, i]
                        else:
                            target = v_ref
                        m = v_th - v[i]
                        if m < 0.0:
                            m = 0.0
                        dv = a * (target - v[i]) - stall[b, i] * m + eps * acc
                        x = v[i] + h * dv
                        if x < v_floor:
                            x = v_floor
                        vn[i] = x
                    for i in range(N):
                        v[i] = vn[i]
                        if not isfinite(v[i]) and bad[b] < 0:
                            bad[b] = step
                    step += 1
                for i in range(N):
                    out[b, r, i] = v[i]
    return out_arr, bad_arr


def sfcm_memberships(const double[:, ::1] d2, const double[:, ::1] g, double lam):
    cdef Py_ssize_t n = d2.shape[0]
    cdef Py_ssize_t C = d2.shape[1]
    u_arr = np.zeros((n, C), dtype=np.float64)
    cdef double[:, ::1] u = u_arr
    cdef Py_ssize_t i, j, k
    cdef int zeros
    cdef double inv_sum, gsum, num
    with nogil:
        for i in range(n):
            zeros = 0
            for j in range(C):
                if d2[i, j] == 0.0:
                    zeros += 1
            if zeros > 0:
                for j in range(C):
                    if d2[i, j] == 0.0:
                        u[i, j] = 1.0 / zeros
                continue
            inv_sum = 0.0
            gsum = 0.0
            for k in range(C):
                inv_sum = inv_sum + 1.0 / d2[i, k]
                gsum = gsum + g[i, k]
            num = 1.0 + lam * (1.0 - gsum)
            for j in range(C):
                u[i, j] = (num / (d2[i, j] * inv_sum) + lam * g[i, j]) / (1.0 + lam)
    return u_arr
