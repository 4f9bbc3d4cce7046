# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Kalman recursions mirroring the NumPy reference loops.

Each ``*_loop`` runs a whole measurement window and returns raw arrays plus
a failure step/node (-1 when clean); the Python wrappers attach domain
objects and raise the appropriate exceptions.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, exp, isfinite, sin, sqrt

cnp.import_array()


cdef int _cholesky(double[:, :] a, int n) noexcept nogil:
    """In-place lower Cholesky; returns -1 when not positive definite."""
    cdef int i, j, k
    cdef double s
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= a[j, k] * a[j, k]
        if not isfinite(s) or s <= 0.0:
            return -1
        a[j, j] = sqrt(s)
        for i in range(j + 1, n):
            s = a[i, j]
            for k in range(j):
                s -= a[i, k] * a[j, k]
            a[i, j] = s / a[j, j]
    return 0


cdef double _chol_cond(double[:, :] l, int n) noexcept nogil:
    """Squared pivot-ratio condition estimate of the factored matrix."""
    cdef double dmin = l[0, 0]
    cdef double dmax = l[0, 0]
    cdef int i
    for i in range(1, n):
        if l[i, i] < dmin:
            dmin = l[i, i]
        if l[i, i] > dmax:
            dmax = l[i, i]
    if dmin <= 0.0:
        return -1.0
    return (dmax / dmin) * (dmax / dmin)


cdef void _cho_solve(double[:, :] l, double[:, :] b, int n, int m) noexcept nogil:
    """Solve L L^T X = B in place; B is (n, m)."""
    cdef int i, j, k
    cdef double s
    for k in range(m):
        for i in range(n):
            s = b[i, k]
            for j in range(i):
                s -= l[i, j] * b[j, k]
            b[i, k] = s / l[i, i]
        for i in range(n - 1, -1, -1):
            s = b[i, k]
            for j in range(i + 1, n):
                s -= l[j, i] * b[j, k]
            b[i, k] = s / l[i, i]


cdef void _mode_trig(double[:] x, int n, int l_modes, double fs,
                     double[:] cbuf, double[:] sbuf) noexcept nogil:
    cdef int amp = n - 2 * l_modes
    cdef int li
    cdef double dec
    for li in range(l_modes):
        dec = exp(-x[amp + 2 * li + 1] / fs)
        cbuf[li] = dec * cos(x[amp + 2 * li] / fs)
        sbuf[li] = dec * sin(x[amp + 2 * li] / fs)


cdef void _propagate_into(double[:] x, double[:] out, int n, int l_modes,
                          double[:] cbuf, double[:] sbuf) noexcept nogil:
    cdef int amp = n - 2 * l_modes
    cdef int mchan = amp // (2 * l_modes)
    cdef int mi, li, i
    for i in range(amp, n):
        out[i] = x[i]
    for mi in range(mchan):
        for li in range(l_modes):
            i = mi * 2 * l_modes + 2 * li
            out[i] = x[i] * cbuf[li] - x[i + 1] * sbuf[li]
            out[i + 1] = x[i] * sbuf[li] + x[i + 1] * cbuf[li]


cdef void _predict_cov(double[:, :] p, double[:, :] work, double[:] xnext,
                       double[:] qdiag, int n, int l_modes, double fs,
                       double[:] cbuf, double[:] sbuf) noexcept nogil:
    """p <- F p F^T + diag(q), exploiting the sparse Jacobian structure."""
    cdef int amp = n - 2 * l_modes
    cdef int mchan = amp // (2 * l_modes)
    cdef int mi, li, i, j, wcol
    cdef double fw0, fq0, fw1, fq1, c, s, tmp
    # work = F p (amplitude row pairs mix their own pair and the mode columns)
    for mi in range(mchan):
        for li in range(l_modes):
            i = mi * 2 * l_modes + 2 * li
            wcol = amp + 2 * li
            c = cbuf[li]
            s = sbuf[li]
            fw0 = -xnext[i + 1] / fs
            fq0 = -xnext[i] / fs
            fw1 = xnext[i] / fs
            fq1 = -xnext[i + 1] / fs
            for j in range(n):
                work[i, j] = (c * p[i, j] - s * p[i + 1, j]
                              + fw0 * p[wcol, j] + fq0 * p[wcol + 1, j])
                work[i + 1, j] = (s * p[i, j] + c * p[i + 1, j]
                                  + fw1 * p[wcol, j] + fq1 * p[wcol + 1, j])
    for i in range(amp, n):
        for j in range(n):
            work[i, j] = p[i, j]
    # p = work F^T (same combination on columns)
    for mi in range(mchan):
        for li in range(l_modes):
            i = mi * 2 * l_modes + 2 * li
            wcol = amp + 2 * li
            c = cbuf[li]
            s = sbuf[li]
            fw0 = -xnext[i + 1] / fs
            fq0 = -xnext[i] / fs
            fw1 = xnext[i] / fs
            fq1 = -xnext[i + 1] / fs
            for j in range(n):
                p[j, i] = (c * work[j, i] - s * work[j, i + 1]
                           + fw0 * work[j, wcol] + fq0 * work[j, wcol + 1])
                p[j, i + 1] = (s * work[j, i] + c * work[j, i + 1]
                               + fw1 * work[j, wcol] + fq1 * work[j, wcol + 1])
    for i in range(amp, n):
        for j in range(n):
            p[j, i] = work[j, i]
    for i in range(n):
        p[i, i] += qdiag[i]
    for i in range(n):
        for j in range(i + 1, n):
            tmp = 0.5 * (p[i, j] + p[j, i])
            p[i, j] = tmp
            p[j, i] = tmp


cdef int _block_update(double[:] phi, double[:, :] p, double y_obs, int lo, int hi,
                       double r, int n, double[:] ph, double* innov_out) noexcept nogil:
    """Scalar measurement update for a block-of-ones observation row."""
    cdef int i, b
    cdef double s, innov, g
    for i in range(n):
        s = 0.0
        for b in range(lo, hi):
            s += p[i, b]
        ph[i] = s
    s = r
    for b in range(lo, hi):
        s += ph[b]
    if not isfinite(s) or s <= 0.0:
        return -1
    innov = y_obs
    for b in range(lo, hi):
        innov -= phi[b]
    for i in range(n):
        g = ph[i] / s
        phi[i] += g * innov
    for i in range(n):
        g = ph[i] / s
        for b in range(n):
            p[i, b] -= g * ph[b]
    innov_out[0] = innov
    return 0


cdef void _symmetrize(double[:, :] p, int n) noexcept nogil:
    cdef int i, j
    cdef double tmp
    for i in range(n):
        for j in range(i + 1, n):
            tmp = 0.5 * (p[i, j] + p[j, i])
            p[i, j] = tmp
            p[j, i] = tmp


cdef int _all_finite(double[:] x, int n) noexcept nogil:
    cdef int i
    for i in range(n):
        if not isfinite(x[i]):
            return 0
    return 1


def cekf_loop(double[:, ::1] y_t, double[:, ::1] h, double[::1] r_diag,
              double[::1] q_diag, double[::1] x0, double[:, ::1] p0,
              double fs, int l_modes, double cond_limit):
    """Centralized filter over a window; y_t is (N, M), h is (M, n).

    Returns (posterior states, final posterior P, innovations, fail_step).
    """
    cdef int n_steps = y_t.shape[0]
    cdef int mchan = y_t.shape[1]
    cdef int n = x0.shape[0]
    states_arr = np.empty((n_steps, n))
    innov_arr = np.empty((n_steps, mchan))
    p_final_arr = np.zeros((n, n))
    x_arr = np.array(x0, dtype=float)
    p_arr = np.array(p0, dtype=float)
    pht_arr = np.empty((n, mchan))
    s_arr = np.empty((mchan, mchan))
    kt_arr = np.empty((mchan, n))
    work_arr = np.empty((n, n))
    xnext_arr = np.empty(n)
    cbuf_arr = np.empty(l_modes)
    sbuf_arr = np.empty(l_modes)

    cdef double[:, ::1] states = states_arr
    cdef double[:, ::1] innovs = innov_arr
    cdef double[:, ::1] p_final = p_final_arr
    cdef double[::1] x = x_arr
    cdef double[:, ::1] p = p_arr
    cdef double[:, ::1] pht = pht_arr
    cdef double[:, ::1] s = s_arr
    cdef double[:, ::1] kt = kt_arr
    cdef double[:, ::1] work = work_arr
    cdef double[::1] xnext = xnext_arr
    cdef double[::1] cbuf = cbuf_arr
    cdef double[::1] sbuf = sbuf_arr

    cdef int fail = -1
    cdef int k, i, j, q
    cdef double acc, cond

    with nogil:
        for k in range(n_steps):
            # pht = P H^T ; S = H pht + diag(r)
            for i in range(n):
                for j in range(mchan):
                    acc = 0.0
                    for q in range(n):
                        acc += p[i, q] * h[j, q]
                    pht[i, j] = acc
            for i in range(mchan):
                for j in range(mchan):
                    acc = 0.0
                    for q in range(n):
                        acc += h[i, q] * pht[q, j]
                    s[i, j] = acc
                s[i, i] += r_diag[i]
            for i in range(mchan):
                for j in range(i + 1, mchan):
                    acc = 0.5 * (s[i, j] + s[j, i])
                    s[i, j] = acc
                    s[j, i] = acc
            if _cholesky(s, mchan) != 0:
                fail = k
                break
            cond = _chol_cond(s, mchan)
            if cond < 0.0 or cond > cond_limit:
                fail = k
                break
            # K^T from S K^T = (P H^T)^T
            for i in range(mchan):
                for j in range(n):
                    kt[i, j] = pht[j, i]
            _cho_solve(s, kt, mchan, n)
            # innovation and posterior state
            for j in range(mchan):
                acc = y_t[k, j]
                for q in range(n):
                    acc -= h[j, q] * x[q]
                innovs[k, j] = acc
            for i in range(n):
                acc = 0.0
                for j in range(mchan):
                    acc += kt[j, i] * innovs[k, j]
                x[i] += acc
            # P <- P - K (H P), using H P = (P H^T)^T for symmetric P
            for i in range(n):
                for q in range(n):
                    acc = 0.0
                    for j in range(mchan):
                        acc += kt[j, i] * pht[q, j]
                    work[i, q] = acc
            for i in range(n):
                for q in range(n):
                    p[i, q] -= work[i, q]
            _symmetrize(p, n)
            if not _all_finite(x, n):
                fail = k
                break
            for q in range(n):
                states[k, q] = x[q]
            if k == n_steps - 1:
                for i in range(n):
                    for q in range(n):
                        p_final[i, q] = p[i, q]
            # predict
            _mode_trig(x, n, l_modes, fs, cbuf, sbuf)
            _propagate_into(x, xnext, n, l_modes, cbuf, sbuf)
            _predict_cov(p, work, xnext, q_diag, n, l_modes, fs, cbuf, sbuf)
            for q in range(n):
                x[q] = xnext[q]

    return states_arr, p_final_arr, innov_arr, fail


def dekf_loop(double[:, ::1] y_t, int[::1] indptr, int[::1] indices,
              double[::1] c_flat, double[:, ::1] r_nodes, double[:, ::1] q_nodes,
              double[:, ::1] x0s, double[:, :, ::1] p0s, double fs, int l_modes):
    """Full-state diffusion filter; returns per-node traces and the failure
    (step, node) pair (-1, -1 when clean)."""
    cdef int n_steps = y_t.shape[0]
    cdef int m_nodes = indptr.shape[0] - 1
    cdef int n = x0s.shape[1]
    cdef int two_l = 2 * l_modes

    states_arr = np.empty((n_steps, m_nodes, n))
    innov_arr = np.empty((n_steps, m_nodes))
    p_final_arr = np.zeros((m_nodes, n, n))
    x_arr = np.array(x0s, dtype=float)
    p_arr = np.array(p0s, dtype=float)
    phi_arr = np.empty((m_nodes, n))
    ph_arr = np.empty(n)
    work_arr = np.empty((n, n))
    xnext_arr = np.empty(n)
    cbuf_arr = np.empty(l_modes)
    sbuf_arr = np.empty(l_modes)

    cdef double[:, :, ::1] states = states_arr
    cdef double[:, ::1] innovs = innov_arr
    cdef double[:, :, ::1] p_final = p_final_arr
    cdef double[:, ::1] x = x_arr
    cdef double[:, :, ::1] p = p_arr
    cdef double[:, ::1] phi = phi_arr
    cdef double[::1] ph = ph_arr
    cdef double[:, ::1] work = work_arr
    cdef double[::1] xnext = xnext_arr
    cdef double[::1] cbuf = cbuf_arr
    cdef double[::1] sbuf = sbuf_arr

    cdef int fail_step = -1
    cdef int fail_node = -1
    cdef int k, m, e, j, i, q
    cdef double sq, innov, w

    with nogil:
        for k in range(n_steps):
            # incremental updates
            for m in range(m_nodes):
                for q in range(n):
                    phi[m, q] = x[m, q]
                sq = 0.0
                for e in range(indptr[m], indptr[m + 1]):
                    j = indices[e]
                    if _block_update(phi[m], p[m], y_t[k, j], j * two_l,
                                     (j + 1) * two_l, r_nodes[m, j], n, ph, &innov) != 0:
                        fail_step = k
                        fail_node = m
                        break
                    sq += innov * innov
                if fail_step >= 0:
                    break
                _symmetrize(p[m], n)
                innovs[k, m] = sqrt(sq)
            if fail_step >= 0:
                break
            # diffusion + prediction
            for m in range(m_nodes):
                for q in range(n):
                    xnext[q] = 0.0
                for e in range(indptr[m], indptr[m + 1]):
                    j = indices[e]
                    w = c_flat[e]
                    for q in range(n):
                        xnext[q] += w * phi[j, q]
                if not _all_finite(xnext, n):
                    fail_step = k
                    fail_node = m
                    break
                for q in range(n):
                    states[k, m, q] = xnext[q]
                    x[m, q] = xnext[q]
                if k == n_steps - 1:
                    for i in range(n):
                        for q in range(n):
                            p_final[m, i, q] = p[m, i, q]
                _mode_trig(x[m], n, l_modes, fs, cbuf, sbuf)
                _propagate_into(x[m], xnext, n, l_modes, cbuf, sbuf)
                _predict_cov(p[m], work, xnext, q_nodes[m], n, l_modes, fs, cbuf, sbuf)
                for q in range(n):
                    x[m, q] = xnext[q]
            if fail_step >= 0:
                break

    return states_arr, p_final_arr, innov_arr, fail_step, fail_node


def dekfr_loop(double[:, ::1] y_t, int[::1] indptr, int[::1] indices,
               double[::1] c_flat, int[::1] dims, int[::1] dtab_indptr,
               int[::1] contrib_node, int[::1] contrib_block,
               double[::1] contrib_weight, double[:, ::1] r_nodes,
               double[:, ::1] q_nodes, double[:, ::1] x0s,
               double[:, :, ::1] p0s, double fs, int l_modes):
    """Reduced-state diffusion filter on padded per-node arrays."""
    cdef int n_steps = y_t.shape[0]
    cdef int m_nodes = indptr.shape[0] - 1
    cdef int nmax = x0s.shape[1]
    cdef int two_l = 2 * l_modes

    states_arr = np.zeros((n_steps, m_nodes, nmax))
    innov_arr = np.empty((n_steps, m_nodes))
    p_final_arr = np.zeros((m_nodes, nmax, nmax))
    x_arr = np.array(x0s, dtype=float)
    p_arr = np.array(p0s, dtype=float)
    phi_arr = np.zeros((m_nodes, nmax))
    ph_arr = np.empty(nmax)
    work_arr = np.empty((nmax, nmax))
    xnext_arr = np.empty(nmax)
    cbuf_arr = np.empty(l_modes)
    sbuf_arr = np.empty(l_modes)

    cdef double[:, :, ::1] states = states_arr
    cdef double[:, ::1] innovs = innov_arr
    cdef double[:, :, ::1] p_final = p_final_arr
    cdef double[:, ::1] x = x_arr
    cdef double[:, :, ::1] p = p_arr
    cdef double[:, ::1] phi = phi_arr
    cdef double[::1] ph = ph_arr
    cdef double[:, ::1] work = work_arr
    cdef double[::1] xnext = xnext_arr
    cdef double[::1] cbuf = cbuf_arr
    cdef double[::1] sbuf = sbuf_arr

    cdef int fail_step = -1
    cdef int fail_node = -1
    cdef int k, m, e, j, i, q, j_idx, nm, d, blk, ms_m, ms_j
    cdef double sq, innov, w

    with nogil:
        for k in range(n_steps):
            for m in range(m_nodes):
                nm = dims[m]
                for q in range(nm):
                    phi[m, q] = x[m, q]
                sq = 0.0
                for j_idx in range(indptr[m + 1] - indptr[m]):
                    j = indices[indptr[m] + j_idx]
                    if _block_update(phi[m], p[m], y_t[k, j], j_idx * two_l,
                                     (j_idx + 1) * two_l, r_nodes[m, j], nm,
                                     ph, &innov) != 0:
                        fail_step = k
                        fail_node = m
                        break
                    sq += innov * innov
                if fail_step >= 0:
                    break
                _symmetrize(p[m], nm)
                innovs[k, m] = sqrt(sq)
            if fail_step >= 0:
                break
            for m in range(m_nodes):
                nm = dims[m]
                ms_m = nm - two_l
                for q in range(nm):
                    xnext[q] = 0.0
                # amplitude blocks from the nodes that estimate the same block
                for j_idx in range(indptr[m + 1] - indptr[m]):
                    e = indptr[m] + j_idx
                    for d in range(dtab_indptr[e], dtab_indptr[e + 1]):
                        i = contrib_node[d]
                        blk = contrib_block[d]
                        w = contrib_weight[d]
                        for q in range(two_l):
                            xnext[j_idx * two_l + q] += w * phi[i, blk * two_l + q]
                # shared mode block from neighbor pre-estimates
                for j_idx in range(indptr[m + 1] - indptr[m]):
                    e = indptr[m] + j_idx
                    j = indices[e]
                    w = c_flat[e]
                    ms_j = dims[j] - two_l
                    for q in range(two_l):
                        xnext[ms_m + q] += w * phi[j, ms_j + q]
                if not _all_finite(xnext, nm):
                    fail_step = k
                    fail_node = m
                    break
                for q in range(nm):
                    states[k, m, q] = xnext[q]
                    x[m, q] = xnext[q]
                if k == n_steps - 1:
                    for i in range(nm):
                        for q in range(nm):
                            p_final[m, i, q] = p[m, i, q]
                _mode_trig(x[m], nm, l_modes, fs, cbuf, sbuf)
                _propagate_into(x[m], xnext, nm, l_modes, cbuf, sbuf)
                _predict_cov(p[m], work, xnext, q_nodes[m], nm, l_modes, fs, cbuf, sbuf)
                for q in range(nm):
                    x[m, q] = xnext[q]
            if fail_step >= 0:
                break

    return states_arr, p_final_arr, innov_arr, fail_step, fail_node
