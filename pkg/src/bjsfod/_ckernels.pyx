# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.  Same functions and semantics as ``_pykernels``.

Symmetric matrices are handled as column-major lower triangles (equivalently
row-major upper triangles of the C-ordered numpy buffers).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs
from scipy.linalg.cython_blas cimport dsyrk
from scipy.linalg.cython_lapack cimport dpotrf, dpotrs

cnp.import_array()

NAME = "compiled"


def block_shrink(double[:, ::1] Z, cnp.int64_t[::1] starts, cnp.int64_t[::1] lens, double[::1] thresholds,
                 double[::1] sigma2):
    """Positive-part James-Stein shrinkage, in place."""
    cdef Py_ssize_t v, b, j, s, n
    cdef double zz, fac
    with nogil:
        for v in range(Z.shape[0]):
            for b in range(starts.shape[0]):
                s = starts[b]
                n = lens[b]
                zz = 0.0
                for j in range(s, s + n):
                    zz = zz + Z[v, j] * Z[v, j]
                if zz > 0:
                    fac = 1.0 - sigma2[v] * thresholds[b] / zz
                    if fac < 0:
                        fac = 0.0
                else:
                    fac = 0.0
                for j in range(s, s + n):
                    Z[v, j] = Z[v, j] * fac


cdef void _gather(const double[:, ::1] D, const unsigned char* mask, bint want,
                  double* buf, int L, int* k) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef int r = 0
    for i in range(D.shape[0]):
        if (mask[i] != 0) == want:
            for j in range(L):
                buf[r * L + j] = D[i, j]
            r += 1
    k[0] = r


cdef double _masked_into(const double[:, ::1] Dw, const double[:, ::1] gram_full,
                         const unsigned char* mask, const double[::1] mult,
                         double[:, ::1] base, double[:, ::1] out, double* buf) noexcept nogil:
    """out = base + sum_{mask} Dw_i Dw_i^T (lower triangle); returns the count."""
    cdef int L = <int> Dw.shape[1]
    cdef Py_ssize_t n = Dw.shape[0], i, j
    cdef int k = 0, nsel = 0
    cdef double count = 0.0, alpha, beta = 1.0
    cdef char uplo = b'L'
    cdef char trans = b'N'
    for i in range(n):
        if mask[i]:
            nsel += 1
            count += mult[i]
    if nsel <= n - nsel:
        for i in range(L):
            for j in range(L):
                out[i, j] = base[i, j]
        _gather(Dw, mask, True, buf, L, &k)
        alpha = 1.0
    else:
        for i in range(L):
            for j in range(L):
                out[i, j] = base[i, j] + gram_full[i, j]
        _gather(Dw, mask, False, buf, L, &k)
        alpha = -1.0
    if k > 0:
        # buf holds k rows of length L, i.e. a column-major (L x k) matrix A;
        # A A^T is the sum of the row outer products.
        dsyrk(&uplo, &trans, &L, &k, &alpha, buf, &L, &beta, &out[0, 0], &L)
    return count


def masked_gram(Dw, gram_full, mask, mult):
    """``sum_{i in mask} Dw_i Dw_i^T`` and the masked row count (with multiplicity)."""
    cdef double[:, ::1] D = np.ascontiguousarray(Dw, dtype=np.float64)
    cdef double[:, ::1] G = np.ascontiguousarray(gram_full, dtype=np.float64)
    cdef unsigned char[::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef double[::1] w = np.ascontiguousarray(mult, dtype=np.float64)
    L = D.shape[1]
    out = np.empty((L, L))
    zero = np.zeros((L, L))
    buf = np.empty(D.shape[0] * L)
    cdef double[:, ::1] o = out
    cdef double[:, ::1] z = zero
    cdef double[::1] b = buf
    cdef double count
    count = _masked_into(D, G, &m[0], w, z, o, &b[0])
    # mirror the lower (column-major) triangle
    iu = np.triu_indices(L, 1)
    out[iu[1], iu[0]] = out[iu]
    return out, count


def strict_local_maxima(values, cnp.int64_t[::1] indptr, cnp.int64_t[::1] indices):
    cdef double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], i, p
    res = np.ones(n, dtype=bool)
    cdef cnp.npy_bool[::1] out = res
    with nogil:
        for i in range(n):
            for p in range(indptr[i], indptr[i + 1]):
                if v[indices[p]] >= v[i]:
                    out[i] = False
                    break
    return res


def bjs_batch(design, Y):
    """BJS (transform, shrink, sharpen) for every row of ``Y``."""
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    cdef Py_ssize_t V = Y.shape[0], v, i, nd
    Z = np.ascontiguousarray(Y @ design.K.T)
    R = Y - (Y @ design.q) @ design.q.T
    s2 = np.ascontiguousarray(np.einsum("ij,ij->i", R, R) / (design.n - design.rank))
    block_shrink(Z, design._starts, design._lens, design._shrink_thr, s2)
    Fd_arr = np.ascontiguousarray(Z @ design.dense_basis[:, : design.L].T)
    rhs_arr = np.ascontiguousarray(Y @ design.Xs)
    thr_arr = np.zeros(V)
    if design.cfg.sharpen_threshold > 0:
        thr_arr = design.cfg.sharpen_threshold * Fd_arr.mean(axis=1)

    cdef double[:, ::1] Fd = Fd_arr
    cdef double[::1] thr = thr_arr
    cdef double[:, ::1] Dw = design.dense_weighted
    cdef double[:, ::1] Gf = np.ascontiguousarray(design.dense_gram)
    cdef double[:, ::1] G0 = np.ascontiguousarray(design.G0)
    cdef double[::1] mult = np.ascontiguousarray(design.dense_mult, dtype=np.float64)
    cdef int L = <int> G0.shape[0]
    nd = Dw.shape[0]
    out_arr = np.zeros((V, L))
    ok_arr = np.ones(V, dtype=bool)
    cdef double[:, ::1] out = out_arr
    cdef cnp.npy_bool[::1] ok = ok_arr
    cdef double[:, ::1] rhs = rhs_arr
    cdef double[:, ::1] G = np.empty((L, L))
    cdef unsigned char[::1] mask = np.empty(nd, dtype=np.uint8)
    cdef double[::1] buf = np.empty(nd * L)
    cdef double count, dmin, dmax, d, n_obs = <double> design.n
    cdef int info = 0, one = 1
    cdef char uplo = b'L'
    with nogil:
        for v in range(V):
            for i in range(nd):
                mask[i] = Fd[v, i] < thr[v]
            count = _masked_into(Dw, Gf, &mask[0], mult, G0, G, &buf[0])
            if n_obs + count < L:
                ok[v] = False
                continue
            dpotrf(&uplo, &L, &G[0, 0], &L, &info)
            if info != 0:
                ok[v] = False
                continue
            dmin = fabs(G[0, 0])
            dmax = dmin
            for i in range(1, L):
                d = fabs(G[i, i])
                if d < dmin:
                    dmin = d
                if d > dmax:
                    dmax = d
            if dmin <= 1e-7 * dmax:
                ok[v] = False
                continue
            for i in range(L):
                out[v, i] = rhs[v, i]
            dpotrs(&uplo, &L, &one, &G[0, 0], &L, &out[v, 0], &L, &info)
            if info != 0:
                ok[v] = False
                for i in range(L):
                    out[v, i] = 0.0
    return out_arr, ok_arr
