# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of ``_fallback``: fused single-pass row kernels."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, tanh, isfinite

cnp.import_array()

ctypedef fused floating:
    float
    double

cdef double GELU_C = 0.7978845608028654  # sqrt(2 / pi)


def all_finite(cnp.ndarray arr):
    cdef cnp.ndarray flat = np.ascontiguousarray(arr).reshape(-1)
    if flat.dtype == np.float32:
        return _all_finite_f(flat)
    if flat.dtype == np.float64:
        return _all_finite_d(flat)
    return bool(np.isfinite(flat).all())


cdef bint _all_finite_f(float[::1] x) noexcept:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        if not isfinite(x[i]):
            return False
    return True


cdef bint _all_finite_d(double[::1] x) noexcept:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        if not isfinite(x[i]):
            return False
    return True


def layer_norm_forward(x, gamma, beta, double eps):
    x = np.ascontiguousarray(x)
    dtype = x.dtype
    shape = x.shape
    n = shape[len(shape) - 1]
    x2 = x.reshape(-1, n)
    out = np.empty_like(x2)
    xhat = np.empty_like(x2)
    inv = np.empty((x2.shape[0], 1), dtype=dtype)
    g = np.ascontiguousarray(gamma, dtype=dtype)
    b = np.ascontiguousarray(beta, dtype=dtype)
    if dtype == np.float32:
        _ln_fwd[float](x2, g, b, eps, out, xhat, inv)
    else:
        _ln_fwd[double](x2, g, b, eps, out, xhat, inv)
    lead = shape[:-1] + (1,)
    return out.reshape(shape), xhat.reshape(shape), inv.reshape(lead)


cdef void _ln_fwd(floating[:, ::1] x, floating[::1] g, floating[::1] b, double eps,
                  floating[:, ::1] out, floating[:, ::1] xhat, floating[:, ::1] inv) noexcept nogil:
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double mu, var, s, d
    for i in range(rows):
        s = 0.0
        for j in range(n):
            s += x[i, j]
        mu = s / n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        s = 1.0 / sqrt(var / n + eps)
        inv[i, 0] = <floating>s
        for j in range(n):
            d = (x[i, j] - mu) * s
            xhat[i, j] = <floating>d
            out[i, j] = <floating>(d * g[j] + b[j])


def layer_norm_backward(g, xhat, inv, gamma):
    g = np.ascontiguousarray(g)
    dtype = g.dtype
    shape = g.shape
    n = shape[len(shape) - 1]
    g2 = g.reshape(-1, n)
    xh = np.ascontiguousarray(xhat, dtype=dtype).reshape(-1, n)
    iv = np.ascontiguousarray(inv, dtype=dtype).reshape(-1, 1)
    gm = np.ascontiguousarray(gamma, dtype=dtype)
    gx = np.empty_like(g2)
    ggamma = np.zeros(n, dtype=np.float64)
    gbeta = np.zeros(n, dtype=np.float64)
    if dtype == np.float32:
        _ln_bwd[float](g2, xh, iv, gm, gx, ggamma, gbeta)
    else:
        _ln_bwd[double](g2, xh, iv, gm, gx, ggamma, gbeta)
    return gx.reshape(shape), ggamma.astype(dtype), gbeta.astype(dtype)


cdef void _ln_bwd(floating[:, ::1] g, floating[:, ::1] xhat, floating[:, ::1] inv, floating[::1] gamma,
                  floating[:, ::1] gx, double[::1] ggamma, double[::1] gbeta) noexcept nogil:
    cdef Py_ssize_t rows = g.shape[0], n = g.shape[1], i, j
    cdef double mean_gx, mean_gxx, gxh
    for i in range(rows):
        mean_gx = 0.0
        mean_gxx = 0.0
        for j in range(n):
            gxh = g[i, j] * gamma[j]
            mean_gx += gxh
            mean_gxx += gxh * xhat[i, j]
            ggamma[j] += g[i, j] * xhat[i, j]
            gbeta[j] += g[i, j]
        mean_gx /= n
        mean_gxx /= n
        for j in range(n):
            gxh = g[i, j] * gamma[j]
            gx[i, j] = <floating>(inv[i, 0] * (gxh - mean_gx - xhat[i, j] * mean_gxx))


def gelu_forward(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _gelu_fwd[float](x.reshape(-1), out.reshape(-1))
    else:
        _gelu_fwd[double](x.reshape(-1), out.reshape(-1))
    return out


cdef void _gelu_fwd(floating[::1] x, floating[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    cdef double v
    for i in range(x.shape[0]):
        v = x[i]
        out[i] = <floating>(0.5 * v * (1.0 + tanh(GELU_C * (v + 0.044715 * v * v * v))))


def gelu_backward(g, x):
    x = np.ascontiguousarray(x)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _gelu_bwd[float](g.reshape(-1), x.reshape(-1), out.reshape(-1))
    else:
        _gelu_bwd[double](g.reshape(-1), x.reshape(-1), out.reshape(-1))
    return out


cdef void _gelu_bwd(floating[::1] g, floating[::1] x, floating[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    cdef double v, th, dinner
    for i in range(x.shape[0]):
        v = x[i]
        th = tanh(GELU_C * (v + 0.044715 * v * v * v))
        dinner = GELU_C * (1.0 + 3 * 0.044715 * v * v)
        out[i] = <floating>(g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner))


def scatter_add_rows(Py_ssize_t n_rows, ids, rows):
    flat_ids = np.ascontiguousarray(ids, dtype=np.int64).reshape(-1)
    flat = np.ascontiguousarray(rows).reshape(flat_ids.shape[0], -1)
    out = np.zeros((n_rows, flat.shape[1]), dtype=flat.dtype)
    if flat.dtype == np.float32:
        _scatter[float](flat_ids, flat, out)
    else:
        _scatter[double](flat_ids, flat, out)
    return out


cdef void _scatter(cnp.int64_t[::1] ids, floating[:, ::1] rows, floating[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t i, j, r, n = rows.shape[1]
    for i in range(ids.shape[0]):
        r = ids[i]
        for j in range(n):
            out[r, j] += rows[i, j]


def assign_nearest(X, C):
    cdef double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[:, ::1] c = np.ascontiguousarray(C, dtype=np.float64)
    labels = np.empty(x.shape[0], dtype=np.int64)
    dist = np.empty(x.shape[0], dtype=np.float64)
    cdef cnp.int64_t[::1] lab = labels
    cdef double[::1] dst = dist
    _assign(x, c, lab, dst)
    return labels, dist


cdef void _assign(double[:, ::1] x, double[:, ::1] c, cnp.int64_t[::1] lab, double[::1] dst) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], k = c.shape[0], d = x.shape[1], i, j, m
    cdef double best, acc, diff
    cdef Py_ssize_t arg
    for i in range(n):
        best = -1.0
        arg = 0
        for j in range(k):
            acc = 0.0
            for m in range(d):
                diff = x[i, m] - c[j, m]
                acc += diff * diff
                if best >= 0.0 and acc > best:
                    break
            if best < 0.0 or acc < best:
                best = acc
                arg = j
        lab[i] = arg
        dst[i] = best


def accumulate_centers(X, labels, Py_ssize_t k):
    cdef double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef cnp.int64_t[::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    sums = np.zeros((k, x.shape[1]), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    cdef double[:, ::1] s = sums
    cdef cnp.int64_t[::1] cnt = counts
    cdef Py_ssize_t i, m, j
    with nogil:
        for i in range(x.shape[0]):
            j = lab[i]
            cnt[j] += 1
            for m in range(x.shape[1]):
                s[j, m] += x[i, m]
    return sums, counts


def count_ranks(scores, targets, bint skip_first=True):
    scores = np.ascontiguousarray(scores)
    cdef cnp.int64_t[::1] tg = np.ascontiguousarray(targets, dtype=np.int64)
    ranks = np.empty(tg.shape[0], dtype=np.int64)
    cdef cnp.int64_t[::1] rk = ranks
    if scores.dtype == np.float32:
        _ranks[float](scores, tg, rk, skip_first)
    else:
        _ranks[double](np.ascontiguousarray(scores, dtype=np.float64), tg, rk, skip_first)
    return ranks


cdef void _ranks(floating[:, ::1] s, cnp.int64_t[::1] tg, cnp.int64_t[::1] rk, bint skip_first) noexcept nogil:
    cdef Py_ssize_t b, j, t, start = 1 if skip_first else 0
    cdef cnp.int64_t ahead
    cdef floating st
    for b in range(s.shape[0]):
        t = tg[b]
        st = s[b, t]
        ahead = 0
        for j in range(start, s.shape[1]):
            if s[b, j] > st or (s[b, j] == st and j < t):
                ahead += 1
        rk[b] = 1 + ahead


def hartigan_refine(X, labels, Py_ssize_t k, Py_ssize_t max_pass=100):
    cdef double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    lab_arr = np.array(labels, dtype=np.int64)
    cdef cnp.int64_t[::1] lab = lab_arr
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    counts_arr = np.bincount(lab_arr, minlength=k).astype(np.float64)
    sums_arr = np.zeros((k, d))
    np.add.at(sums_arr, lab_arr, np.asarray(x))
    centers_arr = sums_arr / np.maximum(counts_arr, 1.0)[:, None]
    cdef double[::1] counts = counts_arr
    cdef double[:, ::1] sums = sums_arr
    cdef double[:, ::1] centers = centers_arr
    cdef Py_ssize_t moves = 0
    with nogil:
        moves = _hartigan(x, lab, counts, sums, centers, max_pass)
    exact = np.zeros((k, d))
    np.add.at(exact, lab_arr, np.asarray(x))
    return exact / np.maximum(counts_arr, 1.0)[:, None], lab_arr, int(moves)


cdef Py_ssize_t _hartigan(double[:, ::1] x, cnp.int64_t[::1] lab, double[::1] counts, double[:, ::1] sums,
                          double[:, ::1] centers, Py_ssize_t max_pass) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], k = centers.shape[0]
    cdef Py_ssize_t p, i, j, m, a, b, moves = 0
    cdef double dist, remove, add, best, diff
    cdef bint moved
    for p in range(max_pass):
        moved = False
        for i in range(n):
            a = lab[i]
            if counts[a] <= 1.0:
                continue
            dist = 0.0
            for m in range(d):
                diff = centers[a, m] - x[i, m]
                dist += diff * diff
            remove = counts[a] / (counts[a] - 1.0) * dist
            best = remove * (1.0 - 1e-12)
            b = -1
            for j in range(k):
                if j == a:
                    continue
                dist = 0.0
                for m in range(d):
                    diff = centers[j, m] - x[i, m]
                    dist += diff * diff
                add = counts[j] / (counts[j] + 1.0) * dist
                if add < best:
                    best = add
                    b = j
            if b >= 0:
                for m in range(d):
                    sums[a, m] -= x[i, m]
                    sums[b, m] += x[i, m]
                counts[a] -= 1.0
                counts[b] += 1.0
                for m in range(d):
                    centers[a, m] = sums[a, m] / counts[a]
                    centers[b, m] = sums[b, m] / counts[b]
                lab[i] = b
                moved = True
                moves += 1
        if not moved:
            break
    return moves
