# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled numeric kernels. Contracts mirror ``neggen._kernels_py``."""
import numpy as np

from libc.math cimport exp, log, log1p, pow, INFINITY

cdef double LOG_FLOOR = log(1e-12)


def assign_rows(cost):
    """Min-cost assignment of every row to a distinct column (rows <= cols)."""
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0], m = c.shape[1]
    if n > m:
        raise ValueError("assign_rows needs rows <= cols")
    out_arr = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return out_arr
    cdef long long[::1] out = out_arr
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    cdef Py_ssize_t[::1] p = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(m + 1, dtype=np.intp)
    cdef unsigned char[::1] used = np.zeros(m + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur, ui0

    with nogil:
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(m + 1):
                minv[j] = INFINITY
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                ui0 = u[i0]
                delta = INFINITY
                j1 = 0
                for j in range(1, m + 1):
                    if not used[j]:
                        cur = c[i0 - 1, j - 1] - ui0 - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(m + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
                j0 = j1
                if p[j0] == 0:
                    break
            while j0:
                j1 = way[j0]
                p[j0] = p[j1]
                j0 = j1
        for j in range(1, m + 1):
            if p[j]:
                out[p[j] - 1] = j - 1
    return out_arr


cdef inline double _log_sigmoid(double x) nogil:
    if x >= 0:
        return -log1p(exp(-x))
    return x - log1p(exp(x))


def focal_terms(logits, targets, double alpha, double gamma):
    """Element-wise sigmoid focal loss and its derivative w.r.t. the logit."""
    x_arr = np.asarray(logits, dtype=np.float64)
    shape = x_arr.shape
    cdef double[::1] x = np.ascontiguousarray(x_arr.reshape(-1))
    cdef double[::1] t = np.ascontiguousarray(np.asarray(targets, dtype=np.float64).reshape(-1))
    if x.shape[0] != t.shape[0]:
        raise ValueError("logits and targets differ in size")
    loss_arr = np.empty(x.shape[0])
    grad_arr = np.empty(x.shape[0])
    cdef double[::1] loss = loss_arr
    cdef double[::1] grad = grad_arr
    cdef Py_ssize_t k
    cdef double s, a_t, log_pt, p_t, q_t, mod, qterm
    with nogil:
        for k in range(x.shape[0]):
            if t[k] > 0.5:
                s = 1.0
                a_t = alpha
            else:
                s = -1.0
                a_t = 1.0 - alpha
            log_pt = _log_sigmoid(s * x[k])
            p_t = exp(log_pt)
            q_t = exp(_log_sigmoid(-s * x[k]))
            qterm = q_t
            if log_pt < LOG_FLOOR:
                log_pt = LOG_FLOOR
                qterm = 0.0
            mod = pow(q_t, gamma)
            loss[k] = -a_t * mod * log_pt
            grad[k] = s * a_t * mod * (gamma * p_t * log_pt - qterm)
    return loss_arr.reshape(shape), grad_arr.reshape(shape)


def coverage_matrix(boxes):
    """``out[i, j] = area(boxes[i] & boxes[j]) / area(boxes[j])``."""
    cdef double[:, ::1] b = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    cdef Py_ssize_t n = b.shape[0], i, j
    out_arr = np.zeros((n, n))
    cdef double[:, ::1] out = out_arr
    cdef double w, h
    with nogil:
        for i in range(n):
            for j in range(n):
                w = min(b[i, 2], b[j, 2]) - max(b[i, 0], b[j, 0])
                h = min(b[i, 3], b[j, 3]) - max(b[i, 1], b[j, 1])
                if w > 0 and h > 0:
                    out[i, j] = (w * h) / ((b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]))
    return out_arr


def span_overlap(region_spans, token_spans):
    """Binary (L, T) matrix: 1 where half-open spans intersect."""
    cdef long long[:, ::1] r = np.ascontiguousarray(np.asarray(region_spans, dtype=np.int64).reshape(-1, 2))
    cdef long long[:, ::1] t = np.ascontiguousarray(np.asarray(token_spans, dtype=np.int64).reshape(-1, 2))
    cdef Py_ssize_t L = r.shape[0], T = t.shape[0], l, j
    out_arr = np.zeros((L, T), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    with nogil:
        for l in range(L):
            for j in range(T):
                if t[j, 0] < r[l, 1] and r[l, 0] < t[j, 1]:
                    out[l, j] = 1
    return out_arr
