"""Pure-Python/numpy implementations of the numeric kernels.

Same contracts as the compiled ``_kernels`` module; used when the extension
is not built or when ``NEGGEN_PURE_PYTHON=1`` is set.
"""
import math

import numpy as np

LOG_FLOOR = math.log(1e-12)


def assign_rows(cost):
    """Min-cost assignment of every row to a distinct column (rows <= cols).

    Shortest augmenting path with dual potentials; returns an int64 array
    holding the chosen column for each row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError("assign_rows needs rows <= cols")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    c = cost.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: row (1-based) holding column j
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = c[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
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
    out = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = j - 1
    return out


def _log_sigmoid(x):
    # log(sigmoid(x)) without overflow
    return -np.logaddexp(0.0, -x)


def focal_terms(logits, targets, alpha, gamma):
    """Element-wise sigmoid focal loss and its derivative w.r.t. the logit."""
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    sign = np.where(t > 0.5, 1.0, -1.0)
    alpha_t = np.where(t > 0.5, alpha, 1.0 - alpha)
    log_pt = _log_sigmoid(sign * x)
    p_t = np.exp(log_pt)
    q_t = np.exp(_log_sigmoid(-sign * x))  # 1 - p_t, computed without cancellation
    clamped = log_pt < LOG_FLOOR
    log_pt = np.where(clamped, LOG_FLOOR, log_pt)
    mod = q_t ** gamma
    loss = -alpha_t * mod * log_pt
    grad = sign * alpha_t * mod * (gamma * p_t * log_pt - np.where(clamped, 0.0, q_t))
    return loss, grad


def coverage_matrix(boxes):
    """``out[i, j] = area(boxes[i] & boxes[j]) / area(boxes[j])``."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = b.shape[0]
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        ax1, ay1, ax2, ay2 = b[i]
        for j in range(n):
            bx1, by1, bx2, by2 = b[j]
            w = min(ax2, bx2) - max(ax1, bx1)
            h = min(ay2, by2) - max(ay1, by1)
            if w > 0 and h > 0:
                out[i, j] = (w * h) / ((bx2 - bx1) * (by2 - by1))
    return out


def span_overlap(region_spans, token_spans):
    """Binary (L, T) matrix: 1 where half-open spans intersect."""
    r = np.asarray(region_spans, dtype=np.int64).reshape(-1, 2)
    t = np.asarray(token_spans, dtype=np.int64).reshape(-1, 2)
    hit = (t[None, :, 0] < r[:, None, 1]) & (r[:, None, 0] < t[None, :, 1])
    return hit.astype(np.uint8)
