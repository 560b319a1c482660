"""Kernel dispatch: the compiled extension when available, else pure Python.

Set ``NEGGEN_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from neggen import _kernels_py

if os.environ.get("NEGGEN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from neggen import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"

focal_terms = _impl.focal_terms
coverage_matrix = _impl.coverage_matrix
span_overlap = _impl.span_overlap


def linear_sum_assignment(cost, impl=None):
    """Minimum-cost injective assignment for a rectangular cost matrix.

    Returns ``(rows, cols)`` index arrays of length ``min(N, L)``, sorted by row.
    """
    impl = impl or _impl
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    n, m = cost.shape
    if n <= m:
        cols = impl.assign_rows(cost)
        return np.arange(n, dtype=np.int64), cols
    rows_for_col = impl.assign_rows(np.ascontiguousarray(cost.T))
    order = np.argsort(rows_for_col, kind="stable")
    return rows_for_col[order], order.astype(np.int64)
