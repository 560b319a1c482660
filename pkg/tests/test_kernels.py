import numpy as np
import pytest

from neggen import _kernels_py, kernels

from helpers import brute_force_assignment

try:
    from neggen import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

needs_ext = pytest.mark.skipif(_kernels_c is None, reason="compiled extension not built")


def test_backend_name():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("impl", [_kernels_py, pytest.param(_kernels_c, marks=needs_ext)], ids=["py", "cy"])
def test_assignment_brute_force(impl):
    rng = np.random.default_rng(9)
    for _ in range(100):
        n, m = rng.integers(1, 7, size=2)
        cost = rng.random((n, m))
        rows, cols = kernels.linear_sum_assignment(cost, impl=impl)
        assert len(rows) == min(n, m) == len(set(cols.tolist()))
        assert cost[rows, cols].sum() == pytest.approx(brute_force_assignment(cost.tolist()), abs=1e-12)


def test_assignment_rejects_bad_input():
    with pytest.raises(ValueError):
        kernels.linear_sum_assignment(np.ones(3))
    with pytest.raises(ValueError):
        kernels.linear_sum_assignment([[np.nan]])


@needs_ext
def test_cython_matches_python():
    rng = np.random.default_rng(10)
    for _ in range(50):
        cost = rng.random(tuple(rng.integers(1, 12, size=2)))
        a = kernels.linear_sum_assignment(cost, impl=_kernels_py)
        b = kernels.linear_sum_assignment(cost, impl=_kernels_c)
        assert cost[a].sum() == pytest.approx(cost[b].sum(), abs=1e-12)
    logits = rng.normal(scale=8, size=500)
    targets = rng.integers(0, 2, size=500).astype(float)
    for fa, fb in zip(_kernels_py.focal_terms(logits, targets, 0.25, 2.0),
                      _kernels_c.focal_terms(logits, targets, 0.25, 2.0)):
        np.testing.assert_allclose(fa, fb, rtol=1e-13, atol=1e-300)
    boxes = rng.uniform(0, 50, size=(30, 2))
    boxes = np.hstack([boxes, boxes + rng.uniform(1, 30, size=(30, 2))]).tolist()
    np.testing.assert_array_equal(_kernels_py.coverage_matrix(boxes), _kernels_c.coverage_matrix(boxes))
    spans = [[0, 3], [4, 9], [2, 5]]
    toks = [[0, 1], [2, 3], [4, 6], [7, 9]]
    np.testing.assert_array_equal(np.asarray(_kernels_py.span_overlap(spans, toks)),
                                  np.asarray(_kernels_c.span_overlap(spans, toks)))


def test_scipy_agreement():
    optimize = pytest.importorskip("scipy.optimize")
    rng = np.random.default_rng(12)
    for _ in range(30):
        cost = rng.random(tuple(rng.integers(1, 40, size=2)))
        r, c = kernels.linear_sum_assignment(cost)
        r2, c2 = optimize.linear_sum_assignment(cost)
        assert cost[r, c].sum() == pytest.approx(cost[r2, c2].sum(), abs=1e-9)


def test_pure_python_switch():
    import os
    import subprocess
    import sys
    env = dict(os.environ, NEGGEN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import neggen.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
