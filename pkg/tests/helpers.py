"""Shared numerical test utilities."""

import numpy as np


def central_diff(f, x, eps=1e-4):
    """Gradient of the scalar function f() w.r.t. array x (mutated in place)
    by central finite differences."""
    x = np.asarray(x)
    g = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(analytic, numeric):
    """Max |a - n| scaled by (1 + max |n|): relative for large gradients,
    absolute near zero."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = 1.0 + float(np.max(np.abs(numeric))) if numeric.size else 1.0
    return float(np.max(np.abs(analytic - numeric))) / scale if numeric.size else 0.0


def assert_grad_close(f, x, analytic, tol=1e-4, eps=1e-4):
    numeric = central_diff(f, x, eps=eps)
    err = rel_err(analytic, numeric)
    assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol:.0e}"
