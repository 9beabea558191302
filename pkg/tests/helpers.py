"""Shared test oracles: central finite differences and gradient comparison."""

import numpy as np


def central_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numeric gradient of scalar f(x) by central differences, one element
    at a time. x must be float64 for the stated tolerances to hold."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """max |a - n| / max(|a|, |n|, floor); floor guards exact zeros against
    finite-difference roundoff noise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def assert_grads_close(analytic, numeric, rel: float = 1e-4, abs_tol: float = 1e-7):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    err = np.abs(a - n) - (abs_tol + rel * np.maximum(np.abs(a), np.abs(n)))
    worst = float(err.max())
    assert worst <= 0.0, (
        f"gradient mismatch: worst excess {worst:.3e}, "
        f"max analytic {np.abs(a).max():.3e}, max numeric {np.abs(n).max():.3e}"
    )
