"""Independent reference implementations used to cross-check the package.

Everything here is deliberately naive: plain Python loops and textbook
formulas, no shared code with src/. Slow but obviously correct.
"""

import math

import numpy as np


def chamfer_one_way_brute(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total = 0.0
    for p in a:
        best = math.inf
        for qp in b:
            d = ((p[0] - qp[0]) ** 2 + (p[1] - qp[1]) ** 2 + (p[2] - qp[2]) ** 2)
            if d < best:
                best = d
        total += best
    return total / a.shape[0]


def chamfer_bidirectional_brute(a, b):
    return chamfer_one_way_brute(a, b) + chamfer_one_way_brute(b, a)


def central_difference(f, x, step=1e-5):
    """Central finite-difference gradient of scalar f at flat numpy array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(approx, exact):
    approx = np.asarray(approx, dtype=np.float64).ravel()
    exact = np.asarray(exact, dtype=np.float64).ravel()
    denom = max(1e-12, float(np.linalg.norm(exact)))
    return float(np.linalg.norm(approx - exact)) / denom


def population_variance(values):
    values = np.asarray(values, dtype=np.float64)
    return float(np.mean((values - values.mean()) ** 2))


def closest_point_on_triangle_brute(p, a, b, c, n_grid=400):
    """Dense barycentric sampling; accurate to O(edge / n_grid)."""
    p, a, b, c = (np.asarray(v, dtype=np.float64) for v in (p, a, b, c))
    best = math.inf
    for i in range(n_grid + 1):
        for j in range(n_grid + 1 - i):
            u = i / n_grid
            v = j / n_grid
            q = a + u * (b - a) + v * (c - a)
            d = np.linalg.norm(p - q)
            if d < best:
                best = d
    return best
