"""Independent oracles shared by unit and acceptance tests.

Everything here is deliberately brute force (dense grids, direct
enumeration) and never calls the code paths it is used to check.
"""

import numpy as np


def two_basin_loss(theta):
    """1-D toy with a deep sharp basin near 1 and a shallow flat one near 3."""
    theta = np.asarray(theta, dtype=np.float64)
    return -1.0 * np.exp(-((theta - 1.0) ** 2) / 0.02) - 0.8 * np.exp(
        -((theta - 3.0) ** 2) / 1.0
    )


def two_basin_argmins(rho=0.3, step=1e-3, lo=0.0, hi=5.0):
    """Grid argmin of the plain loss and of its exact robust (max-over-ball)
    counterpart, both on a dense theta grid."""
    n_pad = int(round(rho / step))
    grid = lo + step * np.arange(int(round((hi - lo) / step)) + 1)
    ext = (lo - rho) + step * np.arange(grid.size + 2 * n_pad)
    plain = two_basin_loss(grid)
    ext_vals = two_basin_loss(ext)
    windows = np.lib.stride_tricks.sliding_window_view(ext_vals, 2 * n_pad + 1)
    robust = windows.max(axis=1)
    assert robust.shape == plain.shape
    return float(grid[np.argmin(plain)]), float(grid[np.argmin(robust)])


def linearly_separable_blobs(n_per_class=60, gap=2.0, sigma=0.3, seed=0):
    """Two 2-D clusters plus a certificate that a separating line exists.

    The certificate projects every point on the axis joining the class
    means and checks the projections do not overlap.
    """
    rng = np.random.default_rng(seed)
    mean_a, mean_b = np.array([-gap, 0.0]), np.array([gap, 0.0])
    xa = mean_a + sigma * rng.normal(size=(n_per_class, 2))
    xb = mean_b + sigma * rng.normal(size=(n_per_class, 2))
    axis = (mean_b - mean_a) / np.linalg.norm(mean_b - mean_a)
    separable = bool((xa @ axis).max() < (xb @ axis).min())
    x = np.concatenate([xa, xb])
    y = np.concatenate([np.zeros(n_per_class, dtype=int), np.ones(n_per_class, dtype=int)])
    return x, y, separable


def dense_symmetric_quadratic(dim, seed):
    """Random symmetric matrix with its eigenvalues from a dense solver."""
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(dim, dim))
    a = 0.5 * (m + m.T)
    eigvals = np.linalg.eigvalsh(a)
    return a, eigvals
