"""Dense/sparse kernels: sparse-dense products, pseudoinverse least squares,
and the Gaussian range finder."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

DEFAULT_RCOND = 1e-10


class ShapeError(ValueError):
    pass


def as_dense(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def spmm(a, h) -> np.ndarray:
    """Sparse (CSR) times dense product."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    if a.shape[1] != h.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {h.shape}")
    if sp.issparse(a):
        return np.asarray(a @ h)
    return np.asarray(a, dtype=np.float64) @ h


def pinv_solve(a, b, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """Minimum-norm X minimizing ||a X - b||_F.

    Singular values below ``rcond * sigma_max`` are treated as zero.
    """
    a = as_dense(a, "a")
    b = as_dense(b, "b")
    if a.size == 0:
        raise ShapeError("pinv_solve on an empty matrix")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"row mismatch: a {a.shape}, b {b.shape}")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = rcond * (s[0] if s.size else 0.0)
    keep = s > cutoff
    if not np.any(keep):
        return np.zeros((a.shape[1], b.shape[1]))
    u, s, vt = u[:, keep], s[keep], vt[keep]
    return vt.T @ ((u.T @ b) / s[:, None])


def pinv(a, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    a = as_dense(a, "a")
    return pinv_solve(a, np.eye(a.shape[0]), rcond=rcond)


def range_finder(h, k: int, seed: int | np.random.Generator, power_iters: int = 0) -> np.ndarray:
    """Orthonormal basis Q (rows x k) approximately spanning the columns of ``h``.

    Gaussian sketch ``h @ omega`` followed by QR; ``k`` is clamped to
    ``min(h.shape)``. ``power_iters`` extra passes of ``h h^T`` sharpen the
    basis for slowly decaying spectra.
    """
    h = as_dense(h, "h")
    if k < 1:
        raise ValueError("range_finder needs k >= 1")
    k = min(k, *h.shape)
    if k == 0:
        return np.zeros((h.shape[0], 0))
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((h.shape[1], k))
    y = h @ omega
    for _ in range(power_iters):
        y, _ = np.linalg.qr(y)
        y = h @ (h.T @ y)
    q, _ = np.linalg.qr(y)
    return q
