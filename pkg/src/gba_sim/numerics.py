"""Dense float64 helpers shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Reductions
that feed cross-strategy comparisons (``matmul``) run in a fixed left-to-right
order over the inner dimension so results do not depend on BLAS blocking.
"""

from __future__ import annotations

import numpy as np

Matrix = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes are not conformable."""


class NonFiniteError(ValueError):
    """Raised when an input carries NaN or infinite entries."""


def as_matrix(m, name: str = "matrix") -> Matrix:
    """Coerce ``m`` to a finite 2-D float64 array, validating the invariants."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return arr


def matmul(a, b) -> Matrix:
    """Matrix product with a deterministic accumulation order.

    Entry ``(i, j)`` is accumulated as ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``,
    each product and sum rounded separately, which is exactly what a naive
    triple loop computes.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def logsumexp_rows(m: Matrix) -> np.ndarray:
    m = as_matrix(m)
    top = m.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(m - top).sum(axis=1, keepdims=True)))[:, 0]


def log_softmax_rows(m) -> Matrix:
    """Row-wise ``m_i - logsumexp(m_i)``, shifted by the row max for stability."""
    m = as_matrix(m)
    return m - logsumexp_rows(m)[:, None]


def softmax_rows(m) -> Matrix:
    return np.exp(log_softmax_rows(m))


def l2_normalize_rows(m) -> Matrix:
    m = as_matrix(m)
    norms = np.sqrt((m * m).sum(axis=1))
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"cannot normalize all-zero row {bad}")
    return m / norms[:, None]


def l2_normalize_rows_backward(x: Matrix, grad_out: Matrix) -> Matrix:
    """Gradient w.r.t. ``x`` of ``l2_normalize_rows(x)`` given upstream ``grad_out``.

    For ``y = x / |x|`` the Jacobian-vector product is ``(g - y <y, g>) / |x|``.
    """
    x = as_matrix(x, "x")
    norms = np.sqrt((x * x).sum(axis=1))[:, None]
    y = x / norms
    return (grad_out - y * (y * grad_out).sum(axis=1, keepdims=True)) / norms


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; identical seeds give identical draws."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def gaussian(rng: np.random.Generator, rows: int, cols: int, std: float = 1.0) -> Matrix:
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    return rng.standard_normal((rows, cols)) * std
