"""Dense tensor helpers and the numerical linear algebra the rest of rpk uses.

Tensors are plain :class:`numpy.ndarray` objects, row-major and contiguous,
restricted to ``float32`` and ``float64``.  Every public operation checks that
its result is finite.  Decompositions always run in float64 and cast their
result back to the caller's dtype.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import qr, solve_triangular

from .errors import NonFiniteError, RankDeficientError, ShapeError

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
DEFAULT_RANK_TOL = 1e-10


def as_tensor(x, dtype=None):
    """Return ``x`` as a contiguous float tensor, validating dtype and finiteness."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.dtype not in DTYPES:
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            arr = arr.astype(np.float64)
        else:
            raise TypeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    check_finite(arr)
    return arr


def check_finite(arr, what="tensor"):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return arr


def matmul(a, b):
    """Matrix product of two rank-2 tensors of the same dtype."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return check_finite(out, "matmul result")


def conv_output_size(size, k, stride, padding):
    span = size + 2 * padding
    if span < k:
        raise ShapeError(f"kernel {k} larger than padded input extent {span}")
    return (span - k) // stride + 1


def im2col_batch(x, k, stride=1, padding=0):
    """Unroll a batch ``[b, m, h, w]`` into columns ``[b, m*k*k, h'*w']``.

    Rows are ordered (channel, kernel row, kernel col), matching a filter
    bank ``[n, m, k, k]`` reshaped to ``[n, m*k*k]``.
    """
    b, m, h, w = x.shape
    if k == 1 and stride == 1 and padding == 0:
        return np.ascontiguousarray(x).reshape(b, m, h * w)
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :oh, :ow]
    # [b, m, oh, ow, k, k] -> [b, m, k, k, oh, ow]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, m * k * k, oh * ow)
    return np.ascontiguousarray(cols)


def col2im_batch(cols, x_shape, k, stride=1, padding=0):
    """Adjoint of :func:`im2col_batch`: scatter-add columns back to ``x_shape``."""
    b, m, h, w = x_shape
    if k == 1 and stride == 1 and padding == 0:
        return np.ascontiguousarray(cols).reshape(x_shape)
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    cols = cols.reshape(b, m, k, k, oh, ow)
    out = np.zeros((b, m, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


def im2col(x, k, stride=1, padding=0):
    """Unrolled matrix ``[m*k*k, h'*w']`` of a single ``[m, h, w]`` input."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"im2col expects [m, h, w], got {x.shape}")
    return check_finite(im2col_batch(x[None], k, stride, padding)[0])


@dataclass(frozen=True)
class RankReport:
    rows: int
    cols: int
    numerical_rank: int
    tolerance_used: float
    full_row_rank: bool
    full_col_rank: bool


def numerical_rank(w, rel_tol=DEFAULT_RANK_TOL):
    """Count singular values above ``rel_tol`` times the largest one."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"numerical_rank expects a matrix, got shape {w.shape}")
    rows, cols = w.shape
    if w.size == 0:
        s = np.zeros(0)
    else:
        s = np.linalg.svd(w, compute_uv=False)
    tol = rel_tol * s[0] if s.size else 0.0
    rank = int(np.count_nonzero(s > tol)) if s.size and s[0] > 0 else 0
    return RankReport(rows, cols, rank, float(tol), rank == rows, rank == cols)


def left_inverse(w, rel_tol=DEFAULT_RANK_TOL):
    """Minimum-norm left inverse ``L`` of a full-column-rank ``[p, m]`` matrix.

    Uses a column-pivoted QR factorisation ``W[:, piv] = Q R`` so that
    ``L = P R^-1 Q^T`` and ``L @ W == I_m``.
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"left_inverse expects a matrix, got shape {w.shape}")
    p, m = w.shape
    if p < m:
        raise ShapeError(f"left inverse of a {p}x{m} matrix requires rows >= cols")
    report = numerical_rank(w, rel_tol)
    if not report.full_col_rank:
        raise RankDeficientError(
            f"{p}x{m} matrix has numerical rank {report.numerical_rank} < {m}", report)
    w64 = w.astype(np.float64)
    q, r, piv = qr(w64, mode="economic", pivoting=True)
    inv_piv = solve_triangular(r, q.T)
    out = np.empty_like(inv_piv)
    out[piv] = inv_piv
    return check_finite(out.astype(w.dtype, copy=False), "left inverse")


def right_inverse(w, rel_tol=DEFAULT_RANK_TOL):
    """Minimum-norm right inverse ``R`` of a full-row-rank ``[n, q]`` matrix."""
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"right_inverse expects a matrix, got shape {w.shape}")
    n, q = w.shape
    if q < n:
        raise ShapeError(f"right inverse of a {n}x{q} matrix requires cols >= rows")
    try:
        return np.ascontiguousarray(left_inverse(w.T, rel_tol).T)
    except RankDeficientError as exc:
        raise RankDeficientError(
            f"{n}x{q} matrix has numerical rank {exc.report.numerical_rank} < {n}",
            numerical_rank(w, rel_tol)) from None
