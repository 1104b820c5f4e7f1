"""Shared numeric helpers: seeded generators, checked products, statistics.

Everything here works on float64 numpy arrays.  Reductions that feed kernel
matrices go through :func:`dot` / :func:`row_dots`, which use numpy's pairwise
summation over a contiguous axis and therefore give the same bits regardless of
BLAS threading.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class NumericsError(ValueError):
    """Raised on malformed inputs to a numeric primitive."""


def make_rng(seed: int) -> np.random.Generator:
    """Return an explicit-state PCG64 generator; never touches global state."""
    if seed < 0 or seed >= 2**64:
        raise NumericsError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child generators from ``rng``."""
    return [np.random.Generator(np.random.PCG64(s)) for s in rng.bit_generator.seed_seq.spawn(n)]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericsError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def gaussian_matrix(rng: np.random.Generator, rows: int, cols: int, std: float) -> np.ndarray:
    """i.i.d. N(0, std^2) entries drawn row-major from ``rng``."""
    if std < 0:
        raise NumericsError(f"std must be non-negative, got {std}")
    return rng.standard_normal((rows, cols)) * std


def dot(a: np.ndarray, b: np.ndarray) -> float:
    """Deterministic inner product (elementwise product, pairwise sum)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise NumericsError(f"dot shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def row_dots(rows: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``[dot(r, v) for r in rows]`` with identical rounding, vectorised."""
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != v.shape[0]:
        raise NumericsError(f"row_dots shape mismatch: {rows.shape} vs {v.shape}")
    return np.sum(rows * v, axis=1)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation; raises instead of returning NaN on constant input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise NumericsError(f"pearson needs equal-length 1-d inputs, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise NumericsError("pearson needs at least two observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.sum(dx * dx))
    syy = float(np.sum(dy * dy))
    if sxx == 0.0 or syy == 0.0:
        raise NumericsError("pearson undefined: zero variance input")
    r = float(np.sum(dx * dy)) / float(np.sqrt(sxx * syy))
    return min(1.0, max(-1.0, r))


def argmax_tiebreak(v: Sequence[float]) -> int:
    """Index of the maximum; the lowest index wins ties."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise NumericsError("argmax of an empty sequence")
    # np.argmax already returns the first occurrence
    return int(np.argmax(v))


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))
