"""Dense linear algebra primitives shared by every other module.

Matrix convention used throughout the package: 2-D float32 arrays in
row-major (C) order, where rows index *input* channels and columns index
*output* channels.  Vectors are 1-D float32 arrays.  Half precision
(IEEE binary16) is a storage format only; all arithmetic accumulates in
float32 or wider.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "make_rng",
    "as_matrix",
    "as_vector",
    "matvec",
    "svd",
    "half_roundtrip",
    "half_bits",
    "half_from_bits",
]

#: Smallest positive normal float32, used as a floor for degenerate scales.
TINY_F32 = float(np.finfo(np.float32).tiny)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded 64-bit generator (PCG64) with platform-independent streams."""
    return np.random.default_rng(seed)


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite, C-contiguous float32 2-D array."""
    a = np.ascontiguousarray(data, dtype=np.float32)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")
    return a


def as_vector(data, name: str = "vector") -> np.ndarray:
    """Coerce to a finite float32 1-D array."""
    a = np.ascontiguousarray(data, dtype=np.float32)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")
    return a


def matvec(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Row-vector times matrix: y_j = sum_i x_i * w_ij, float32 accumulation.

    ``x`` has one entry per input channel (matrix row); the result has one
    entry per output channel (matrix column).
    """
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if x.ndim != 1 or w.ndim != 2:
        raise ValueError(f"matvec expects 1-D x and 2-D w, got {x.shape} and {w.shape}")
    if x.shape[0] != w.shape[0]:
        raise ValueError(
            f"matvec dimension mismatch: x has {x.shape[0]} entries, "
            f"matrix has {w.shape[0]} rows"
        )
    return x @ w


def _orthonormal_fill(u: np.ndarray, start: int) -> None:
    """Fill columns of ``u`` from ``start`` on with an orthonormal completion.

    Needed when the input is rank deficient: the trailing singular vectors
    are arbitrary, but the returned factor must still be orthonormal.
    """
    m = u.shape[0]
    col = start
    for cand in range(m):
        if col >= u.shape[1]:
            break
        v = np.zeros(m)
        v[cand] = 1.0
        v -= u[:, :col] @ (u[:, :col].T @ v)
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            u[:, col] = v / norm
            col += 1
    if col < u.shape[1]:
        raise RuntimeError("failed to complete orthonormal basis")


def svd(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 60):
    """Thin singular value decomposition via one-sided Jacobi rotations.

    Returns ``(u, s, vt)`` with ``a ~= u @ diag(s) @ vt`` where ``u`` is
    m x r, ``s`` holds the r = min(m, n) singular values in descending
    order, and ``vt`` is r x n.  Computation runs in float64; factors are
    returned in float64.  Intended for desk-scale matrices, not as a BLAS
    replacement.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"svd expects a 2-D matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("svd input contains non-finite values")

    m, n = a.shape
    if m < n:
        u, s, vt = svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return vt.T, s, u.T

    g = a.copy()
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                gp = g[:, p]
                gq = g[:, q]
                alpha = float(gp @ gp)
                beta = float(gq @ gq)
                gamma = float(gp @ gq)
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s_rot = c * t
                g[:, p], g[:, q] = c * gp - s_rot * gq, s_rot * gp + c * gq
                vp = v[:, p].copy()
                v[:, p] = c * vp - s_rot * v[:, q]
                v[:, q] = s_rot * vp + c * v[:, q]
        if not rotated:
            break

    sigma = np.linalg.norm(g, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[:, order]
    v = v[:, order]

    u = np.zeros((m, n))
    rank_end = n
    for j in range(n):
        if sigma[j] > TINY_F32:
            u[:, j] = g[:, j] / sigma[j]
        else:
            sigma[j] = 0.0
            rank_end = min(rank_end, j)
    if rank_end < n:
        _orthonormal_fill(u, rank_end)
    return u, sigma, v.T


def half_roundtrip(v: float) -> float:
    """Float32 value of the nearest-even binary16 rounding of ``v``.

    Values beyond the binary16 range map to the corresponding infinity.
    """
    with np.errstate(over="ignore"):
        return float(np.float32(np.float16(v)))


def half_bits(values: np.ndarray) -> np.ndarray:
    """Encode float values as uint16 binary16 bit patterns."""
    with np.errstate(over="ignore"):
        return np.asarray(values, dtype=np.float16).view(np.uint16)


def half_from_bits(bits: np.ndarray) -> np.ndarray:
    """Decode uint16 binary16 bit patterns to float32 values."""
    return np.asarray(bits, dtype=np.uint16).view(np.float16).astype(np.float32)
