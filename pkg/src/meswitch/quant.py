"""Uniform low-bit quantization with per-output-channel learnable step sizes.

Quantization maps a float32 matrix X to integer codes
``q = clamp(round(X / s), -Q_N, Q_P)`` with one step size ``s`` per output
channel (column), where ``Q_N = 2**(b-1)`` and ``Q_P = 2**(b-1) - 1`` for a
b-bit code.  Rounding is half-away-from-zero.  The 1-bit path is a sign
quantizer with a per-column mean-absolute scale.

Codes are stored column-major as unsigned offsets (``q + Q_N``, or
``(q + 1) / 2`` for 1-bit), LSB-first within each byte, with every column
zero-padded to a whole byte so columns stay byte-aligned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import TINY_F32

__all__ = [
    "QuantConfig",
    "StepInit",
    "PackedCodes",
    "round_half_away",
    "init_step_sizes",
    "quantize_codes",
    "dequantize",
    "ste_step_gradient",
    "pack_codes",
    "unpack_codes",
    "packed_nbytes",
]

_ALLOWED_BITS = (1, 2, 3, 4, 8)


@dataclass(frozen=True)
class QuantConfig:
    """Bit width and derived code range for the uniform quantizer."""

    bits: int = 2

    def __post_init__(self):
        if self.bits not in _ALLOWED_BITS:
            raise ValueError(f"bits must be one of {_ALLOWED_BITS}, got {self.bits}")

    @property
    def q_n(self) -> int:
        """Magnitude of the most negative code."""
        if self.bits == 1:
            return 1
        return 2 ** (self.bits - 1)

    @property
    def q_p(self) -> int:
        """Most positive code."""
        if self.bits == 1:
            return 1
        return 2 ** (self.bits - 1) - 1


@dataclass(frozen=True)
class StepInit:
    """Initial per-column step sizes plus indices of all-zero columns.

    All-zero columns get the smallest positive normal float32 step so the
    quantizer stays well defined; callers may warn on ``zero_columns``.
    """

    steps: np.ndarray
    zero_columns: tuple[int, ...] = ()


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer with ties away from zero."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def init_step_sizes(x: np.ndarray, cfg: QuantConfig) -> StepInit:
    """Per-output-channel step sizes: max|X_:j| / Q_P, or mean|X_:j| for 1-bit."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {x.shape}")
    if x.size == 0 and x.shape[1] == 0:
        raise ValueError("cannot initialise step sizes for a matrix with no columns")

    if x.shape[0] == 0:
        raw = np.zeros(x.shape[1], dtype=np.float64)
    elif cfg.bits == 1:
        raw = np.abs(x).mean(axis=0, dtype=np.float64)
    else:
        raw = np.abs(x).max(axis=0).astype(np.float64) / cfg.q_p

    zero_cols = np.flatnonzero(raw <= 0.0)
    steps = raw.astype(np.float32)
    steps[zero_cols] = TINY_F32
    return StepInit(steps=steps, zero_columns=tuple(int(j) for j in zero_cols))


def _check_steps(steps: np.ndarray, cols: int) -> np.ndarray:
    steps = np.asarray(steps, dtype=np.float32)
    if steps.ndim != 1 or steps.shape[0] != cols:
        raise ValueError(f"step vector must have length {cols}, got shape {steps.shape}")
    if not np.isfinite(steps).all() or (steps <= 0).any():
        raise ValueError("step sizes must be positive and finite")
    return steps


def quantize_codes(x: np.ndarray, steps: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Integer codes for ``x``; int8, shape preserved."""
    x = np.asarray(x, dtype=np.float32)
    steps = _check_steps(steps, x.shape[1])
    if cfg.bits == 1:
        codes = np.where(x < 0, -1, 1)
        return codes.astype(np.int8)
    u = x.astype(np.float64) / steps.astype(np.float64)
    codes = np.clip(round_half_away(u), -cfg.q_n, cfg.q_p)
    return codes.astype(np.int8)


def _check_codes(codes: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    codes = np.asarray(codes)
    if cfg.bits == 1:
        if not np.isin(codes, (-1, 1)).all():
            raise ValueError("1-bit codes must be -1 or +1")
    elif codes.size and (codes.min() < -cfg.q_n or codes.max() > cfg.q_p):
        raise ValueError(
            f"codes out of range [{-cfg.q_n}, {cfg.q_p}] for {cfg.bits}-bit config"
        )
    return codes


def dequantize(codes: np.ndarray, steps: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Reconstruct float32 values: ``codes * steps`` column-wise."""
    codes = _check_codes(codes, cfg)
    steps = _check_steps(steps, codes.shape[1])
    return (codes.astype(np.float32) * steps[None, :]).astype(np.float32)


def ste_step_gradient(
    x: np.ndarray,
    steps: np.ndarray,
    cfg: QuantConfig,
    upstream: np.ndarray,
) -> np.ndarray:
    """Straight-through gradient of the dequantized output w.r.t. each step.

    Per element, with ``u = x / s``: the local derivative is
    ``round(u) - u`` inside the clamp range, ``-Q_N`` below it and ``Q_P``
    above it; the rounding function itself is treated as identity.  For
    1-bit codes the scale derivative is ``sign(x)``.  Returns the upstream
    contraction ``grad[j] = sum_i upstream[i, j] * local[i, j]``.
    """
    x = np.asarray(x, dtype=np.float32)
    upstream = np.asarray(upstream, dtype=np.float32)
    if upstream.shape != x.shape:
        raise ValueError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    steps = _check_steps(steps, x.shape[1])

    if cfg.bits == 1:
        local = np.where(x < 0, -1.0, 1.0)
    else:
        u = x.astype(np.float64) / steps.astype(np.float64)
        local = round_half_away(u) - u
        local = np.where(u < -cfg.q_n, -float(cfg.q_n), local)
        local = np.where(u > cfg.q_p, float(cfg.q_p), local)
    return (upstream.astype(np.float64) * local).sum(axis=0).astype(np.float32)


@dataclass(frozen=True)
class PackedCodes:
    """Column-major bit-packed codes.

    ``data`` holds ``cols`` runs of ``ceil(rows * bits / 8)`` bytes each;
    within a run, offset codes are laid out LSB-first.
    """

    bits: int
    rows: int
    cols: int
    data: bytes

    @property
    def bytes_per_col(self) -> int:
        return (self.rows * self.bits + 7) // 8


def packed_nbytes(rows: int, cols: int, bits: int) -> int:
    """On-disk size of a packed code matrix."""
    return cols * ((rows * bits + 7) // 8)


def pack_codes(codes: np.ndarray, cfg: QuantConfig) -> PackedCodes:
    """Pack an integer code matrix into the column-major byte layout."""
    codes = _check_codes(np.asarray(codes), cfg)
    if codes.ndim != 2:
        raise ValueError(f"expected a 2-D code matrix, got shape {codes.shape}")
    rows, cols = codes.shape
    if rows == 0 or cols == 0:
        return PackedCodes(bits=cfg.bits, rows=rows, cols=cols, data=b"")

    if cfg.bits == 1:
        offsets = ((codes.astype(np.int16) + 1) // 2).astype(np.uint8)
    else:
        offsets = (codes.astype(np.int16) + cfg.q_n).astype(np.uint8)

    # (cols, rows * bits) bit matrix, LSB-first per value, then per column.
    shifts = np.arange(cfg.bits, dtype=np.uint8)
    bits = ((offsets.T[:, :, None] >> shifts[None, None, :]) & 1).reshape(cols, -1)
    packed = np.packbits(bits, axis=1, bitorder="little")
    return PackedCodes(bits=cfg.bits, rows=rows, cols=cols, data=packed.tobytes())


def unpack_codes(packed: PackedCodes) -> np.ndarray:
    """Invert :func:`pack_codes`, validating the byte count."""
    cfg = QuantConfig(bits=packed.bits)
    rows, cols = packed.rows, packed.cols
    expected = packed_nbytes(rows, cols, packed.bits)
    if len(packed.data) != expected:
        raise ValueError(
            f"packed stream has {len(packed.data)} bytes, expected {expected}"
        )
    if rows == 0 or cols == 0:
        return np.zeros((rows, cols), dtype=np.int8)

    raw = np.frombuffer(packed.data, dtype=np.uint8).reshape(cols, packed.bytes_per_col)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, : rows * packed.bits]
    weights = (1 << np.arange(packed.bits, dtype=np.int16))
    offsets = bits.reshape(cols, rows, packed.bits).astype(np.int16) @ weights
    if packed.bits == 1:
        codes = offsets * 2 - 1
    else:
        codes = offsets - cfg.q_n
    return codes.T.astype(np.int8)
