"""Input-channel saliency scoring for delta matrices and top-k selection.

A channel's score estimates how much quantizing its delta row inflates the
layer's output reconstruction error over a calibration set.  Since the
per-sample error sum factorizes exactly, the calibration set is summarised
by per-channel squared-activation energies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import make_rng
from .toylm import ToyLM, capture_layer_inputs

__all__ = [
    "ActivationStats",
    "SalientSet",
    "collect_activation_stats",
    "stats_from_layer_inputs",
    "collect_all_activation_stats",
    "score_reconstruction",
    "score_magnitude",
    "score_wanda",
    "score_random",
    "top_k",
]


@dataclass(frozen=True)
class ActivationStats:
    """Per-input-channel energy E_i = sum over calibration samples of x_i^2."""

    energy: np.ndarray
    sample_count: int

    def __post_init__(self):
        if self.energy.ndim != 1:
            raise ValueError("energy must be a 1-D vector")
        if not np.isfinite(self.energy).all() or (self.energy < 0).any():
            raise ValueError("energies must be finite and non-negative")


@dataclass(frozen=True)
class SalientSet:
    """Sorted unique channel indices retained at full precision."""

    indices: np.ndarray
    k: int

    def __post_init__(self):
        if self.indices.shape != (self.k,):
            raise ValueError("index count must equal k")
        if self.k and (np.diff(self.indices) <= 0).any():
            raise ValueError("indices must be strictly ascending")


def stats_from_layer_inputs(layer_input: np.ndarray, vocab: int | None = None) -> ActivationStats:
    """Build stats from one entry of :func:`toylm.capture_layer_inputs`.

    Token-id entries (embedding layer) become occurrence counts, which
    equal squared-one-hot energies; activation matrices are reduced with
    float64 accumulation.
    """
    arr = np.asarray(layer_input)
    if arr.ndim == 1:  # token ids for the embedding layer
        if vocab is None:
            raise ValueError("vocab required to build embedding-layer stats")
        energy = np.bincount(arr, minlength=vocab).astype(np.float64)
        return ActivationStats(energy=energy.astype(np.float32), sample_count=arr.size)
    energy = (arr.astype(np.float64) ** 2).sum(axis=0)
    return ActivationStats(energy=energy.astype(np.float32), sample_count=arr.shape[0])


def collect_activation_stats(model: ToyLM, layer: int, sequences) -> ActivationStats:
    """Activation energies feeding weight layer ``layer`` (0 = embedding)."""
    if not sequences:
        raise ValueError("calibration set is empty")
    if not 0 <= layer < model.n_weight_layers:
        raise ValueError(f"layer index {layer} out of range [0, {model.n_weight_layers})")
    inputs = capture_layer_inputs(model, sequences)
    return stats_from_layer_inputs(inputs[layer], vocab=model.vocab)


def collect_all_activation_stats(model: ToyLM, sequences) -> list[ActivationStats]:
    """Stats for every weight layer from a single forward sweep."""
    if not sequences:
        raise ValueError("calibration set is empty")
    inputs = capture_layer_inputs(model, sequences)
    return [stats_from_layer_inputs(inp, vocab=model.vocab) for inp in inputs]


def _check_rows(delta: np.ndarray, stats: ActivationStats | None) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float32)
    if delta.ndim != 2:
        raise ValueError(f"expected a 2-D delta matrix, got shape {delta.shape}")
    if stats is not None and stats.energy.shape[0] != delta.shape[0]:
        raise ValueError(
            f"stats cover {stats.energy.shape[0]} channels, delta has {delta.shape[0]} rows"
        )
    return delta


def score_reconstruction(
    delta: np.ndarray, approx: np.ndarray, stats: ActivationStats
) -> np.ndarray:
    """Calibration-aggregated output reconstruction error per input channel.

    score_i = E_i * sum_j (delta_ij - approx_ij)^2, which equals the double
    sum over calibration samples and output channels of the squared output
    error attributable to channel i.
    """
    delta = _check_rows(delta, stats)
    approx = np.asarray(approx, dtype=np.float32)
    if approx.shape != delta.shape:
        raise ValueError(f"shape mismatch: {delta.shape} vs {approx.shape}")
    row_err = ((delta.astype(np.float64) - approx.astype(np.float64)) ** 2).sum(axis=1)
    return (stats.energy.astype(np.float64) * row_err).astype(np.float32)


def score_magnitude(delta: np.ndarray) -> np.ndarray:
    """Row L1 norm; ignores activations entirely."""
    delta = _check_rows(delta, None)
    return np.abs(delta).sum(axis=1, dtype=np.float64).astype(np.float32)


def score_wanda(delta: np.ndarray, stats: ActivationStats) -> np.ndarray:
    """Pruning-style proxy: sqrt(E_i) times the row L1 norm."""
    delta = _check_rows(delta, stats)
    row_l1 = np.abs(delta).sum(axis=1, dtype=np.float64)
    return (np.sqrt(stats.energy.astype(np.float64)) * row_l1).astype(np.float32)


def score_random(m: int, seed: int) -> np.ndarray:
    """Seeded random ranking: a permutation of 0..m-1 as scores."""
    return make_rng(seed).permutation(m).astype(np.float32)


def top_k(scores: np.ndarray, k: int) -> SalientSet:
    """Indices of the k largest scores; ties break toward lower indices."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ValueError("scores must be 1-D")
    if not 0 <= k <= scores.shape[0]:
        raise ValueError(f"k={k} out of range for {scores.shape[0]} channels")
    if k == 0:
        return SalientSet(indices=np.zeros(0, dtype=np.int64), k=0)
    order = np.argsort(-scores, kind="stable")[:k]
    return SalientSet(indices=np.sort(order).astype(np.int64), k=k)
