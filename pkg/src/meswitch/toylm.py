"""Deterministic byte-level toy language model used as base and experts.

Architecture: token embedding (V x d) plus a fixed sinusoidal positional
bias, ``depth`` linear layers (d x d) with ReLU, and a linear output head
(d x V).  There is no attention, so every token position flows through the
network independently; sequences are batches of positions.  All weights
are float32 and models are immutable after construction.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import quant
from .numerics import make_rng

__all__ = [
    "ToyLM",
    "ExpertSpec",
    "RowPlan",
    "QuantizedLayerState",
    "tokenize",
    "detokenize",
    "positional_bias",
    "random_toylm",
    "base_digest",
    "save_toylm",
    "load_toylm",
    "forward",
    "forward_with_delta",
    "greedy_decode",
    "synthesize_expert",
    "expert_row_plan",
    "capture_layer_inputs",
    "backward_step_sizes",
]

TOYL_MAGIC = b"TOYL"
TOYL_VERSION = 1


@dataclass(frozen=True)
class ToyLM:
    """Weights of one toy model; layer order is embedding, hidden 1..L, head."""

    vocab: int
    width: int
    depth: int
    embedding: np.ndarray  # (vocab, width)
    layers: tuple[np.ndarray, ...]  # depth matrices, each (width, width)
    head: np.ndarray  # (width, vocab)

    def __post_init__(self):
        if self.embedding.shape != (self.vocab, self.width):
            raise ValueError("embedding shape does not match vocab/width")
        if len(self.layers) != self.depth:
            raise ValueError("layer count does not match depth")
        for w in self.layers:
            if w.shape != (self.width, self.width):
                raise ValueError("hidden layer shape mismatch")
        if self.head.shape != (self.width, self.vocab):
            raise ValueError("head shape mismatch")

    @property
    def n_weight_layers(self) -> int:
        """Number of compressible weight matrices (embedding + hidden + head)."""
        return self.depth + 2

    def weight_matrices(self) -> list[np.ndarray]:
        return [self.embedding, *self.layers, self.head]


def tokenize(text: str) -> list[int]:
    """Byte-level token ids; lossless for any UTF-8 string."""
    return list(text.encode("utf-8"))


def detokenize(ids) -> str:
    """Inverse of :func:`tokenize`; invalid byte sequences are replaced."""
    return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


def positional_bias(n_positions: int, width: int) -> np.ndarray:
    """Fixed sinusoidal positional table, shape (n_positions, width)."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    dim = np.arange(width, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (dim // 2)) / width)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)


def random_toylm(
    seed: int,
    vocab: int = 256,
    width: int = 64,
    depth: int = 4,
    weight_scale: float | None = None,
) -> ToyLM:
    """Deterministic random model; hidden layers scale like 1/sqrt(width)."""
    rng = make_rng(seed)
    scale = weight_scale if weight_scale is not None else 1.0 / np.sqrt(width)
    emb = rng.normal(0.0, 0.5, size=(vocab, width)).astype(np.float32)
    layers = tuple(
        rng.normal(0.0, scale, size=(width, width)).astype(np.float32)
        for _ in range(depth)
    )
    head = rng.normal(0.0, scale, size=(width, vocab)).astype(np.float32)
    return ToyLM(vocab=vocab, width=width, depth=depth, embedding=emb, layers=layers, head=head)


def base_digest(model: ToyLM) -> str:
    """SHA-256 over the little-endian float32 bytes of all weight matrices."""
    h = hashlib.sha256()
    for w in model.weight_matrices():
        h.update(np.ascontiguousarray(w, dtype="<f4").tobytes())
    return h.hexdigest()


def save_toylm(model: ToyLM, path) -> None:
    with open(path, "wb") as f:
        f.write(TOYL_MAGIC)
        f.write(struct.pack("<HIII", TOYL_VERSION, model.vocab, model.width, model.depth))
        for w in model.weight_matrices():
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def load_toylm(path) -> ToyLM:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != TOYL_MAGIC:
            raise ValueError(f"not a toy model file (magic {magic!r})")
        version, vocab, width, depth = struct.unpack("<HIII", f.read(14))
        if version != TOYL_VERSION:
            raise ValueError(f"unsupported toy model version {version}")

        def read(shape):
            n = int(np.prod(shape))
            buf = f.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError("truncated toy model file")
            return np.frombuffer(buf, dtype="<f4").reshape(shape).copy()

        emb = read((vocab, width))
        layers = tuple(read((width, width)) for _ in range(depth))
        head = read((width, vocab))
    return ToyLM(vocab=vocab, width=width, depth=depth, embedding=emb, layers=layers, head=head)


def _check_tokens(model: ToyLM, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token sequence must be non-empty and 1-D")
    if ids.min() < 0 or ids.max() >= model.vocab:
        raise ValueError(f"token id out of range [0, {model.vocab})")
    return ids


def forward(model: ToyLM, tokens) -> np.ndarray:
    """Per-position logits, shape (len(tokens), vocab)."""
    ids = _check_tokens(model, tokens)
    h = model.embedding[ids] + positional_bias(ids.size, model.width)
    for w in model.layers:
        h = np.maximum(h @ w, 0.0)
    return h @ model.head


def _provider_rows(provider, ids: np.ndarray, cols: int) -> np.ndarray:
    """Rows ``ids`` of a delta provider, stacked into (len(ids), cols)."""
    if provider is None:
        return np.zeros((ids.size, cols), dtype=np.float32)
    if hasattr(provider, "rows"):
        return provider.rows(ids)
    out = np.empty((ids.size, cols), dtype=np.float32)
    for i, tok in enumerate(ids):
        out[i] = provider.row(int(tok))
    return out


def _apply_delta(h: np.ndarray, provider) -> np.ndarray:
    if hasattr(provider, "matvec_batch"):
        return provider.matvec_batch(h)
    return np.stack([provider.matvec(row) for row in h])


def forward_with_delta(base: ToyLM, providers, tokens) -> np.ndarray:
    """Forward pass with every weight matrix W replaced by W plus a delta.

    ``providers`` is one entry per weight layer (embedding, hidden layers,
    head); each entry is ``None`` (zero delta) or an object exposing
    ``matvec(x)`` / ``row(i)`` for its layer's delta matrix.
    """
    if len(providers) != base.n_weight_layers:
        raise ValueError(
            f"expected {base.n_weight_layers} delta providers, got {len(providers)}"
        )
    ids = _check_tokens(base, tokens)
    h = base.embedding[ids] + positional_bias(ids.size, base.width)
    h = h + _provider_rows(providers[0], ids, base.width)
    for w, provider in zip(base.layers, providers[1:-1]):
        z = h @ w
        if provider is not None:
            z = z + _apply_delta(h, provider)
        h = np.maximum(z, 0.0)
    logits = h @ base.head
    if providers[-1] is not None:
        logits = logits + _apply_delta(h, providers[-1])
    return logits


def _last_position_logits(base: ToyLM, providers, token: int, position: int) -> np.ndarray:
    """Logits for a single (token, position) pair; decode inner loop."""
    ids = np.asarray([token], dtype=np.int64)
    h = base.embedding[ids] + positional_bias(position + 1, base.width)[position : position + 1]
    if providers is not None:
        h = h + _provider_rows(providers[0], ids, base.width)
        for w, provider in zip(base.layers, providers[1:-1]):
            z = h @ w
            if provider is not None:
                z = z + _apply_delta(h, provider)
            h = np.maximum(z, 0.0)
        logits = h @ base.head
        if providers[-1] is not None:
            logits = logits + _apply_delta(h, providers[-1])
        return logits[0]
    for w in base.layers:
        h = np.maximum(h @ w, 0.0)
    return (h @ base.head)[0]


def greedy_decode(model: ToyLM, prompt, max_new: int, providers=None) -> list[int]:
    """Greedy continuation; ties resolve to the lowest token id.

    With no attention, the next token depends only on the last token and
    its position, so each decode step evaluates a single position.
    """
    ids = list(_check_tokens(model, prompt))
    if providers is not None and len(providers) != model.n_weight_layers:
        raise ValueError(
            f"expected {model.n_weight_layers} delta providers, got {len(providers)}"
        )
    for _ in range(max_new):
        logits = _last_position_logits(model, providers, ids[-1], len(ids) - 1)
        ids.append(int(np.argmax(logits)))
    return ids


@dataclass(frozen=True)
class ExpertSpec:
    """Recipe for a synthetic fine-tuned expert derived from a base model."""

    domain: str
    seed: int
    dense_sigma: float = 0.01
    planted_rows: int = 4
    planted_amplitude: float = 0.5
    misleading_rows: int = 0


@dataclass(frozen=True)
class RowPlan:
    """Seeded row assignments: hidden-layer index (1-based) to row indices."""

    planted: dict[int, tuple[int, ...]]
    misleading: dict[int, tuple[int, ...]]


# Misleading rows sit in hidden layers whose inputs are post-ReLU (layer
# index >= 3), so a test can kill their activation energy by making the
# feeding column of the previous layer non-positive.
_MISLEADING_MIN_LAYER = 3


def expert_row_plan(spec: ExpertSpec, width: int, depth: int) -> RowPlan:
    """Deterministic planted/misleading row choice for ``synthesize_expert``."""
    if spec.planted_rows + spec.misleading_rows > width:
        raise ValueError("planted_rows + misleading_rows must not exceed model width")
    if spec.misleading_rows > 0 and depth < _MISLEADING_MIN_LAYER:
        raise ValueError(
            f"misleading rows require depth >= {_MISLEADING_MIN_LAYER}"
        )
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0)))
    planted: dict[int, tuple[int, ...]] = {}
    misleading: dict[int, tuple[int, ...]] = {}
    for layer in range(1, depth + 1):
        n_mis = spec.misleading_rows if layer >= _MISLEADING_MIN_LAYER else 0
        picks = rng.choice(width, size=spec.planted_rows + n_mis, replace=False)
        planted[layer] = tuple(int(i) for i in np.sort(picks[: spec.planted_rows]))
        misleading[layer] = tuple(int(i) for i in np.sort(picks[spec.planted_rows :]))
    return RowPlan(planted=planted, misleading=misleading)


def synthesize_expert(base: ToyLM, spec: ExpertSpec) -> ToyLM:
    """Fine-tuned model = base + seeded deltas.

    Every weight matrix receives dense Gaussian noise of scale
    ``dense_sigma``; each hidden layer additionally receives
    ``planted_amplitude``-scale rows at the planned planted and misleading
    indices (see :func:`expert_row_plan`).
    """
    plan = expert_row_plan(spec, base.width, base.depth)
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 1)))

    def dense(shape):
        return (spec.dense_sigma * rng.normal(size=shape)).astype(np.float32)

    emb = base.embedding + dense(base.embedding.shape)
    layers = []
    for li, w in enumerate(base.layers, start=1):
        delta = dense(w.shape)
        for row in plan.planted[li] + plan.misleading[li]:
            delta[row] += (spec.planted_amplitude * rng.normal(size=w.shape[1])).astype(
                np.float32
            )
        layers.append((w + delta).astype(np.float32))
    head = base.head + dense(base.head.shape)
    return ToyLM(
        vocab=base.vocab,
        width=base.width,
        depth=base.depth,
        embedding=emb.astype(np.float32),
        layers=tuple(layers),
        head=head.astype(np.float32),
    )


def capture_layer_inputs(model: ToyLM, sequences) -> list[np.ndarray]:
    """Inputs to every weight layer over a calibration set.

    Returns one entry per weight layer.  The embedding layer consumes
    one-hot token vectors, so its entry is the flat array of token ids;
    each remaining entry is the (positions, width) activation matrix
    feeding that layer.
    """
    all_ids = []
    for seq in sequences:
        all_ids.append(_check_tokens(model, seq))
    if not all_ids:
        raise ValueError("calibration set is empty")
    inputs: list[np.ndarray] = []
    h_parts = []
    for ids in all_ids:
        h_parts.append(model.embedding[ids] + positional_bias(ids.size, model.width))
    tokens = np.concatenate(all_ids)
    inputs.append(tokens)  # embedding layer inputs are one-hot; keep ids only
    h = np.concatenate(h_parts, axis=0)
    for w in model.layers:
        inputs.append(h)
        h = np.maximum(h @ w, 0.0)
    inputs.append(h)  # head input
    return inputs


@dataclass
class QuantizedLayerState:
    """Per-layer state for step-size training.

    Holds the raw delta so the quantizer can be re-applied at the current
    step sizes each iteration; salient rows bypass quantization and stay
    fixed at their half-rounded values.
    """

    delta: np.ndarray  # (m, n) raw delta values
    salient: np.ndarray  # sorted salient row indices
    salient_rows: np.ndarray  # (k, n) half-rounded float32 values
    steps: np.ndarray  # (n,) positive float32
    cfg: quant.QuantConfig
    _nonsalient_mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mask = np.ones(self.delta.shape[0], dtype=bool)
        mask[self.salient] = False
        self._nonsalient_mask = mask

    def reconstruct(self) -> np.ndarray:
        """Live reconstruction at the current step sizes."""
        codes = quant.quantize_codes(self.delta, self.steps, self.cfg)
        approx = quant.dequantize(codes, self.steps, self.cfg)
        approx[~self._nonsalient_mask] = self.salient_rows
        return approx

    def step_gradient(self, upstream: np.ndarray) -> np.ndarray:
        """STE gradient of the reconstruction w.r.t. the step vector."""
        masked = np.where(self._nonsalient_mask[:, None], upstream, 0.0)
        return quant.ste_step_gradient(self.delta, self.steps, self.cfg, masked)


def backward_step_sizes(
    base: ToyLM,
    states: list[QuantizedLayerState],
    sequences,
    target_logits,
) -> tuple[list[np.ndarray], float]:
    """Loss and reverse-mode step-size gradients for one batch.

    The loss is the mean squared difference between the quantized model's
    logits and ``target_logits`` over every position and vocabulary entry,
    accumulated in float64.  Gradients flow through exact linear and ReLU
    adjoints, with the straight-through rule at each quantizer site.
    """
    if len(states) != base.n_weight_layers:
        raise ValueError(
            f"expected {base.n_weight_layers} layer states, got {len(states)}"
        )
    ids = np.concatenate([_check_tokens(base, seq) for seq in sequences])
    targets = np.concatenate([np.asarray(t, dtype=np.float32) for t in target_logits])
    pos = np.concatenate(
        [positional_bias(len(seq), base.width) for seq in sequences], axis=0
    )

    deltas = [st.reconstruct() for st in states]
    mats = [base.embedding + deltas[0]]
    mats += [w + d for w, d in zip(base.layers, deltas[1:-1])]
    mats.append(base.head + deltas[-1])

    # Forward with caches.
    h = mats[0][ids] + pos
    pre_acts = []
    acts = [h]
    for w in mats[1 : 1 + base.depth]:
        z = acts[-1] @ w
        pre_acts.append(z)
        acts.append(np.maximum(z, 0.0))
    logits = acts[-1] @ mats[-1]
    if logits.shape != targets.shape:
        raise ValueError(
            f"target logits shape {targets.shape} != model logits shape {logits.shape}"
        )

    diff = logits.astype(np.float64) - targets.astype(np.float64)
    loss = float((diff * diff).mean())

    grads: list[np.ndarray] = [None] * len(states)
    g_logits = (2.0 * diff / diff.size).astype(np.float32)
    grads[-1] = states[-1].step_gradient(acts[-1].T @ g_logits)
    g_h = g_logits @ mats[-1].T
    for li in range(base.depth, 0, -1):
        g_z = np.where(pre_acts[li - 1] > 0.0, g_h, 0.0)
        grads[li] = states[li].step_gradient(acts[li - 1].T @ g_z)
        g_h = g_z @ mats[li].T
    upstream_emb = np.zeros_like(states[0].delta)
    np.add.at(upstream_emb, ids, g_h)
    grads[0] = states[0].step_gradient(upstream_emb)
    return grads, loss
