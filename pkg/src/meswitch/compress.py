"""End-to-end salient-aware delta compression.

Pipeline per layer: quantize the full delta once, score input channels
against that quantization, keep the top-k rows at half precision, then
re-initialize step sizes from the remaining rows alone and re-quantize
them.  Whole-expert compression optionally refines the step sizes by
distilling the fine-tuned model's logits on a calibration set.

Artifacts serialize to a single little-endian container:

    magic "MESW" | version u16 | manifest (u32-length-prefixed UTF-8 JSON)
    then one block per layer:
    m u32 | n u32 | bits u8 | k u32 | salient indices k*u32 (ascending)
    | salient rows k*n*u16 (binary16 bits) | steps n*f32
    | packed codes (u32-length-prefixed bytes)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import quant, salient, toylm
from .errors import (
    BadMagicError,
    DistillDivergenceError,
    TruncatedArtifactError,
    UnsupportedVersionError,
)
from .numerics import half_bits, half_from_bits

__all__ = [
    "MAGIC",
    "VERSION",
    "CompressionConfig",
    "DistillConfig",
    "CompressedDelta",
    "LowRankDelta",
    "RescaledDelta",
    "ArtifactManifest",
    "ExpertArtifact",
    "SizeBreakdown",
    "extract_delta",
    "compress_layer",
    "lora_truncate",
    "rescale_quantize",
    "distill_step_sizes",
    "compress_expert",
    "serialize_artifact",
    "deserialize_artifact",
    "save_artifact",
    "load_artifact",
    "compressed_size_bytes",
    "layer_block_nbytes",
]

MAGIC = b"MESW"
VERSION = 1

METRICS = ("reconstruction", "magnitude", "wanda", "random")


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 1
    lr: float = 1e-5
    batch_size: int = 4


@dataclass(frozen=True)
class CompressionConfig:
    bits: int = 2
    salient_k: int = 8
    metric: str = "reconstruction"
    distill: DistillConfig = field(default_factory=DistillConfig)
    seed: int = 0  # used by the random selection metric only

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        quant.QuantConfig(bits=self.bits)  # validates bit width


@dataclass(frozen=True)
class CompressedDelta:
    """One layer's compressed delta: packed codes, steps and salient rows."""

    salient: salient.SalientSet
    salient_rows: np.ndarray  # (k, n) float16
    steps: np.ndarray  # (n,) float32
    packed: quant.PackedCodes

    @property
    def rows(self) -> int:
        return self.packed.rows

    @property
    def cols(self) -> int:
        return self.packed.cols

    @property
    def bits(self) -> int:
        return self.packed.bits

    def salient_values(self) -> np.ndarray:
        """Salient rows widened to float32."""
        return self.salient_rows.astype(np.float32)

    def codes(self) -> np.ndarray:
        return quant.unpack_codes(self.packed)

    def reconstruct(self) -> np.ndarray:
        """Dense float32 reconstruction of the approximated delta."""
        cfg = quant.QuantConfig(bits=self.bits)
        out = quant.dequantize(self.codes(), self.steps, cfg)
        if self.salient.k:
            out[self.salient.indices] = self.salient_values()
        return out


@dataclass(frozen=True)
class LowRankDelta:
    """Rank-r factorization approximating a delta as a @ b."""

    a: np.ndarray  # (m, r)
    b: np.ndarray  # (r, n)
    rank: int

    def reconstruct(self) -> np.ndarray:
        return (self.a @ self.b).astype(np.float32)

    def nbytes(self) -> int:
        """Storage at half precision per factor entry."""
        return 2 * (self.a.size + self.b.size)


@dataclass(frozen=True)
class RescaledDelta:
    """Plain (k=0) quantization after per-row rescaling by ``row_scale``."""

    delta: CompressedDelta
    row_scale: np.ndarray
    alpha: float

    def reconstruct(self) -> np.ndarray:
        return (self.delta.reconstruct() / self.row_scale[:, None]).astype(np.float32)


def extract_delta(w_ft: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Delta weights: fine-tuned minus base, elementwise."""
    w_ft = np.asarray(w_ft, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if w_ft.shape != w.shape:
        raise ValueError(f"shape mismatch: {w_ft.shape} vs {w.shape}")
    return w_ft - w


def _score_channels(
    delta: np.ndarray,
    approx: np.ndarray,
    stats: salient.ActivationStats | None,
    cfg: CompressionConfig,
) -> np.ndarray:
    if cfg.metric == "magnitude":
        return salient.score_magnitude(delta)
    if cfg.metric == "random":
        return salient.score_random(delta.shape[0], cfg.seed)
    if stats is None:
        raise ValueError(f"metric {cfg.metric!r} requires activation stats")
    if cfg.metric == "wanda":
        return salient.score_wanda(delta, stats)
    return salient.score_reconstruction(delta, approx, stats)


def compress_layer(
    delta: np.ndarray,
    stats: salient.ActivationStats | None,
    cfg: CompressionConfig,
) -> CompressedDelta:
    """Compress one layer's delta matrix.

    Salient rows keep zeroed codes inside the packed matrix so indexing
    stays trivial; step sizes are re-initialized from the non-salient rows
    after selection, which tightens the quantization grid.
    """
    delta = np.asarray(delta, dtype=np.float32)
    if delta.ndim != 2:
        raise ValueError(f"expected a 2-D delta, got shape {delta.shape}")
    m, n = delta.shape
    if cfg.salient_k > m:
        raise ValueError(f"salient_k={cfg.salient_k} exceeds {m} input channels")
    qcfg = quant.QuantConfig(bits=cfg.bits)

    init0 = quant.init_step_sizes(delta, qcfg)
    approx0 = quant.dequantize(quant.quantize_codes(delta, init0.steps, qcfg), init0.steps, qcfg)
    scores = _score_channels(delta, approx0, stats, cfg)
    sal = salient.top_k(scores, cfg.salient_k)

    mask = np.ones(m, dtype=bool)
    mask[sal.indices] = False
    steps = quant.init_step_sizes(delta[mask], qcfg).steps
    codes = np.zeros((m, n), dtype=np.int8)
    if mask.any():
        codes[mask] = quant.quantize_codes(delta[mask], steps, qcfg)
    with np.errstate(over="ignore"):
        sal_rows = delta[sal.indices].astype(np.float16)
    return CompressedDelta(
        salient=sal,
        salient_rows=sal_rows,
        steps=steps,
        packed=quant.pack_codes(codes, qcfg),
    )


def lora_truncate(delta: np.ndarray, rank: int) -> LowRankDelta:
    """Rank-r SVD truncation with the singular values split across factors."""
    from .numerics import svd

    delta = np.asarray(delta, dtype=np.float32)
    m, n = delta.shape
    if not 1 <= rank <= min(m, n):
        raise ValueError(f"rank must be in [1, {min(m, n)}], got {rank}")
    u, s, vt = svd(delta)
    root = np.sqrt(s[:rank])
    a = (u[:, :rank] * root[None, :]).astype(np.float32)
    b = (root[:, None] * vt[:rank]).astype(np.float32)
    return LowRankDelta(a=a, b=b, rank=rank)


def rescale_quantize(
    delta: np.ndarray,
    stats: salient.ActivationStats,
    bits: int,
    grid: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0),
) -> RescaledDelta:
    """Activation-aware per-row rescaling before plain (k=0) quantization.

    For each exponent in ``grid``, rows are scaled by the normalized
    activation energy raised to that exponent, quantized, and scored by
    activation-weighted reconstruction error; the best exponent wins.
    Exponent 0 is the identity, so the result is never worse than plain
    quantization under the same score.
    """
    delta = np.asarray(delta, dtype=np.float32)
    qcfg = quant.QuantConfig(bits=bits)
    energy = stats.energy.astype(np.float64)
    if energy.shape[0] != delta.shape[0]:
        raise ValueError("stats length must match delta rows")

    best = None
    for alpha in grid:
        raw = np.where(energy > 0, energy ** (alpha / 2.0), 1.0)
        g = (raw / raw.mean()).astype(np.float32)
        scaled = delta * g[:, None]
        steps = quant.init_step_sizes(scaled, qcfg).steps
        codes = quant.quantize_codes(scaled, steps, qcfg)
        approx = quant.dequantize(codes, steps, qcfg) / g[:, None]
        err = ((delta.astype(np.float64) - approx.astype(np.float64)) ** 2).sum(axis=1)
        score = float((energy * err).sum())
        if best is None or score < best[0]:
            best = (score, alpha, g, steps, codes)

    _, alpha, g, steps, codes = best
    compressed = CompressedDelta(
        salient=salient.top_k(np.zeros(delta.shape[0]), 0),
        salient_rows=np.zeros((0, delta.shape[1]), dtype=np.float16),
        steps=steps,
        packed=quant.pack_codes(codes, qcfg),
    )
    return RescaledDelta(delta=compressed, row_scale=g, alpha=alpha)


class _Adam:
    """AdamW-rule optimizer over a list of step vectors (weight decay 0)."""

    def __init__(self, sizes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s, dtype=np.float64) for s in sizes]
        self.v = [np.zeros(s, dtype=np.float64) for s in sizes]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            g = g.astype(np.float64)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            out.append(
                (p.astype(np.float64) - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                    np.float32
                )
            )
        return out


STEP_FLOOR = 1e-8


@dataclass
class DistillResult:
    layers: list[CompressedDelta]
    initial_loss: float
    final_loss: float
    batch_losses: list[float]


def _layer_states(
    base: toylm.ToyLM,
    finetuned: toylm.ToyLM,
    artifacts: list[CompressedDelta],
) -> list[toylm.QuantizedLayerState]:
    states = []
    for w_base, w_ft, art in zip(
        base.weight_matrices(), finetuned.weight_matrices(), artifacts
    ):
        states.append(
            toylm.QuantizedLayerState(
                delta=extract_delta(w_ft, w_base),
                salient=art.salient.indices,
                salient_rows=art.salient_values(),
                steps=art.steps.copy(),
                cfg=quant.QuantConfig(bits=art.bits),
            )
        )
    return states


def _repack(art: CompressedDelta, state: toylm.QuantizedLayerState) -> CompressedDelta:
    """New artifact with codes re-derived from the trained step sizes."""
    qcfg = state.cfg
    m = state.delta.shape[0]
    mask = np.ones(m, dtype=bool)
    mask[state.salient] = False
    codes = np.zeros(state.delta.shape, dtype=np.int8)
    if mask.any():
        codes[mask] = quant.quantize_codes(state.delta[mask], state.steps, qcfg)
    return replace(art, steps=state.steps.copy(), packed=quant.pack_codes(codes, qcfg))


def distill_step_sizes(
    base: toylm.ToyLM,
    finetuned: toylm.ToyLM,
    artifacts: list[CompressedDelta],
    sequences,
    cfg: DistillConfig,
) -> DistillResult:
    """Train step sizes to match the fine-tuned model's logits.

    Only the step vectors move; delta values, salient rows and the base
    stay frozen.  Gradients chain the straight-through quantizer rule
    through the toy model's backward pass; updates follow the AdamW rule
    and steps are clamped positive.  Aborts if any batch loss exceeds ten
    times the initial calibration loss.
    """
    if not sequences:
        raise ValueError("calibration set is empty")
    states = _layer_states(base, finetuned, artifacts)
    targets = [toylm.forward(finetuned, seq) for seq in sequences]

    _, initial = toylm.backward_step_sizes(base, states, sequences, targets)
    optim = _Adam([st.steps.shape[0] for st in states], lr=cfg.lr)
    batch_losses: list[float] = []
    for _ in range(cfg.epochs):
        for start in range(0, len(sequences), cfg.batch_size):
            batch = sequences[start : start + cfg.batch_size]
            batch_targets = targets[start : start + cfg.batch_size]
            grads, loss = toylm.backward_step_sizes(base, states, batch, batch_targets)
            batch_losses.append(loss)
            if initial > 0 and loss > 10.0 * initial:
                raise DistillDivergenceError(
                    f"batch loss {loss:.6g} exceeded 10x initial loss {initial:.6g}"
                )
            new_steps = optim.step([st.steps for st in states], grads)
            for st, s in zip(states, new_steps):
                st.steps = np.maximum(s, STEP_FLOOR).astype(np.float32)

    _, final = toylm.backward_step_sizes(base, states, sequences, targets)
    layers = [_repack(art, st) for art, st in zip(artifacts, states)]
    return DistillResult(
        layers=layers, initial_loss=initial, final_loss=final, batch_losses=batch_losses
    )


@dataclass(frozen=True)
class ArtifactManifest:
    model_id: str
    domain: str
    base_digest: str
    layer_count: int

    def to_json(self) -> bytes:
        payload = {
            "model_id": self.model_id,
            "domain": self.domain,
            "base_digest": self.base_digest,
            "layer_count": self.layer_count,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_json(cls, raw: bytes) -> "ArtifactManifest":
        data = json.loads(raw.decode("utf-8"))
        return cls(
            model_id=data["model_id"],
            domain=data["domain"],
            base_digest=data["base_digest"],
            layer_count=int(data["layer_count"]),
        )


@dataclass(frozen=True)
class ExpertArtifact:
    manifest: ArtifactManifest
    layers: list[CompressedDelta]

    def __post_init__(self):
        if len(self.layers) != self.manifest.layer_count:
            raise ValueError("manifest layer_count does not match layer blocks")


@dataclass(frozen=True)
class CompressResult:
    artifact: ExpertArtifact
    initial_loss: float | None = None
    final_loss: float | None = None
    batch_losses: list[float] | None = None


def compress_expert(
    base: toylm.ToyLM,
    finetuned: toylm.ToyLM,
    sequences,
    cfg: CompressionConfig,
    model_id: str,
    domain: str,
) -> CompressResult:
    """Full pipeline over every weight layer, with optional distillation.

    Activation statistics come from the fine-tuned model on the calibration
    set, matching the model whose outputs the compressed expert must
    reproduce.
    """
    stats = salient.collect_all_activation_stats(finetuned, sequences)
    deltas = [
        extract_delta(w_ft, w)
        for w_ft, w in zip(finetuned.weight_matrices(), base.weight_matrices())
    ]
    layers = [compress_layer(d, st, cfg) for d, st in zip(deltas, stats)]

    initial = final = None
    batch_losses = None
    if cfg.distill.epochs > 0:
        result = distill_step_sizes(base, finetuned, layers, sequences, cfg.distill)
        layers = result.layers
        initial, final = result.initial_loss, result.final_loss
        batch_losses = result.batch_losses

    manifest = ArtifactManifest(
        model_id=model_id,
        domain=domain,
        base_digest=toylm.base_digest(base),
        layer_count=len(layers),
    )
    return CompressResult(
        artifact=ExpertArtifact(manifest=manifest, layers=layers),
        initial_loss=initial,
        final_loss=final,
        batch_losses=batch_losses,
    )


def serialize_artifact(artifact: ExpertArtifact) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    manifest = artifact.manifest.to_json()
    out += struct.pack("<I", len(manifest))
    out += manifest
    for layer in artifact.layers:
        out += struct.pack("<IIBI", layer.rows, layer.cols, layer.bits, layer.salient.k)
        out += layer.salient.indices.astype("<u4").tobytes()
        out += layer.salient_rows.view(np.uint16).astype("<u2").tobytes()
        out += layer.steps.astype("<f4").tobytes()
        out += struct.pack("<I", len(layer.packed.data))
        out += layer.packed.data
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedArtifactError(
                f"need {n} bytes at offset {self.pos}, only {len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk


def deserialize_artifact(data: bytes) -> ExpertArtifact:
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", r.take(2))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported artifact version {version}")
    (mlen,) = struct.unpack("<I", r.take(4))
    manifest = ArtifactManifest.from_json(r.take(mlen))

    layers = []
    for _ in range(manifest.layer_count):
        m, n, bits, k = struct.unpack("<IIBI", r.take(13))
        idx = np.frombuffer(r.take(4 * k), dtype="<u4").astype(np.int64)
        sal_rows = (
            np.frombuffer(r.take(2 * k * n), dtype="<u2").reshape(k, n).view(np.float16).copy()
        )
        steps = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32)
        (plen,) = struct.unpack("<I", r.take(4))
        expected = quant.packed_nbytes(m, n, bits)
        if plen != expected:
            raise TruncatedArtifactError(
                f"packed block declares {plen} bytes, format requires {expected}"
            )
        packed = quant.PackedCodes(bits=bits, rows=m, cols=n, data=r.take(plen))
        layers.append(
            CompressedDelta(
                salient=salient.SalientSet(indices=idx, k=k),
                salient_rows=sal_rows,
                steps=steps,
                packed=packed,
            )
        )
    if r.pos != len(data):
        raise TruncatedArtifactError(f"{len(data) - r.pos} trailing bytes after last block")
    return ExpertArtifact(manifest=manifest, layers=layers)


def save_artifact(artifact: ExpertArtifact, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_artifact(artifact))


def load_artifact(path) -> ExpertArtifact:
    with open(path, "rb") as f:
        return deserialize_artifact(f.read())


LAYER_HEADER_BYTES = 13  # m u32 + n u32 + bits u8 + k u32
PACKED_PREFIX_BYTES = 4


@dataclass(frozen=True)
class LayerSizes:
    codes: int
    salient_rows: int
    steps: int
    indices: int
    header: int

    @property
    def total(self) -> int:
        return self.codes + self.salient_rows + self.steps + self.indices + self.header


@dataclass(frozen=True)
class SizeBreakdown:
    file_header: int
    layers: list[LayerSizes]

    @property
    def total(self) -> int:
        return self.file_header + sum(layer.total for layer in self.layers)


def layer_block_nbytes(m: int, n: int, bits: int, k: int) -> LayerSizes:
    """Exact on-disk footprint of one layer block."""
    return LayerSizes(
        codes=quant.packed_nbytes(m, n, bits),
        salient_rows=2 * k * n,
        steps=4 * n,
        indices=4 * k,
        header=LAYER_HEADER_BYTES + PACKED_PREFIX_BYTES,
    )


def compressed_size_bytes(artifact: ExpertArtifact) -> SizeBreakdown:
    """Exact serialized size with a per-layer codes/salient/steps breakdown."""
    file_header = len(MAGIC) + 2 + 4 + len(artifact.manifest.to_json())
    layers = [
        layer_block_nbytes(layer.rows, layer.cols, layer.bits, layer.salient.k)
        for layer in artifact.layers
    ]
    return SizeBreakdown(file_header=file_header, layers=layers)
