"""Post-training int8 quantization with vector-wise scales and outlier decomposition.

Covered maps are the attention projections, the feed-forward projections
(shared, experts and LoRA-merged) and the tied output projection. Input
columns whose calibration magnitude reaches the threshold stay in full
precision; the rest of the product runs on int8 operands with int32
accumulation.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .lora import LoraLinear
from .model import Seq2SeqModel, collate, load_checkpoint, save_checkpoint
from .nn import FeedForward, Linear, Module, MultiHeadAttention
from .numcore import Tensor

DEFAULT_THRESHOLD = 6.0
QUANT_MANIFEST = "quant-manifest.json"
OUTPUT_PROJECTION = "decoder.output_projection"


def quantize_vectorwise(W) -> tuple[np.ndarray, np.ndarray]:
    """Per-row int8 codes and scales with ``q = round(W * scale)``, ``scale = 127 / max|row|``."""
    W = np.asarray(W, dtype=np.float64)
    if not np.all(np.isfinite(W)):
        raise ValueError("cannot quantize non-finite weights")
    if W.ndim != 2:
        raise ValueError("quantize_vectorwise expects a matrix")
    absmax = np.abs(W).max(axis=1) if W.shape[1] else np.zeros(W.shape[0])
    with np.errstate(over="ignore", divide="ignore"):
        scales = 127.0 / absmax
    # all-zero rows, and rows so tiny the scale overflows, quantize to zero
    scales = np.where(np.isfinite(scales), scales, 1.0)
    q = np.clip(np.rint(W * scales[:, None]), -127, 127).astype(np.int8)
    return q, scales


def dequantize_vectorwise(q: np.ndarray, scales: np.ndarray) -> np.ndarray:
    return q.astype(np.float64) / scales[:, None]


def outlier_columns(X, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Columns of the calibration activations whose max magnitude reaches ``threshold``."""
    X = np.asarray(X)
    if X.size == 0:
        raise ValueError("empty calibration set")
    X = X.reshape(-1, X.shape[-1])
    return np.flatnonzero(np.abs(X).max(axis=0) >= threshold)


@dataclass
class QuantizedLinear:
    """``y = x W^T + b`` with W split into int8 retained columns and float outlier columns."""

    q_weights: np.ndarray  # (m, k - n_outliers) int8
    scales: np.ndarray  # (m,)
    outlier_cols: np.ndarray  # sorted column indices
    outlier_weights: np.ndarray  # (m, n_outliers)
    in_features: int
    bias: np.ndarray | None = None
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        self.outlier_cols = np.asarray(self.outlier_cols, dtype=np.int64)
        m = self.q_weights.shape[0]
        n_out = len(self.outlier_cols)
        if self.q_weights.shape[1] + n_out != self.in_features or self.outlier_weights.shape != (m, n_out):
            raise ValueError("column partition does not match the input width")
        if n_out and (np.any(np.diff(self.outlier_cols) <= 0) or self.outlier_cols[0] < 0
                      or self.outlier_cols[-1] >= self.in_features):
            raise ValueError("outlier columns must be sorted, unique and in range")

    @property
    def out_features(self) -> int:
        return self.q_weights.shape[0]

    @property
    def retained_cols(self) -> np.ndarray:
        keep = np.ones(self.in_features, dtype=bool)
        keep[self.outlier_cols] = False
        return np.flatnonzero(keep)

    def dequantize(self) -> np.ndarray:
        W = np.zeros((self.out_features, self.in_features))
        W[:, self.retained_cols] = dequantize_vectorwise(self.q_weights, self.scales)
        W[:, self.outlier_cols] = self.outlier_weights
        return W

    def payload_bytes(self) -> int:
        return self.q_weights.nbytes + 8 * self.scales.size + 8 * self.outlier_weights.size

    @classmethod
    def from_weight(cls, W, bias=None, outlier_cols=(), threshold: float = DEFAULT_THRESHOLD) -> "QuantizedLinear":
        W = np.asarray(W, dtype=np.float64)
        cols = np.unique(np.asarray(outlier_cols, dtype=np.int64))
        keep = np.ones(W.shape[1], dtype=bool)
        keep[cols] = False
        q, scales = quantize_vectorwise(W[:, keep])
        return cls(q, scales, cols, W[:, cols].copy(), W.shape[1],
                   None if bias is None else np.asarray(bias, dtype=np.float64), threshold)


def int8_matmul(x: np.ndarray, q: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Row-quantize ``x`` and multiply by int8 ``q^T`` with integer accumulation."""
    xq, sx = quantize_vectorwise(x)
    acc = xq.astype(np.int32) @ q.T.astype(np.int32)
    return acc / (sx[:, None] * scales[None, :])


def mixed_matmul(x, qlin: QuantizedLinear) -> np.ndarray:
    """``x W^T (+ b)``: int8 path on retained columns plus full precision on outliers."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != qlin.in_features:
        raise ValueError(f"input width {x.shape[-1]} does not match layer width {qlin.in_features}")
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    out = np.zeros((x2.shape[0], qlin.out_features))
    if qlin.q_weights.shape[1]:
        out += int8_matmul(x2[:, qlin.retained_cols], qlin.q_weights, qlin.scales)
    if len(qlin.outlier_cols):
        out += x2[:, qlin.outlier_cols] @ qlin.outlier_weights.T
    if qlin.bias is not None:
        out += qlin.bias
    return out.reshape(lead + (qlin.out_features,))


class QuantLinearModule(Module):
    """Inference-only drop-in for a Linear."""

    def __init__(self, qlin: QuantizedLinear):
        super().__init__()
        self.qlin = qlin

    def __call__(self, x: Tensor) -> Tensor:
        return Tensor(mixed_matmul(x.data, self.qlin).astype(x.dtype))


class _Recorder(Module):
    """Wraps a Linear and tracks the per-column max |input| it sees."""

    def __init__(self, inner: Linear):
        super().__init__()
        self.inner = inner
        self.colmax = np.zeros(inner.n_in)

    def __call__(self, x: Tensor) -> Tensor:
        self.colmax = np.maximum(self.colmax, np.abs(x.data).reshape(-1, x.shape[-1]).max(axis=0))
        return self.inner(x)


def covered_linears(model: Module) -> list[tuple[str, Module, str, Linear]]:
    """(full name, parent, attribute, Linear) for every attention and feed-forward projection."""
    out = []
    for name, mod in model.named_modules():
        if isinstance(mod, MultiHeadAttention):
            attrs = ("query", "key", "value", "out")
        elif isinstance(mod, FeedForward):
            attrs = ("fc1", "fc2")
        else:
            continue
        for a in attrs:
            child = mod._modules.get(a)
            if isinstance(child, Linear):
                out.append((f"{name}.{a}" if name else a, mod, a, child))
    return out


def _weight_of(lin: Linear) -> np.ndarray:
    return lin.merged_weight() if isinstance(lin, LoraLinear) else lin.weight.data


def calibrate(model: Seq2SeqModel, batches) -> dict[str, np.ndarray]:
    """Per-column max input magnitude for each covered map over ``batches``."""
    slots = covered_linears(model)
    recs = {}
    for name, parent, attr, lin in slots:
        rec = _Recorder(lin)
        setattr(parent, attr, rec)
        recs[name] = rec
    out_rec = np.zeros(model.config.width)
    try:
        with nc.no_grad():
            for batch in batches:
                ctx = model._ctx(None, batch.langs)
                memory, src_mask = model.encode_batch(batch.frames, batch.frame_lens, ctx)
                h = model.decode_hidden(memory, src_mask, batch.tokens, ctx).data
                out_rec = np.maximum(out_rec, np.abs(h).reshape(-1, h.shape[-1]).max(axis=0))
    finally:
        for name, parent, attr, lin in slots:
            setattr(parent, attr, lin)
    stats = {name: rec.colmax for name, rec in recs.items()}
    stats[OUTPUT_PROJECTION] = out_rec
    return stats


def del_output_projection(model) -> None:
    model.decoder._modules.pop("output_projection", None)
    model.decoder.__dict__.pop("output_projection", None)


def calibration_batches(model: Seq2SeqModel, manifest, per_language: int = 64, batch_size: int = 16):
    batches = []
    for lang, sub in sorted(manifest.by_language().items()):
        if model.ff_variant == "clsr" and lang not in model.expert_languages:
            continue
        exs = list(sub)[:per_language]
        batches += [collate(exs[k : k + batch_size], model.vocab) for k in range(0, len(exs), batch_size)]
    return batches


def quantize_model(model: Seq2SeqModel, calibration=None, threshold: float = DEFAULT_THRESHOLD) -> Seq2SeqModel:
    """Return a quantized deep copy; ``model`` itself is left untouched.

    ``calibration`` is a manifest (64 examples per language are used) or a
    list of batches. Without it no column is treated as an outlier.
    """
    qmodel = copy.deepcopy(model)
    del_output_projection(qmodel)
    if calibration is None:
        stats = {}
    else:
        batches = calibration if isinstance(calibration, list) else calibration_batches(qmodel, calibration)
        stats = calibrate(qmodel, batches)
    for name, parent, attr, lin in covered_linears(qmodel):
        cols = np.flatnonzero(stats[name] >= threshold) if name in stats else ()
        bias = None if lin.bias is None else lin.bias.data
        setattr(parent, attr, QuantLinearModule(QuantizedLinear.from_weight(_weight_of(lin), bias, cols, threshold)))
    emb = qmodel.decoder.token_embedding.data
    cols = np.flatnonzero(stats[OUTPUT_PROJECTION] >= threshold) if OUTPUT_PROJECTION in stats else ()
    qmodel.decoder.output_projection = QuantLinearModule(QuantizedLinear.from_weight(emb, None, cols, threshold))
    qmodel.quant_threshold = threshold
    return qmodel


def quantized_layers(model: Module) -> dict[str, QuantizedLinear]:
    return {name: m.qlin for name, m in model.named_modules() if isinstance(m, QuantLinearModule)}


def payload_sizes(qmodel: Module) -> tuple[int, int]:
    """(quantized payload bytes, float32 bytes the same weights would take)."""
    layers = quantized_layers(qmodel)
    q = sum(ql.payload_bytes() for ql in layers.values())
    f = sum(4 * ql.out_features * ql.in_features for ql in layers.values())
    return q, f


def save_quantized(qmodel: Seq2SeqModel, directory: str | os.PathLike, metadata: dict | None = None) -> Path:
    """Checkpoint of the unquantized parameters plus int8 payloads and ``quant-manifest.json``."""
    root = Path(directory)
    save_checkpoint(qmodel, root, metadata)
    qdir = root / "quant"
    qdir.mkdir(parents=True, exist_ok=True)
    layers = {}
    for i, (name, ql) in enumerate(sorted(quantized_layers(qmodel).items())):
        stem = f"q{i:04d}"
        (qdir / f"{stem}.int8").write_bytes(np.ascontiguousarray(ql.q_weights).tobytes())
        nc.save_tensor(qdir / f"{stem}.scales.bin", ql.scales)
        nc.save_tensor(qdir / f"{stem}.outliers.bin", ql.outlier_weights)
        entry = {
            "shape": [ql.out_features, ql.in_features],
            "outlier_cols": [int(c) for c in ql.outlier_cols],
            "payload": f"quant/{stem}.int8",
            "scales": f"quant/{stem}.scales.bin",
            "outlier_weights": f"quant/{stem}.outliers.bin",
        }
        if ql.bias is not None:
            nc.save_tensor(qdir / f"{stem}.bias.bin", ql.bias)
            entry["bias"] = f"quant/{stem}.bias.bin"
        layers[name] = entry
    manifest = {"threshold": getattr(qmodel, "quant_threshold", DEFAULT_THRESHOLD), "layers": layers}
    (root / QUANT_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_quantized(directory: str | os.PathLike) -> Seq2SeqModel:
    root = Path(directory)
    manifest = json.loads((root / QUANT_MANIFEST).read_text())
    model = load_checkpoint(root, strict=False)
    parents = {name: (parent, attr) for name, parent, attr, _ in covered_linears(model)}
    for name, e in manifest["layers"].items():
        m, k = e["shape"]
        cols = np.asarray(e["outlier_cols"], dtype=np.int64)
        q = np.frombuffer((root / e["payload"]).read_bytes(), dtype=np.int8).reshape(m, k - len(cols)).copy()
        scales = nc.load_tensor(root / e["scales"])
        ow = nc.load_tensor(root / e["outlier_weights"]).astype(np.float64)
        bias = nc.load_tensor(root / e["bias"]).astype(np.float64) if "bias" in e else None
        ql = QuantizedLinear(q, scales, cols, ow, k, bias, manifest["threshold"])
        if name == OUTPUT_PROJECTION:
            model.decoder.output_projection = QuantLinearModule(ql)
        else:
            parent, attr = parents[name]
            setattr(parent, attr, QuantLinearModule(ql))
    model.quant_threshold = manifest["threshold"]
    return model
