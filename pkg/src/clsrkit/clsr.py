"""Conditional language-specific routing (CLSR) feed-forward layers.

Each layer keeps the frozen shared feed-forward of the backbone and adds,
per language, an expert copy of it plus a small gate network that decides
token by token which path to use:

    out = g * expert_lang(z) + (1 - g) * shared(z)

Training gates are soft, ``sigmoid(G(z) + alpha(t) * noise)``; inference
gates are hard, ``g = 1 iff G(z) >= 0``. ``G(z) = relu(z W1 + w2) . w_out + b_out``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .nn import FeedForward, Linear, Module, ModuleDict
from .numcore import Tensor


def gate_width(dim: int) -> int:
    return max(8, dim // 16)


@dataclass
class GateSchedule:
    """Noise scale that grows linearly from 0 to ``alpha_max`` over training."""

    alpha_max: float = 1.0
    total_steps: int = 1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")

    def alpha(self, step: int) -> float:
        return self.alpha_max * min(step, self.total_steps) / self.total_steps


@dataclass
class RouteContext:
    """Per-forward routing state shared by every CLSR layer of a model.

    ``records`` collects ``(layer_name, gate values (B, T), counted mask)``
    for the budget loss and gate statistics; skip-drawn and non-counted
    tokens are already removed from the mask.
    """

    lang: str | None = None
    train: bool = False
    step: int = 0
    schedule: GateSchedule | None = None
    rng: np.random.Generator | None = None
    skip_prob: float = 0.0
    token_mask: np.ndarray | None = None
    layer_name: str = ""
    force_gate: float | None = None
    records: list = field(default_factory=list)


class Gate(Module):
    """Two-layer bottleneck producing one routing logit per token."""

    def __init__(self, dim: int, width: int, rng: np.random.Generator):
        super().__init__()
        self.w1 = Linear(dim, width, rng)
        self.out = Linear(width, 1, rng)
        self.out.weight.data[...] = 0.0

    def logits(self, z: Tensor) -> Tensor:
        h = self.out(nc.relu(self.w1(z)))
        return nc.reshape(h, h.shape[:-1])


class ClsrLayer(FeedForward):
    """Shared feed-forward (``fc1``/``fc2``) plus per-language experts and gates.

    The shared weights keep the plain feed-forward parameter names, so a
    backbone checkpoint loads into a CLSR model unchanged.
    """

    def __init__(self, shared: FeedForward, languages, rng: np.random.Generator, gate_dim: int | None = None):
        Module.__init__(self)
        self.fc1 = shared.fc1
        self.fc2 = shared.fc2
        self.experts = ModuleDict()
        self.gates = ModuleDict()
        self.gate_dim = gate_dim or gate_width(self.dim)
        init_experts_from_shared(self, languages, rng)
        for p in (self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias):
            p.freeze()

    @property
    def dim(self) -> int:
        return self.fc1.n_in

    @property
    def languages(self) -> list[str]:
        return list(self.experts.keys())

    def shared(self, z: Tensor) -> Tensor:
        return FeedForward.__call__(self, z)

    def expert(self, lang: str, z: Tensor) -> Tensor:
        return self.experts[lang](z)

    def _check(self, lang) -> None:
        if lang not in self.experts:
            raise KeyError(f"language {lang!r} has no expert in this layer")

    def gate_logits(self, z: Tensor, lang: str) -> Tensor:
        self._check(lang)
        return self.gates[lang].logits(z)

    def __call__(self, z: Tensor, ctx: RouteContext | None = None) -> Tensor:
        if ctx is None or ctx.lang is None:
            raise ValueError("a CLSR layer needs a RouteContext naming the language")
        return clsr_forward(self, z, ctx)


def gate_forward(layer: ClsrLayer, z: Tensor, lang: str, ctx: RouteContext) -> Tensor:
    """Gate values (B, T): soft with growing noise in training, 0/1 at inference."""
    logit = layer.gate_logits(z, lang)
    if not ctx.train:
        return nc.Tensor((logit.data >= 0).astype(logit.dtype), dtype=logit.dtype)
    alpha = ctx.schedule.alpha(ctx.step) if ctx.schedule is not None else 0.0
    if alpha > 0:
        if ctx.rng is None:
            raise ValueError("training-mode gates with noise need an rng")
        noise = ctx.rng.standard_normal(logit.shape).astype(logit.dtype)
        logit = logit + nc.Tensor(alpha * noise, dtype=logit.dtype)
    return nc.sigmoid(logit)


def clsr_forward(layer: ClsrLayer, z: Tensor, ctx: RouteContext) -> Tensor:
    lang = ctx.lang
    layer._check(lang)
    shared = layer.shared(z)
    expert = layer.expert(lang, z)
    batch_shape = z.shape[:-1]
    mask = np.ones(batch_shape, dtype=bool) if ctx.token_mask is None else ctx.token_mask.astype(bool)

    if ctx.force_gate is not None:
        g = nc.Tensor(np.full(batch_shape, ctx.force_gate), dtype=z.dtype)
    else:
        g = gate_forward(layer, z, lang, ctx)
    if ctx.train and ctx.skip_prob > 0:
        skip = ctx.rng.random(batch_shape) < ctx.skip_prob
        g = nc.masked_fill(g, skip, 0.0)
        mask = mask & ~skip
    ctx.records.append((ctx.layer_name, g, mask))

    if not ctx.train and ctx.force_gate is None:
        # hard gates select a path outright
        sel = (g.data > 0.5)[..., None]
        return nc.where(sel, expert, shared)
    g3 = nc.reshape(g, batch_shape + (1,))
    return g3 * expert + (1.0 - g3) * shared


def init_experts_from_shared(layer: ClsrLayer, languages, rng: np.random.Generator) -> None:
    """Give each language an expert copied from the shared weights and a fresh gate."""
    for lang in languages:
        expert = FeedForward.__new__(FeedForward)
        Module.__init__(expert)
        expert.fc1 = _copy_linear(layer.fc1)
        expert.fc2 = _copy_linear(layer.fc2)
        layer.experts[lang] = expert
        layer.gates[lang] = Gate(layer.dim, layer.gate_dim, rng)


def _copy_linear(lin: Linear) -> Linear:
    out = copy.deepcopy(lin)
    for p in out.parameters():
        p.unfreeze()
    return out


def gate_budget_loss(records, budget: float) -> Tensor:
    """| sum of counted gate values / number of counted (token, layer) slots - b |.

    ``records`` is a list of ``(name, g, mask)`` from :class:`RouteContext`;
    masked-out tokens (padding, decoder prefix, skip-drawn) count in
    neither numerator nor denominator.
    """
    if not 0.0 <= budget <= 1.0:
        raise ValueError("budget must lie in [0, 1]")
    if not records:
        raise ValueError("gate_budget_loss: empty batch (no gate records)")
    total = None
    count = 0
    for _, g, mask in records:
        m = mask.astype(g.dtype)
        part = nc.sum(g * nc.Tensor(m, dtype=g.dtype))
        total = part if total is None else total + part
        count += int(mask.sum())
    if count == 0:
        raise ValueError("gate_budget_loss: every gate is skipped or masked")
    return nc.abs(total * (1.0 / count) - budget)


def gate_usage(records) -> float:
    num = sum(float((g.data * mask).sum()) for _, g, mask in records)
    den = sum(int(mask.sum()) for _, _, mask in records)
    return num / den if den else float("nan")


@dataclass
class GateStats:
    """LS-routed token counts per (language, domain, layer)."""

    ls_counts: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)

    def add(self, lang: str, domain: str, layer: str, ls: int, total: int) -> None:
        key = (lang, domain, layer)
        self.ls_counts[key] = self.ls_counts.get(key, 0) + ls
        self.totals[key] = self.totals.get(key, 0) + total

    def ratio(self, lang: str, domain: str, layer: str | None = None) -> float:
        keys = [k for k in self.totals if k[0] == lang and k[1] == domain and (layer is None or k[2] == layer)]
        tot = sum(self.totals[k] for k in keys)
        return sum(self.ls_counts[k] for k in keys) / tot if tot else float("nan")

    def rows(self) -> list[dict]:
        out = []
        for key in sorted(self.totals):
            lang, domain, layer = key
            tot = self.totals[key]
            out.append(
                {
                    "lang": lang,
                    "domain": domain,
                    "layer": layer,
                    "ls_tokens": self.ls_counts[key],
                    "total_tokens": tot,
                    "ratio": self.ls_counts[key] / tot if tot else float("nan"),
                }
            )
        return out


def collect_gate_stats(model, dataset, lang: str, batch_size: int = 32, stats: GateStats | None = None) -> GateStats:
    """Hard-gate LS routing counts of ``lang`` on ``dataset``, per domain and layer.

    Decoder gates are read under teacher forcing on the reference text;
    padding and the forced prefix are not counted.
    """
    from .model import collate

    stats = stats if stats is not None else GateStats()
    exs = [e for e in dataset if e.lang == lang]
    by_domain: dict[str, list] = {}
    for e in exs:
        by_domain.setdefault(e.domain, []).append(e)
    with nc.no_grad():
        for domain, group in sorted(by_domain.items()):
            for k in range(0, len(group), batch_size):
                ctx = RouteContext(lang=lang)
                model.forward(collate(group[k : k + batch_size], model.vocab), ctx)
                for layer, g, mask in ctx.records:
                    stats.add(lang, domain, layer, int((g.data * mask).sum()), int(mask.sum()))
    return stats


def clsr_layers(model: Module) -> dict[str, ClsrLayer]:
    return {name: m for name, m in model.named_modules() if isinstance(m, ClsrLayer)}


def expert_parameter_names(model: Module, lang: str) -> list[str]:
    tags = (f".experts.{lang}.", f".gates.{lang}.")
    return [n for n, _ in model.named_parameters() if any(t in n for t in tags)]


def per_language_overhead(dim: int, hidden: int, gate_dim: int | None = None) -> int:
    """Parameters one language adds to one CLSR slot: an FF copy plus its gate."""
    gd = gate_dim or gate_width(dim)
    ff = dim * hidden + hidden + hidden * dim + dim
    gate = dim * gd + gd + gd + 1
    return ff + gate


def save_expert_bundle(model, lang: str, directory: str | os.PathLike) -> Path:
    """Write ``expert-<lang>/`` holding only that language's experts and gates."""
    from .numcore import save_tensor

    root = Path(directory) / f"expert-{lang}"
    root.mkdir(parents=True, exist_ok=True)
    params = dict(model.named_parameters())
    names = expert_parameter_names(model, lang)
    if not names:
        raise KeyError(f"model has no expert parameters for {lang!r}")
    files = {}
    for i, name in enumerate(names):
        fname = f"t{i:04d}.bin"
        save_tensor(root / fname, params[name])
        files[name] = fname
    manifest = {"lang": lang, "config_hash": model.config.hash(), "tensors": files}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_expert_bundle(model, path: str | os.PathLike) -> str:
    """Load an expert bundle onto a CLSR model with a matching config hash."""
    from .numcore import load_tensor

    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest["config_hash"] != model.config.hash():
        raise ValueError(f"expert bundle {root} was built for a different model configuration")
    lang = manifest["lang"]
    params = dict(model.named_parameters())
    for name, fname in manifest["tensors"].items():
        if name not in params:
            raise KeyError(f"bundle tensor {name} has no slot in the model (language registered?)")
        arr = load_tensor(root / fname)
        if arr.shape != params[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        params[name].data = arr.astype(params[name].dtype)
    return lang


def bundle_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    for f in sorted(Path(path).iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()
