"""Training modes: full fine-tuning, LoRA, CLSR fine-tuning and CLSR with distillation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import numcore as nc
from ..clsr import GateSchedule, RouteContext, gate_budget_loss, gate_usage, save_expert_bundle
from ..evalbias import evaluate_model
from ..model import Seq2SeqModel, collate, configure_trainable, save_checkpoint
from .losses import kd_loss, total_loss

log = logging.getLogger(__name__)

MODES = ("ft", "lora_ft", "clsr_ft", "distilwhisper")
METRIC_COLUMNS = ("epoch", "step", "ce", "gate", "kd", "total", "valid_wer")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class KdConfig:
    loss: str = "js"
    tau: float = 1.0
    beta: float = 2.0

    def __post_init__(self):
        if self.loss not in ("js", "kl"):
            raise ValueError(f"kd.loss must be js or kl, got {self.loss!r}")
        if not self.tau > 0:
            raise ValueError("kd.tau must be positive")
        if self.beta < 0:
            raise ValueError("kd.beta must be non-negative")


@dataclass
class TrainConfig:
    mode: str = "distilwhisper"
    epochs: int = 10
    lr: float = 1e-4
    warmup_epochs: float = 1.0
    batch_size: int = 16
    label_smoothing: float = 0.1
    gate_budget: float = 0.5
    gate_skip: float = 0.2
    gate_alpha_max: float = 1.0
    kd: KdConfig = field(default_factory=KdConfig)
    seed: int = 0
    grad_clip: float = 0.0
    valid_every: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0 <= self.gate_budget <= 1:
            raise ValueError("gate.budget must lie in [0, 1]")
        if not 0 <= self.gate_skip < 1:
            raise ValueError("gate.skip must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    # flat "key = value" text form
    _KEYS = {
        "mode": ("mode", str),
        "epochs": ("epochs", int),
        "lr": ("lr", float),
        "warmup_epochs": ("warmup_epochs", float),
        "batch_size": ("batch_size", int),
        "label_smoothing": ("label_smoothing", float),
        "gate.budget": ("gate_budget", float),
        "gate.skip": ("gate_skip", float),
        "gate.alpha_max": ("gate_alpha_max", float),
        "kd.loss": ("kd.loss", str),
        "kd.tau": ("kd.tau", float),
        "kd.beta": ("kd.beta", float),
        "seed": ("seed", int),
        "grad_clip": ("grad_clip", float),
        "valid_every": ("valid_every", int),
    }

    def to_flat(self) -> dict[str, str]:
        out = {}
        for key, (attr, _) in self._KEYS.items():
            obj = self.kd if attr.startswith("kd.") else self
            out[key] = str(getattr(obj, attr.split(".")[-1]))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_flat().items())

    @classmethod
    def from_flat(cls, values: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        cfg = base or cls()
        top = {f.name: getattr(cfg, f.name) for f in fields(cls) if f.name != "kd"}
        kd = asdict(cfg.kd)
        for key, raw in values.items():
            if key not in cls._KEYS:
                raise KeyError(f"unknown config key {key!r}")
            attr, typ = cls._KEYS[key]
            try:
                val = typ(raw)
            except ValueError:
                raise ValueError(f"config key {key}: cannot parse {raw!r} as {typ.__name__}") from None
            if attr.startswith("kd."):
                kd[attr[3:]] = val
            else:
                top[attr] = val
        return cls(kd=KdConfig(**kd), **top)

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
        return cls.from_flat(values, base)


class Adam:
    """Adam with default moments (0.9, 0.999, 1e-8) over named parameters."""

    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self, lr: float, clip: float = 0.0) -> None:
        self.t += 1
        grads = {n: p.grad for n, p in self.params if p.grad is not None}
        if clip > 0 and grads:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > clip:
                grads = {n: g * (clip / norm) for n, g in grads.items()}
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for n, p in self.params:
            g = grads.get(n)
            if g is None:
                continue
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            upd = lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype, copy=False)
            p.grad = None


def linear_schedule(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warm-up to ``base_lr`` then linear decay to zero at ``total``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if total <= warmup:
        return base_lr
    return base_lr * max(0.0, (total - step) / (total - warmup))


@dataclass
class LossBreakdown:
    ce: float
    gate: float
    kd: float
    total: float
    gate_usage: float = float("nan")


def make_batches(examples, batch_size: int, rng: np.random.Generator, by_language: bool) -> list[list]:
    exs = list(examples)
    if not by_language:
        order = rng.permutation(len(exs))
        return [[exs[i] for i in order[k : k + batch_size]] for k in range(0, len(exs), batch_size)]
    groups: dict[str, list] = {}
    for e in exs:
        groups.setdefault(e.lang, []).append(e)
    batches = []
    for lang in sorted(groups):
        g = groups[lang]
        order = rng.permutation(len(g))
        batches += [[g[i] for i in order[k : k + batch_size]] for k in range(0, len(g), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


class Trainer:
    """Owns the optimizer, step counter and random streams of one training run."""

    def __init__(self, model: Seq2SeqModel, config: TrainConfig, total_steps: int, warmup_steps: int,
                 teacher: Seq2SeqModel | None = None, lang: str | None = None):
        if config.mode == "distilwhisper":
            if teacher is None:
                raise ValueError("distilwhisper mode needs a teacher model")
            if teacher.vocab.size != model.vocab.size or teacher.vocab.to_dict() != model.vocab.to_dict():
                raise ValueError("teacher and student vocabularies differ")
        self.model = model
        self.teacher = teacher if config.mode == "distilwhisper" else None
        self.config = config
        self.lang = lang
        configure_trainable(model, config.mode, lang)
        self.optimizer = Adam(model.trainable_parameters())
        self.total_steps = max(1, total_steps)
        self.warmup_steps = warmup_steps
        self.schedule = GateSchedule(config.gate_alpha_max, self.total_steps)
        self.step_count = 0
        self.gate_rng = np.random.default_rng([config.seed, 17])
        self.clsr = config.mode in ("clsr_ft", "distilwhisper")

    def train_step(self, batch) -> LossBreakdown:
        cfg = self.config
        model = self.model
        vocab = model.vocab
        ctx = None
        if self.clsr:
            ctx = RouteContext(train=True, step=self.step_count, schedule=self.schedule,
                               rng=self.gate_rng, skip_prob=cfg.gate_skip)
        logits = model.forward(batch, ctx)
        ce = nc.cross_entropy_ls(logits, batch.targets, cfg.label_smoothing, vocab.pad)
        gate = kd = 0.0
        usage = float("nan")
        if self.clsr:
            gate = gate_budget_loss(ctx.records, cfg.gate_budget)
            usage = gate_usage(ctx.records)
        if self.teacher is not None:
            with nc.no_grad():
                t_logits = self.teacher.forward(batch)
            kd = kd_loss(cfg.kd.loss, t_logits, logits, cfg.kd.tau, batch.target_mask(vocab))
        beta = cfg.kd.beta if self.teacher is not None else 0.0
        loss = total_loss(ce, gate, kd, beta)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {self.step_count}")
        nc.backward(loss)
        lr = linear_schedule(self.step_count, cfg.lr, self.warmup_steps, self.total_steps)
        self.optimizer.step(lr, cfg.grad_clip)
        model.zero_grad()
        self.step_count += 1
        f = lambda x: float(x.data) if isinstance(x, nc.Tensor) else float(x)  # noqa: E731
        return LossBreakdown(f(ce), f(gate), f(kd), value, usage)


def train_step(trainer: Trainer, batch) -> LossBreakdown:
    return trainer.train_step(batch)


@dataclass
class TrainingResult:
    metrics: list[dict]
    best_epoch: int
    best_wer: float
    checkpoint: Path | None = None


def run_training(model: Seq2SeqModel, train, valid, config: TrainConfig, checkpoint_dir=None,
                 teacher: Seq2SeqModel | None = None, lang: str | None = None,
                 metrics_path=None) -> TrainingResult:
    """Train for ``config.epochs`` epochs, keeping the parameters with the best validation WER.

    On return the model holds the best parameters. When ``checkpoint_dir``
    is given the best model is saved there (plus an expert bundle in the
    CLSR modes) and the per-epoch metrics go to ``metrics.csv``.
    """
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("training and validation manifests must be non-empty")
    if config.mode in ("clsr_ft", "distilwhisper") and lang is None:
        langs = {e.lang for e in train}
        if len(langs) != 1:
            raise ValueError("CLSR training runs are per language; pass lang")
        lang = langs.pop()
    rng = np.random.default_rng([config.seed, 3])
    by_lang = model.ff_variant == "clsr"
    n_batches = len(make_batches(train, config.batch_size, np.random.default_rng(0), by_lang))
    total = n_batches * config.epochs
    warmup = int(round(config.warmup_epochs * n_batches))
    trainer = Trainer(model, config, total, warmup, teacher, lang)

    metrics: list[dict] = []
    best_wer, best_epoch, best_state = float("inf"), -1, None
    trainable = [n for n, _ in model.trainable_parameters()]
    for epoch in range(1, config.epochs + 1):
        sums = {"ce": 0.0, "gate": 0.0, "kd": 0.0, "total": 0.0}
        batches = make_batches(train, config.batch_size, rng, by_lang)
        try:
            for exs in batches:
                lb = trainer.train_step(collate(exs, model.vocab))
                for k in sums:
                    sums[k] += getattr(lb, k)
        except nc.NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        row = {"epoch": epoch, "step": trainer.step_count}
        row.update({k: v / len(batches) for k, v in sums.items()})
        if epoch % config.valid_every == 0 or epoch == config.epochs:
            row["valid_wer"] = evaluate_model(model, valid).mean()
            if row["valid_wer"] < best_wer:
                best_wer, best_epoch = row["valid_wer"], epoch
                params = dict(model.named_parameters())
                best_state = {n: params[n].data.copy() for n in trainable}
        else:
            row["valid_wer"] = float("nan")
        log.info("epoch %d step %d total %.4f valid_wer %.2f", epoch, row["step"], row["total"], row["valid_wer"])
        metrics.append(row)

    if best_state is not None:
        params = dict(model.named_parameters())
        for n, v in best_state.items():
            params[n].data = v
    ckpt = None
    if checkpoint_dir is not None:
        ckpt = Path(checkpoint_dir)
        meta = {"mode": config.mode, "lang": lang, "best_epoch": best_epoch, "best_valid_wer": best_wer,
                "train_config": config.to_flat()}
        save_checkpoint(model, ckpt / "best", meta)
        if model.ff_variant == "clsr" and lang is not None:
            save_expert_bundle(model, lang, ckpt)
        write_metrics(metrics, metrics_path or ckpt / "metrics.csv")
    elif metrics_path is not None:
        write_metrics(metrics, metrics_path)
    return TrainingResult(metrics, best_epoch, best_wer, ckpt)


def write_metrics(rows: list[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], r["step"]] + [f"{r[k]:.6f}" for k in METRIC_COLUMNS[2:]])
