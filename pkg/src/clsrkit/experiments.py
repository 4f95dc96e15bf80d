"""The desk-scale experiment matrix: pretrain, adapt, quantize, report.

An :class:`ExperimentPlan` fixes everything a run depends on (roster,
corpus sizes, model configs, training settings, seeds), so the same plan
always yields the same checkpoints and reports. Data splits use disjoint
generator seeds; see :data:`SPLIT_SEEDS`.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .clsr import collect_gate_stats
from .data import (
    DEFAULT_FAMILIES,
    Manifest,
    RosterSpec,
    build_roster,
    character_set,
    generate_corpus,
    resource_to_count,
)
from .distill import KdConfig, TrainConfig, run_training
from .evalbias import DegradationHistogram, WerReport, degradation_histogram, evaluate_model
from .model import ModelConfig, Seq2SeqModel, Vocabulary, build_model, load_checkpoint, save_checkpoint
from .quant import DEFAULT_THRESHOLD, quantize_model

log = logging.getLogger(__name__)

SPLIT_SEEDS = {"pretrain": 1, "valid": 2, "test": 3, "adapt": 4, "adapt-valid": 5, "calibration": 6}
ADAPT_MODES = ("ft", "lora_ft", "clsr_ft", "distilwhisper")


@dataclass
class ArchSpec:
    layers: int
    width: int
    heads: int = 4
    max_src_len: int = 128
    max_tgt_len: int = 96

    def model_config(self, vocab: Vocabulary, frame_dim: int) -> ModelConfig:
        return ModelConfig(layers=self.layers, width=self.width, heads=self.heads, vocab_size=vocab.size,
                           max_src_len=self.max_src_len, max_tgt_len=self.max_tgt_len, frame_dim=frame_dim)


@dataclass
class PretrainSpec:
    arch: ArchSpec
    epochs: int
    lr: float = 3e-3
    seed: int = 0


@dataclass
class ExperimentPlan:
    """Everything the matrix depends on.

    Pretraining pools every language with ``resource_to_count(hours,
    examples_per_hour)`` utterances, ``outdomain_share`` of them long-form.
    Adaptation uses in-domain data of ``adapt_langs`` only and is scored on
    held-out out-of-domain utterances.
    """

    families: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_FAMILIES))
    roster_seed: int = 1234
    examples_per_hour: float = 0.25
    outdomain_share: float = 0.3
    valid_per_domain: int = 5
    test_per_domain: int = 100
    teacher: PretrainSpec = field(default_factory=lambda: PretrainSpec(ArchSpec(3, 64), epochs=20))
    student: PretrainSpec = field(default_factory=lambda: PretrainSpec(ArchSpec(2, 32), epochs=20))
    adapt_langs: list = field(default_factory=lambda: ["L4"])
    adapt_sizes: list = field(default_factory=lambda: [100, 300, 1000])
    adapt_size: int = 300
    adapt_seeds: list = field(default_factory=lambda: [0, 1, 2])
    adapt_valid: int = 100
    adapt_epochs: int = 10
    adapt_lr: float = 3e-3
    kd: KdConfig = field(default_factory=KdConfig)
    quant_threshold: float = DEFAULT_THRESHOLD
    calibration_per_language: int = 16

    def __post_init__(self):
        if isinstance(self.teacher, dict):
            self.teacher = _pretrain_from_dict(self.teacher)
        if isinstance(self.student, dict):
            self.student = _pretrain_from_dict(self.student)
        if isinstance(self.kd, dict):
            self.kd = KdConfig(**self.kd)
        self.families = {k: [tuple(m) for m in v] for k, v in self.families.items()}
        langs = self.hours()
        missing = [lang for lang in self.adapt_langs if lang not in langs]
        if missing:
            raise ValueError(f"adaptation languages {missing} are not in the roster")
        if self.adapt_size < 1 or any(n < 1 for n in self.adapt_sizes):
            raise ValueError("adaptation sizes must be positive")
        if not 0.0 <= self.outdomain_share < 1.0:
            raise ValueError("outdomain_share must lie in [0, 1)")
        if not self.adapt_seeds:
            raise ValueError("at least one adaptation seed is needed")
        t, st = self.teacher.arch, self.student.arch
        if not (t.layers > st.layers and t.width > st.width):
            raise ValueError("the teacher must be strictly deeper and wider than the student")

    def hours(self) -> dict[str, float]:
        return RosterSpec(self.families).hours()

    def roster(self):
        return build_roster(RosterSpec(self.families, seed=self.roster_seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["families"] = {k: [list(m) for m in v] for k, v in self.families.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown plan keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentPlan":
        return cls.from_dict(json.loads(text))

    def hash(self) -> str:
        return _digest(self.to_dict())

    def pretrain_hash(self, role: str) -> str:
        """Digest of only the fields that pretraining ``role`` depends on."""
        d = self.to_dict()
        keys = ("families", "roster_seed", "examples_per_hour", "outdomain_share", "valid_per_domain")
        return _digest({"role": role, "spec": d[role], **{k: d[k] for k in keys}})


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _pretrain_from_dict(d: dict) -> PretrainSpec:
    d = dict(d)
    arch = d.pop("arch")
    return PretrainSpec(ArchSpec(**arch) if isinstance(arch, dict) else arch, **d)


# -- corpora --------------------------------------------------------------------


class Benchmark:
    """Roster, vocabulary and every data split of a plan."""

    def __init__(self, plan: ExperimentPlan):
        self.plan = plan
        self.specs = plan.roster()
        self.by_lang = {s.lang_id: s for s in self.specs}
        self.vocab = Vocabulary(character_set(self.specs), [s.lang_id for s in self.specs])
        self.frame_dim = self.specs[0].frame_dim

    def hours(self) -> dict[str, float]:
        return {s.lang_id: s.train_hours_equivalent for s in self.specs}

    def pretrain_corpus(self) -> Manifest:
        m = Manifest()
        seed = SPLIT_SEEDS["pretrain"]
        for s in self.specs:
            n = resource_to_count(s.train_hours_equivalent, self.plan.examples_per_hour)
            n_out = int(round(n * self.plan.outdomain_share))
            if n_out >= n:
                n_out = 0
            m.extend(generate_corpus(s, n - n_out, "indomain", seed))
            if n_out:
                m.extend(generate_corpus(s, n_out, "outdomain", seed))
        return m

    def valid_corpus(self) -> Manifest:
        m = Manifest()
        for s in self.specs:
            for domain in ("indomain", "outdomain"):
                m.extend(generate_corpus(s, self.plan.valid_per_domain, domain, SPLIT_SEEDS["valid"]))
        return m

    def test_corpus(self, langs=None, domains=("indomain", "outdomain"), n: int | None = None) -> Manifest:
        m = Manifest()
        n = n or self.plan.test_per_domain
        for s in self.specs:
            if langs is not None and s.lang_id not in langs:
                continue
            for domain in domains:
                m.extend(generate_corpus(s, n, domain, SPLIT_SEEDS["test"]))
        return m

    def calibration_corpus(self) -> Manifest:
        m = Manifest()
        for s in self.specs:
            m.extend(generate_corpus(s, self.plan.calibration_per_language, "indomain", SPLIT_SEEDS["calibration"]))
        return m

    def adaptation_corpus(self, lang: str, n: int) -> tuple[Manifest, Manifest]:
        """In-domain training data and in-domain validation data for one language.

        Smaller training sets are prefixes of larger ones.
        """
        spec = self.by_lang[lang]
        train = generate_corpus(spec, n, "indomain", SPLIT_SEEDS["adapt"])
        valid = generate_corpus(spec, self.plan.adapt_valid, "indomain", SPLIT_SEEDS["adapt-valid"])
        return train, valid


# -- pretraining and adaptation ---------------------------------------------------


def pretrain(bench: Benchmark, role: str, out_dir=None) -> Seq2SeqModel:
    """Train the teacher or student backbone on the pooled corpus with full fine-tuning."""
    spec = {"teacher": bench.plan.teacher, "student": bench.plan.student}[role]
    cfg = spec.arch.model_config(bench.vocab, bench.frame_dim)
    model = build_model(cfg, bench.vocab, seed=spec.seed)
    tc = TrainConfig(mode="ft", epochs=spec.epochs, lr=spec.lr, seed=spec.seed, valid_every=max(1, spec.epochs // 4))
    start = time.perf_counter()
    res = run_training(model, bench.pretrain_corpus(), bench.valid_corpus(), tc)
    model.metadata = {"role": role, "best_epoch": res.best_epoch, "best_valid_wer": res.best_wer,
                      "train_config": tc.to_flat(), "train_seconds": round(time.perf_counter() - start, 1)}
    if out_dir is not None:
        save_checkpoint(model, out_dir, model.metadata)
    return model


def prepare_student(base: Seq2SeqModel, mode: str, lang: str, seed: int) -> Seq2SeqModel:
    """Fresh copy of the pretrained student with the mode's feed-forward variant."""
    model = copy.deepcopy(base)
    if mode in ("clsr_ft", "distilwhisper"):
        model.attach_clsr([lang], seed=seed)
    elif mode == "lora_ft":
        model.attach_lora(seed=seed)
    elif mode != "ft":
        raise ValueError(f"unknown adaptation mode {mode!r}")
    return model


@dataclass
class AdaptResult:
    mode: str
    lang: str
    n_train: int
    seed: int
    test_wer: float
    best_epoch: int
    best_valid_wer: float


def adapt(bench: Benchmark, student: Seq2SeqModel, mode: str, lang: str, n_train: int, seed: int,
          teacher: Seq2SeqModel | None = None, out_dir=None, test: Manifest | None = None) -> tuple[Seq2SeqModel, AdaptResult]:
    plan = bench.plan
    train, valid = bench.adaptation_corpus(lang, n_train)
    model = prepare_student(student, mode, lang, seed)
    tc = TrainConfig(mode=mode, epochs=plan.adapt_epochs, lr=plan.adapt_lr, kd=plan.kd, seed=seed)
    res = run_training(model, train, valid, tc, checkpoint_dir=out_dir,
                       teacher=teacher if mode == "distilwhisper" else None, lang=lang)
    test = test if test is not None else bench.test_corpus([lang], ("outdomain",))
    wer = evaluate_model(model, test).mean()
    log.info("adapt %s %s n=%d seed=%d: out-of-domain WER %.2f", mode, lang, n_train, seed, wer)
    return model, AdaptResult(mode, lang, n_train, seed, wer, res.best_epoch, res.best_wer)


def mode_comparison(bench: Benchmark, student, teacher, modes=ADAPT_MODES) -> list[AdaptResult]:
    """Every mode x adaptation language x seed at ``plan.adapt_size`` examples."""
    out = []
    for lang in bench.plan.adapt_langs:
        test = bench.test_corpus([lang], ("outdomain",))
        for mode in modes:
            for seed in bench.plan.adapt_seeds:
                out.append(adapt(bench, student, mode, lang, bench.plan.adapt_size, seed, teacher, test=test)[1])
    return out


def size_sweep(bench: Benchmark, student, teacher, mode: str = "distilwhisper",
               known: list[AdaptResult] = ()) -> list[AdaptResult]:
    """``mode`` at every size of ``plan.adapt_sizes``; runs already in ``known`` are reused."""
    done = {(r.mode, r.lang, r.n_train, r.seed): r for r in known}
    out = []
    for lang in bench.plan.adapt_langs:
        test = bench.test_corpus([lang], ("outdomain",))
        for n in bench.plan.adapt_sizes:
            for seed in bench.plan.adapt_seeds:
                key = (mode, lang, n, seed)
                out.append(done[key] if key in done else adapt(bench, student, mode, lang, n, seed, teacher, test=test)[1])
    return out


def mean_by(results, key) -> dict:
    groups: dict = {}
    for r in results:
        groups.setdefault(key(r), []).append(r.test_wer)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


# -- quantization bias ------------------------------------------------------------


@dataclass
class BiasReport:
    """Sentence-level quantization degradation of each model, per language."""

    histograms: dict[str, DegradationHistogram]
    before: dict[str, WerReport]
    after: dict[str, WerReport]
    hours: dict[str, float]

    def worsened_fraction(self, model: str, lang: str | None = None) -> float:
        h = self.histograms[model]
        groups = [lang] if lang is not None else h.groups()
        worse = sum(h.counts[g]["worsened"] for g in groups)
        total = sum(h.counts[g][b] for g in groups for b in ("worsened", "similar", "improved"))
        return worse / total if total else float("nan")

    def spearman(self, model: str) -> float:
        langs = self.histograms[model].groups()
        rho = spearmanr([self.hours[g] for g in langs], [self.worsened_fraction(model, g) for g in langs])[0]
        return float(rho)

    def rows(self) -> list[dict]:
        out = []
        for name, h in sorted(self.histograms.items()):
            for g in h.groups():
                c = h.counts[g]
                out.append({"model": name, "lang": g, "hours": self.hours[g], **c,
                            "worsened_fraction": self.worsened_fraction(name, g),
                            "wer_before": self.before[name].mean(lambda r, g=g: r.lang == g),
                            "wer_after": self.after[name].mean(lambda r, g=g: r.lang == g)})
        return out

    def summary(self) -> dict:
        return {name: {"worsened_fraction": self.worsened_fraction(name), "spearman_hours": self.spearman(name)}
                for name in sorted(self.histograms)}


def bias_report(bench: Benchmark, models: dict[str, Seq2SeqModel], test: Manifest | None = None,
                quantized: dict[str, Seq2SeqModel] | None = None) -> BiasReport:
    test = test if test is not None else bench.test_corpus()
    calib = bench.calibration_corpus()
    hists, before, after = {}, {}, {}
    for name, model in models.items():
        q = (quantized or {}).get(name) or quantize_model(model, calib, bench.plan.quant_threshold)
        before[name] = evaluate_model(model, test)
        after[name] = evaluate_model(q, test)
        hists[name] = degradation_histogram(before[name], after[name])
    return BiasReport(hists, before, after, bench.hours())


def gate_report(bench: Benchmark, model: Seq2SeqModel, lang: str, test: Manifest | None = None):
    test = test if test is not None else bench.test_corpus([lang])
    return collect_gate_stats(model, test, lang)


def load_or_pretrain(bench: Benchmark, role: str, cache_dir) -> Seq2SeqModel:
    """Reuse ``cache_dir/<role>-<pretrain hash>`` when present, otherwise pretrain and save there."""
    root = Path(cache_dir) / f"{role}-{bench.plan.pretrain_hash(role)}"
    if (root / "manifest.json").exists():
        return load_checkpoint(root)
    tmp = Path(str(root) + ".partial")
    model = pretrain(bench, role, tmp)
    os.replace(tmp, root)
    return model
