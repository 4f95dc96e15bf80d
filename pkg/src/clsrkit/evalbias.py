"""WER scoring, quantization-degradation histograms and resourcefulness groups."""

from __future__ import annotations

import csv
import enum
import os
import re
import string
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")
_SPACES = re.compile(r"\s+")

SIMILAR_BAND = 5.0
EXCLUDE_AT = 100.0


def normalize_text(s: str) -> str:
    """Lowercase, drop ASCII punctuation, collapse whitespace, trim."""
    return _SPACES.sub(" ", _PUNCT.sub("", s.lower())).strip()


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    insertions: int
    deletions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def align_words(ref: Sequence[str], hyp: Sequence[str]) -> EditCounts:
    """Minimum edit alignment; ties prefer substitutions, then deletions."""
    n, m = len(ref), len(hyp)
    # cost and (S, I, D) carried along the cheapest path
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    back = np.zeros((n + 1, m + 1), dtype=np.int8)  # 0 match/sub, 1 ins, 2 del
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    back[1:, 0] = 2
    back[0, 1:] = 1
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dele = cost[i - 1, j] + 1
            ins = cost[i, j - 1] + 1
            best = min(diag, dele, ins)
            cost[i, j] = best
            back[i, j] = 0 if best == diag else (2 if best == dele else 1)
    s = ins_ = d = 0
    i, j = n, m
    while i > 0 or j > 0:
        move = back[i, j]
        if move == 0:
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif move == 1:
            ins_ += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return EditCounts(int(s), ins_, d)


def word_errors(ref_text: str, hyp_text: str) -> tuple[float, EditCounts]:
    ref = ref_text.split()
    hyp = hyp_text.split()
    counts = align_words(ref, hyp)
    if not ref:
        # empty reference: each hypothesis word is an insertion over a denominator of 1
        return 100.0 * len(hyp), counts
    return 100.0 * counts.errors / len(ref), counts


def wer(ref_text: str, hyp_text: str) -> float:
    """Word error rate in percent on already-normalized texts."""
    return word_errors(ref_text, hyp_text)[0]


class ResourcefulnessClass(enum.Enum):
    SuperHigh = (5000.0, float("inf"))
    High = (1000.0, 5000.0)
    MidToHigh = (500.0, 1000.0)
    LowToMid = (100.0, 500.0)
    Low = (10.0, 100.0)
    ExtremelyLow = (0.0, 10.0)

    @property
    def bounds(self) -> tuple[float, float]:
        return self.value


def classify_resourcefulness(hours: float) -> ResourcefulnessClass:
    """Left-closed hour intervals; the lowest class is the open (0, 10)."""
    if not hours > 0:
        raise ValueError(f"hours must be positive, got {hours}")
    for cls in ResourcefulnessClass:
        lo, hi = cls.bounds
        if lo <= hours < hi:
            return cls
    raise AssertionError("unreachable: classes cover (0, inf)")


@dataclass
class UtteranceScore:
    utterance_id: str
    lang: str
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    domain: str = ""
    reference: str = ""
    hypothesis: str = ""


@dataclass
class WerReport:
    """Per-utterance WERs; group aggregates are plain means of utterance WERs."""

    rows: list[UtteranceScore] = field(default_factory=list)

    def by_id(self) -> dict[str, UtteranceScore]:
        return {r.utterance_id: r for r in self.rows}

    def mean(self, key: Callable[[UtteranceScore], bool] | None = None) -> float:
        vals = [r.wer for r in self.rows if key is None or key(r)]
        return float(np.mean(vals)) if vals else float("nan")

    def aggregate(self, group: Callable[[UtteranceScore], str] = lambda r: r.lang) -> list[tuple[str, float, int]]:
        groups: dict[str, list[float]] = {}
        for r in self.rows:
            groups.setdefault(group(r), []).append(r.wer)
        return [(g, float(np.mean(v)), len(v)) for g, v in sorted(groups.items())]

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "lang", "wer", "S", "I", "D"])
            for r in self.rows:
                w.writerow([r.utterance_id, r.lang, f"{r.wer:.4f}", r.substitutions, r.insertions, r.deletions])

    def write_aggregate_csv(self, path: str | os.PathLike, group=lambda r: r.lang) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "mean_wer", "n"])
            for g, m, n in self.aggregate(group):
                w.writerow([g, f"{m:.4f}", n])

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "WerReport":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(
                    UtteranceScore(rec["id"], rec["lang"], float(rec["wer"]), int(rec["S"]), int(rec["I"]), int(rec["D"]))
                )
        return cls(rows)


def score(ids, langs, references, hypotheses, domains=None) -> WerReport:
    rows = []
    domains = domains or [""] * len(ids)
    for i, lang, ref, hyp, dom in zip(ids, langs, references, hypotheses, domains):
        ref_n, hyp_n = normalize_text(ref), normalize_text(hyp)
        w, c = word_errors(ref_n, hyp_n)
        rows.append(UtteranceScore(i, lang, w, c.substitutions, c.insertions, c.deletions, dom, ref_n, hyp_n))
    return WerReport(rows)


def evaluate_model(model, manifest, batch_size: int = 64) -> WerReport:
    """Greedy-transcribe every utterance and score it, one language at a time."""
    from .model import transcribe_batch

    hyps: dict[str, str] = {}
    for lang, sub in manifest.by_language().items():
        if model.ff_variant == "clsr" and lang not in model.expert_languages:
            raise KeyError(f"CLSR model has no expert for language {lang!r}")
        exs = list(sub)
        for k in range(0, len(exs), batch_size):
            chunk = exs[k : k + batch_size]
            out = transcribe_batch(model, [e.frames for e in chunk], [e.lang for e in chunk])
            for e, ids in zip(chunk, out):
                hyps[e.utterance_id] = model.vocab.decode(ids)
    exs = list(manifest)
    return score(
        [e.utterance_id for e in exs],
        [e.lang for e in exs],
        [e.text for e in exs],
        [hyps[e.utterance_id] for e in exs],
        [e.domain for e in exs],
    )


BUCKETS = ("worsened", "similar", "improved")


def bucket_of(delta: float) -> str:
    """Delta above +5 worsened, below -5 improved, the closed band [-5, 5] similar."""
    if delta > SIMILAR_BAND:
        return "worsened"
    if delta < -SIMILAR_BAND:
        return "improved"
    return "similar"


@dataclass
class DegradationHistogram:
    counts: dict = field(default_factory=dict)  # group -> {bucket: n, "excluded": n}

    def fractions(self, group: str) -> dict[str, float]:
        c = self.counts[group]
        n = sum(c[b] for b in BUCKETS)
        return {b: (c[b] / n if n else float("nan")) for b in BUCKETS}

    def groups(self) -> list[str]:
        return sorted(self.counts)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "worsened", "similar", "improved", "excluded"])
            for g in self.groups():
                c = self.counts[g]
                w.writerow([g, c["worsened"], c["similar"], c["improved"], c["excluded"]])


def degradation_histogram(before: WerReport, after: WerReport, group_key: Callable[[UtteranceScore], str] = lambda r: r.lang) -> DegradationHistogram:
    """Bucket sentence-level WER changes; sentences starting at WER >= 100 are excluded."""
    b_rows = before.by_id()
    a_rows = after.by_id()
    if set(b_rows) != set(a_rows):
        raise ValueError("before/after reports cover different utterance ids")
    hist = DegradationHistogram()
    for uid, b in b_rows.items():
        c = hist.counts.setdefault(group_key(b), {"worsened": 0, "similar": 0, "improved": 0, "excluded": 0})
        if b.wer >= EXCLUDE_AT:
            c["excluded"] += 1
            continue
        c[bucket_of(a_rows[uid].wer - b.wer)] += 1
    return hist
