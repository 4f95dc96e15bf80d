"""
The whole experiment matrix on the synthetic benchmark
======================================================

Pretrain a teacher and a smaller student on six synthetic languages whose
training volume spans four orders of magnitude, adapt the student to one
low-resource language with each of the four modes, then quantize both
backbones and look at who gets hurt.

Run from the repository root::

    python demos/full_matrix.py [run-dir]

Pretrained backbones are cached in ``run-dir/cache``; a second run only
repeats the adaptation and reporting steps.
"""

import json
import logging
import sys
import time
from pathlib import Path

from clsrkit.experiments import (
    Benchmark,
    ExperimentPlan,
    adapt,
    bias_report,
    gate_report,
    load_or_pretrain,
    mean_by,
    mode_comparison,
    size_sweep,
)

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/full-matrix")
out.mkdir(parents=True, exist_ok=True)

plan = ExperimentPlan()
(out / "plan.json").write_text(plan.to_json())
bench = Benchmark(plan)
start = time.perf_counter()

# %%
# Language roster. Pretraining example counts follow the hours column.

counts = {lang: len(m) for lang, m in bench.pretrain_corpus().by_language().items()}
for lang, hours in bench.hours().items():
    print(f"{lang}: {hours:6.0f} h  -> {counts[lang]:4d} pretraining utterances")

teacher = load_or_pretrain(bench, "teacher", out / "cache")
student = load_or_pretrain(bench, "student", out / "cache")
print("teacher best valid WER", teacher.metadata["best_valid_wer"], "student", student.metadata["best_valid_wer"])

# %%
# Adaptation: in-domain data only, scored on long-form (out-of-domain) speech.

results = mode_comparison(bench, student, teacher)
for mode, wer in mean_by(results, lambda r: r.mode).items():
    print(f"{mode:14s} out-of-domain WER {wer:6.2f}")

sweep = size_sweep(bench, student, teacher, "distilwhisper", known=results)
for n, wer in mean_by(sweep, lambda r: r.n_train).items():
    print(f"distilwhisper with {n:5d} utterances: {wer:6.2f}")

# %%
# Where do the gates send tokens? One distilled model, both domains.

lang = plan.adapt_langs[0]
dw, _ = adapt(bench, student, "distilwhisper", lang, plan.adapt_size, plan.adapt_seeds[0], teacher)
stats = gate_report(bench, dw, lang)
for domain in ("indomain", "outdomain"):
    print(f"{domain}: {stats.ratio(lang, domain):.3f} of tokens take the {lang} expert")

# %%
# Quantization bias.

report = bias_report(bench, {"teacher": teacher, "student": student})
for row in report.rows():
    print(f"{row['model']:8s} {row['lang']} {row['hours']:6.0f} h  worsened {row['worsened_fraction']:.3f}"
          f"  WER {row['wer_before']:.1f} -> {row['wer_after']:.1f}")
summary = report.summary()
print(json.dumps(summary, indent=2))

(out / "results.json").write_text(json.dumps({
    "modes": mean_by(results, lambda r: r.mode),
    "sizes": mean_by(sweep, lambda r: r.n_train),
    "bias": summary,
    "minutes": round((time.perf_counter() - start) / 60, 1),
}, indent=2))
print(f"done in {(time.perf_counter() - start) / 60:.1f} min")
