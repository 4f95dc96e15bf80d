"""``clsrkit`` command line: one binary, one subcommand per pipeline stage.

Every subcommand writes into an output directory and records a
``run.json`` there (command, resolved config and its hash, seed, content
hashes of the inputs, status). ``status`` stays ``incomplete`` unless the
command finishes. Relative ``--out`` paths are resolved against
``$CLSRKIT_RUN_ROOT`` when it is set.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import (
    DEFAULT_FAMILIES,
    Manifest,
    RosterSpec,
    build_roster,
    generate_corpus,
    load_roster,
    read_manifest,
    save_roster,
    write_manifest,
)
from .distill import TrainConfig, TrainingDiverged, run_training
from .numcore import NonFiniteError

RUN_ROOT_ENV = "CLSRKIT_RUN_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("clsrkit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- run records ------------------------------------------------------------------


def content_hash(path) -> str:
    """sha256 of a file, or of every (relative path, bytes) pair under a directory."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(f.relative_to(path).as_posix().encode() + b"\0")
            h.update(f.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def manifest_hash(path) -> str:
    """Hash of a manifest file together with the frame files it references."""
    path = Path(path)
    h = hashlib.sha256(path.read_bytes())
    frames = path.parent / f"{path.stem}_frames"
    if frames.is_dir():
        h.update(content_hash(frames).encode())
    return h.hexdigest()


def resolve_out(out: str) -> Path:
    p = Path(out)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


class RunRecord:
    def __init__(self, out: Path, command: str, config: dict, seed, inputs: dict):
        self.path = out / "run.json"
        blob = json.dumps(config, sort_keys=True, default=str)
        self.data = {
            "command": command,
            "version": __version__,
            "config": json.loads(blob),
            "config_hash": hashlib.sha256(blob.encode()).hexdigest()[:16],
            "seed": seed,
            "inputs": inputs,
            "outputs": [],
            "status": "incomplete",
        }
        out.mkdir(parents=True, exist_ok=True)
        self.write()

    def write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))

    def finish(self, outputs) -> None:
        self.data["outputs"] = sorted(str(o) for o in outputs)
        self.data["status"] = "complete"
        self.write()


# -- shared helpers -----------------------------------------------------------------


def _roster(path):
    if path is None:
        return build_roster(RosterSpec(DEFAULT_FAMILIES))
    return load_roster(path)


def _read_manifests(paths) -> Manifest:
    out = Manifest()
    for p in paths:
        out.extend(read_manifest(p))
    if len(out) == 0:
        raise ValueError(f"no utterances in {', '.join(map(str, paths))}")
    return out


def _load_model(path):
    from .model import load_checkpoint
    from .quant import QUANT_MANIFEST, load_quantized

    path = Path(path)
    if not (path / "manifest.json").exists() and (path / "best" / "manifest.json").exists():
        path = path / "best"
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return load_quantized(path) if (path / QUANT_MANIFEST).exists() else load_checkpoint(path)


def _parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


_TRAIN_FLAGS = {
    "epochs": "epochs", "lr": "lr", "batch_size": "batch_size", "seed": "seed", "warmup_epochs": "warmup_epochs",
    "label_smoothing": "label_smoothing", "budget": "gate.budget", "skip": "gate.skip",
    "kd_loss": "kd.loss", "kd_tau": "kd.tau", "kd_beta": "kd.beta",
}


def _train_config(args, mode: str, base: TrainConfig | None = None) -> TrainConfig:
    """Config file values, then command-line flags on top."""
    values = _parse_config_file(args.config) if args.config else {}
    values["mode"] = mode
    for flag, key in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = str(v)
    try:
        return TrainConfig.from_flat(values, base)
    except KeyError as exc:
        raise UsageError(f"unknown config key {exc}") from None


def _add_train_flags(p, epochs_default=None):
    p.add_argument("--config", help="flat key = value training config; flags override it")
    p.add_argument("--epochs", type=int, default=epochs_default)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=float)
    p.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    p.add_argument("--seed", type=int)


# -- subcommands --------------------------------------------------------------------


def cmd_generate_data(args, out: Path):
    specs = _roster(args.lang_spec)
    langs = args.lang or [s.lang_id for s in specs]
    domains = args.domain or ["indomain"]
    by_id = {s.lang_id: s for s in specs}
    unknown = [lang for lang in langs if lang not in by_id]
    if unknown:
        raise UsageError(f"languages {unknown} are not in the roster")
    cfg = {"langs": langs, "n": args.n, "domains": domains, "seed": args.seed}
    inputs = {str(args.lang_spec): content_hash(args.lang_spec)} if args.lang_spec else {}
    rec = RunRecord(out, "generate-data", cfg, args.seed, inputs)
    m = Manifest()
    for lang in langs:
        for domain in domains:
            m.extend(generate_corpus(by_id[lang], args.n, domain, args.seed))
    path = write_manifest(m, out / f"{args.name}.jsonl")
    save_roster(specs, out / "roster.json")
    rec.finish([path, out / "roster.json"])
    print(f"wrote {len(m)} utterances to {path}")


def cmd_pretrain(args, out: Path):
    from .experiments import ArchSpec, Benchmark, ExperimentPlan
    from .model import build_model, save_checkpoint

    plan = ExperimentPlan.from_json(Path(args.plan).read_text()) if args.plan else ExperimentPlan()
    spec = getattr(plan, args.role)
    bench = Benchmark(plan)
    arch = ArchSpec(args.layers or spec.arch.layers, args.width or spec.arch.width, args.heads or spec.arch.heads,
                    spec.arch.max_src_len, spec.arch.max_tgt_len)
    base = TrainConfig(mode="ft", epochs=spec.epochs, lr=spec.lr, seed=spec.seed, valid_every=max(1, spec.epochs // 4))
    tc = _train_config(args, "ft", base)
    train = _read_manifests(args.train) if args.train else bench.pretrain_corpus()
    valid = _read_manifests(args.valid) if args.valid else bench.valid_corpus()
    inputs = {p: manifest_hash(p) for p in (args.train or []) + (args.valid or [])}
    if args.plan:
        inputs[args.plan] = content_hash(args.plan)
    cfg = {"role": args.role, "arch": arch.__dict__, "train": tc.to_flat(), "plan_hash": plan.hash()}
    rec = RunRecord(out, "pretrain", cfg, tc.seed, inputs)
    model = build_model(arch.model_config(bench.vocab, bench.frame_dim), bench.vocab, seed=tc.seed)
    res = run_training(model, train, valid, tc, metrics_path=out / "metrics.csv")
    save_checkpoint(model, out / "checkpoint", {"role": args.role, "best_epoch": res.best_epoch,
                                                "best_valid_wer": res.best_wer, "train_config": tc.to_flat()})
    rec.finish([out / "checkpoint", out / "metrics.csv"])
    print(f"{args.role}: best validation WER {res.best_wer:.2f} at epoch {res.best_epoch}")


def cmd_adapt(args, out: Path):
    from .experiments import Benchmark, ExperimentPlan, prepare_student

    if args.mode == "distilwhisper" and not args.teacher:
        raise UsageError("--mode distilwhisper needs --teacher")
    if (args.train is None) == (args.train_manifest is None):
        raise UsageError("give exactly one of --train N or --train-manifest PATH")
    plan = ExperimentPlan.from_json(Path(args.plan).read_text()) if args.plan else ExperimentPlan()
    base = TrainConfig(mode=args.mode, epochs=plan.adapt_epochs, lr=plan.adapt_lr, kd=plan.kd)
    tc = _train_config(args, args.mode, base)
    student = _load_model(args.model)
    teacher = _load_model(args.teacher) if args.teacher else None
    if args.lang not in student.vocab.languages:
        raise KeyError(f"language {args.lang!r} is not in the model vocabulary")
    inputs = {args.model: content_hash(args.model)}
    if args.teacher:
        inputs[args.teacher] = content_hash(args.teacher)
    if args.train_manifest:
        train = _read_manifests([args.train_manifest]).filter(lang=args.lang)
        if len(train) == 0:
            raise ValueError(f"{args.train_manifest} has no {args.lang} utterances")
        inputs[args.train_manifest] = manifest_hash(args.train_manifest)
        valid = _read_manifests(args.valid) if args.valid else train
    else:
        train, valid = Benchmark(plan).adaptation_corpus(args.lang, args.train)
        if args.valid:
            valid = _read_manifests(args.valid)
    for p in args.valid or []:
        inputs[p] = manifest_hash(p)
    cfg = {"mode": args.mode, "lang": args.lang, "n_train": len(train), "train": tc.to_flat()}
    rec = RunRecord(out, "adapt", cfg, tc.seed, inputs)
    (out / "train.cfg").write_text(tc.to_text())
    model = prepare_student(student, args.mode, args.lang, tc.seed)
    res = run_training(model, train, valid, tc, checkpoint_dir=out, teacher=teacher, lang=args.lang)
    outputs = [out / "best", out / "metrics.csv", out / "train.cfg"]
    if model.ff_variant == "clsr":
        outputs.append(out / f"expert-{args.lang}")
    rec.finish(outputs)
    print(f"{args.mode} {args.lang}: best validation WER {res.best_wer:.2f} at epoch {res.best_epoch}")


def cmd_evaluate(args, out: Path):
    from .evalbias import evaluate_model

    model = _load_model(args.model)
    data = _read_manifests(args.manifest)
    inputs = {args.model: content_hash(args.model), **{p: manifest_hash(p) for p in args.manifest}}
    rec = RunRecord(out, "evaluate", {"model": args.model, "manifests": args.manifest}, None, inputs)
    report = evaluate_model(model, data)
    report.write_csv(out / "utterances.csv")
    report.write_aggregate_csv(out / "aggregate.csv", group=lambda r: f"{r.lang}/{r.domain}")
    rec.finish([out / "utterances.csv", out / "aggregate.csv"])
    for g, m, n in report.aggregate(lambda r: f"{r.lang}/{r.domain}"):
        print(f"{g}\t{m:.2f}\t{n}")


def cmd_quantize(args, out: Path):
    from .quant import payload_sizes, quantize_model, save_quantized

    model = _load_model(args.model)
    calib = _read_manifests(args.calibration) if args.calibration else None
    inputs = {args.model: content_hash(args.model), **{p: manifest_hash(p) for p in args.calibration or []}}
    rec = RunRecord(out, "quantize", {"threshold": args.threshold}, None, inputs)
    q = quantize_model(model, calib, args.threshold)
    save_quantized(q, out / "checkpoint", {"source": str(args.model), "threshold": args.threshold})
    qb, fb = payload_sizes(q)
    rec.finish([out / "checkpoint"])
    print(f"quantized payload {qb} bytes ({100 * qb / fb:.1f}% of float32)")


def cmd_bias_report(args, out: Path):
    from .evalbias import degradation_histogram, evaluate_model
    from .quant import quantize_model

    models = []
    for item in args.model:
        name, _, path = item.rpartition("=")
        models.append((name or Path(path).name, path))
    if len({n for n, _ in models}) != len(models):
        raise UsageError("model names must be unique (use NAME=PATH)")
    test = _read_manifests(args.manifest)
    calib = _read_manifests(args.calibration) if args.calibration else None
    hours = {s.lang_id: s.train_hours_equivalent for s in _roster(args.lang_spec)}
    inputs = {p: content_hash(p) for _, p in models}
    inputs.update({p: manifest_hash(p) for p in args.manifest + (args.calibration or [])})
    rec = RunRecord(out, "bias-report", {"models": dict(models), "threshold": args.threshold}, None, inputs)
    rows, summary = [], {}
    for name, path in models:
        model = _load_model(path)
        before = evaluate_model(model, test)
        after = evaluate_model(quantize_model(model, calib, args.threshold), test)
        hist = degradation_histogram(before, after)
        hist.write_csv(out / f"histogram-{name}.csv")
        worse = total = 0
        for g in hist.groups():
            c = hist.counts[g]
            n = c["worsened"] + c["similar"] + c["improved"]
            worse, total = worse + c["worsened"], total + n
            rows.append([name, g, hours.get(g, ""), c["worsened"], c["similar"], c["improved"], c["excluded"],
                         f"{c['worsened'] / n:.4f}" if n else "nan"])
        summary[name] = {"worsened_fraction": worse / total if total else None}
    with open(out / "bias.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "lang", "hours", "worsened", "similar", "improved", "excluded", "worsened_fraction"])
        w.writerows(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    rec.finish([out / "bias.csv", out / "summary.json"] + [out / f"histogram-{n}.csv" for n, _ in models])
    for name, s in summary.items():
        frac = s["worsened_fraction"]
        print(f"{name}: worsened fraction " + ("n/a, every sentence excluded" if frac is None else f"{frac:.4f}"))


def cmd_gate_stats(args, out: Path):
    from .clsr import collect_gate_stats

    model = _load_model(args.model)
    if model.ff_variant != "clsr":
        raise UsageError(f"{args.model} is not a CLSR model")
    data = _read_manifests(args.manifest)
    inputs = {args.model: content_hash(args.model), **{p: manifest_hash(p) for p in args.manifest}}
    rec = RunRecord(out, "gate-stats", {"lang": args.lang}, None, inputs)
    stats = collect_gate_stats(model, data, args.lang)
    with open(out / "gate_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lang", "domain", "layer", "ls_tokens", "total_tokens", "ratio"])
        for r in stats.rows():
            w.writerow([r["lang"], r["domain"], r["layer"], r["ls_tokens"], r["total_tokens"], f"{r['ratio']:.4f}"])
    rec.finish([out / "gate_stats.csv"])
    for domain in sorted({r["domain"] for r in stats.rows()}):
        print(f"{args.lang}/{domain}: LS ratio {stats.ratio(args.lang, domain):.3f}")


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clsrkit", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic manifest")
    g.add_argument("--lang-spec", help="roster JSON (default: the built-in six-language roster)")
    g.add_argument("--lang", action="append", help="language id (repeatable; default all)")
    g.add_argument("--n", type=int, required=True, help="utterances per language and domain")
    g.add_argument("--domain", action="append", choices=["indomain", "outdomain"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", default="manifest")
    g.add_argument("--out", required=True)

    pt = sub.add_parser("pretrain", help="train a backbone on pooled multilingual data")
    pt.add_argument("--role", choices=["teacher", "student"], default="student")
    pt.add_argument("--plan", help="experiment plan JSON")
    pt.add_argument("--train", action="append", help="training manifest(s); default: the plan's pooled corpus")
    pt.add_argument("--valid", action="append")
    pt.add_argument("--layers", type=int)
    pt.add_argument("--width", type=int)
    pt.add_argument("--heads", type=int)
    _add_train_flags(pt)
    pt.add_argument("--out", required=True)

    a = sub.add_parser("adapt", help="adapt a pretrained student to one language")
    a.add_argument("--mode", choices=["ft", "lora_ft", "clsr_ft", "distilwhisper"], required=True)
    a.add_argument("--lang", required=True)
    a.add_argument("--model", required=True, help="pretrained student checkpoint")
    a.add_argument("--teacher", help="teacher checkpoint (distilwhisper)")
    a.add_argument("--train", type=int, help="generate N in-domain training utterances")
    a.add_argument("--train-manifest", help="or read training data from a manifest")
    a.add_argument("--valid", action="append", help="validation manifest(s)")
    a.add_argument("--plan", help="experiment plan JSON (roster and adaptation defaults)")
    _add_train_flags(a)
    a.add_argument("--budget", type=float)
    a.add_argument("--skip", type=float)
    a.add_argument("--kd-loss", dest="kd_loss", choices=["js", "kl"])
    a.add_argument("--kd-tau", dest="kd_tau", type=float)
    a.add_argument("--kd-beta", dest="kd_beta", type=float)
    a.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="WER per utterance and per language/domain")
    e.add_argument("--model", required=True)
    e.add_argument("--manifest", action="append", required=True)
    e.add_argument("--out", required=True)

    q = sub.add_parser("quantize", help="int8 weights with full-precision outlier columns")
    q.add_argument("--model", required=True)
    q.add_argument("--calibration", action="append", help="manifest(s) used to find outlier columns")
    q.add_argument("--threshold", type=float, default=6.0)
    q.add_argument("--out", required=True)

    b = sub.add_parser("bias-report", help="sentence-level degradation after quantization")
    b.add_argument("--model", action="append", required=True, help="[NAME=]checkpoint (repeatable)")
    b.add_argument("--manifest", action="append", required=True)
    b.add_argument("--calibration", action="append")
    b.add_argument("--lang-spec", help="roster JSON giving the hours of each language")
    b.add_argument("--threshold", type=float, default=6.0)
    b.add_argument("--out", required=True)

    s = sub.add_parser("gate-stats", help="share of tokens routed to the language expert")
    s.add_argument("--model", required=True)
    s.add_argument("--lang", required=True)
    s.add_argument("--manifest", action="append", required=True)
    s.add_argument("--out", required=True)
    return p


COMMANDS = {
    "generate-data": cmd_generate_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "quantize": cmd_quantize,
    "bias-report": cmd_bias_report,
    "gate-stats": cmd_gate_stats,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = resolve_out(args.out)
    rec_path = out / "run.json"
    try:
        COMMANDS[args.command](args, out)
        return EXIT_OK
    except UsageError as exc:
        code, msg = EXIT_USAGE, f"usage error: {exc}"
    except (TrainingDiverged, NonFiniteError) as exc:
        code, msg = EXIT_DIVERGED, f"training diverged: {exc}"
    except (OSError, ValueError, KeyError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    print(f"clsrkit {args.command}: {msg}", file=sys.stderr)
    if rec_path.exists():
        data = json.loads(rec_path.read_text())
        data["error"] = msg
        rec_path.write_text(json.dumps(data, indent=2, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
