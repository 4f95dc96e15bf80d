import numpy as np
import pytest

from clsrkit.experiments import (
    ArchSpec,
    Benchmark,
    ExperimentPlan,
    PretrainSpec,
    load_or_pretrain,
    mean_by,
    prepare_student,
)
from clsrkit.model import build_model


def test_plan_json_roundtrip():
    plan = ExperimentPlan(adapt_langs=["L4", "L5"], teacher=PretrainSpec(ArchSpec(3, 48), epochs=3))
    back = ExperimentPlan.from_json(plan.to_json())
    assert back == plan and back.hash() == plan.hash()


def test_plan_rejects_unknown_keys_and_bad_values():
    d = ExperimentPlan().to_dict()
    d["adapt_langz"] = ["L5"]
    with pytest.raises(KeyError):
        ExperimentPlan.from_dict(d)
    with pytest.raises(ValueError):
        ExperimentPlan(adapt_langs=["L9"])
    with pytest.raises(ValueError):
        ExperimentPlan(adapt_sizes=[0])
    with pytest.raises(ValueError):
        ExperimentPlan(teacher=PretrainSpec(ArchSpec(3, 32), epochs=3))


def test_pretrain_hash_ignores_adaptation_settings():
    a, b = ExperimentPlan(), ExperimentPlan(adapt_lr=0.5, adapt_seeds=[7])
    assert a.hash() != b.hash()
    assert a.pretrain_hash("student") == b.pretrain_hash("student")
    assert a.pretrain_hash("student") != a.pretrain_hash("teacher")
    assert a.pretrain_hash("student") != ExperimentPlan(examples_per_hour=0.5).pretrain_hash("student")


def test_splits_are_disjoint_and_prefix_nested():
    bench = Benchmark(ExperimentPlan(examples_per_hour=0.02))
    splits = {
        "pretrain": bench.pretrain_corpus(),
        "valid": bench.valid_corpus(),
        "test": bench.test_corpus(n=5),
        "calibration": bench.calibration_corpus(),
        "adapt": bench.adaptation_corpus("L5", 20)[0],
        "adapt-valid": bench.adaptation_corpus("L5", 20)[1],
    }
    seen = {}
    for name, m in splits.items():
        for ex in m:
            key = (ex.lang, ex.text, ex.frames.tobytes())
            assert key not in seen, (name, seen.get(key))
            seen[key] = name
    small, big = bench.adaptation_corpus("L5", 5)[0], splits["adapt"]
    assert [e.text for e in small] == [e.text for e in big][:5]


def test_pretrain_corpus_follows_hours():
    bench = Benchmark(ExperimentPlan(examples_per_hour=0.05))
    counts = {lang: len(m) for lang, m in bench.pretrain_corpus().by_language().items()}
    hours = bench.hours()
    order = sorted(hours, key=hours.get)
    assert [counts[lang] for lang in order] == sorted(counts.values())


def test_prepare_student_variants(tiny_config, vocab):
    base = build_model(tiny_config, vocab, seed=0)
    assert prepare_student(base, "ft", "L5", 0).ff_variant == "plain"
    assert prepare_student(base, "lora_ft", "L5", 0).ff_variant == "lora"
    m = prepare_student(base, "distilwhisper", "L5", 0)
    assert m.ff_variant == "clsr" and m.expert_languages == ["L5"]
    assert base.ff_variant == "plain"
    with pytest.raises(ValueError):
        prepare_student(base, "adapters", "L5", 0)


def test_load_or_pretrain_caches(tmp_path):
    plan = ExperimentPlan(examples_per_hour=0.005, valid_per_domain=1,
                          student=PretrainSpec(ArchSpec(1, 16, heads=2), epochs=1))
    bench = Benchmark(plan)
    a = load_or_pretrain(bench, "student", tmp_path)
    assert [p.name for p in tmp_path.iterdir()] == [f"student-{plan.pretrain_hash('student')}"]
    b = load_or_pretrain(bench, "student", tmp_path)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_mean_by():
    class R:
        def __init__(self, mode, w):
            self.mode, self.test_wer = mode, w

    assert mean_by([R("a", 1.0), R("a", 3.0), R("b", 5.0)], lambda r: r.mode) == {"a": 2.0, "b": 5.0}
