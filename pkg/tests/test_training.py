import copy
import csv

import numpy as np
import pytest

from clsrkit.data import Manifest, generate_corpus
from clsrkit.distill import (
    KdConfig,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    linear_schedule,
    make_batches,
    run_training,
    train_step,
)
from clsrkit.model import ModelConfig, build_model, collate


@pytest.fixture(scope="module")
def small(roster):
    train = generate_corpus(roster[0], 24, "indomain", 21)
    valid = generate_corpus(roster[0], 6, "indomain", 22)
    return train, valid


def snapshot(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


def model_for(mode, cfg, vocab, seed=0):
    variant = {"ft": "plain", "lora_ft": "lora"}.get(mode, "clsr")
    return build_model(cfg, vocab, variant, ["L1", "L2"] if variant == "clsr" else (), seed=seed)


# -- configuration ------------------------------------------------------------


def test_defaults():
    c = TrainConfig()
    assert (c.epochs, c.lr, c.warmup_epochs, c.batch_size) == (10, 1e-4, 1.0, 16)
    assert (c.label_smoothing, c.gate_budget, c.gate_skip, c.kd.beta) == (0.1, 0.5, 0.2, 2.0)


def test_config_validation():
    with pytest.raises(ValueError):
        KdConfig(tau=0.0)
    with pytest.raises(ValueError):
        KdConfig(beta=-1.0)
    with pytest.raises(ValueError):
        KdConfig(loss="mse")
    with pytest.raises(ValueError):
        TrainConfig(mode="adapter")


def test_config_text_roundtrip():
    c = TrainConfig(mode="clsr_ft", lr=3e-4, gate_budget=0.3, kd=KdConfig("kl", 2.0, 1.5), seed=9)
    assert TrainConfig.from_text(c.to_text()) == c


def test_config_text_parsing():
    text = "# adaptation run\nmode = lora_ft\n\nkd.tau = 2\ngate.skip=0.1  # inline\n"
    c = TrainConfig.from_text(text)
    assert (c.mode, c.kd.tau, c.gate_skip) == ("lora_ft", 2.0, 0.1)
    with pytest.raises(KeyError):
        TrainConfig.from_text("kd.temperature = 2")
    with pytest.raises(ValueError, match="line 2"):
        TrainConfig.from_text("mode = ft\nlr 0.1")
    with pytest.raises(ValueError):
        TrainConfig.from_text("epochs = ten")


def test_linear_schedule():
    assert linear_schedule(0, 1.0, 4, 12) == 0.25
    assert linear_schedule(3, 1.0, 4, 12) == 1.0
    assert linear_schedule(4, 1.0, 4, 12) == 1.0
    assert linear_schedule(8, 1.0, 4, 12) == 0.5
    assert linear_schedule(12, 1.0, 4, 12) == 0.0
    lrs = [linear_schedule(s, 1.0, 4, 12) for s in range(4, 13)]
    assert lrs == sorted(lrs, reverse=True)


def test_language_batches_are_pure(toy_corpus):
    batches = make_batches(toy_corpus, 4, np.random.default_rng(0), by_language=True)
    assert all(len({e.lang for e in b}) == 1 for b in batches)
    assert sum(len(b) for b in batches) == len(toy_corpus)


# -- modes --------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["clsr_ft", "lora_ft", "distilwhisper"])
def test_frozen_parameters_unchanged_after_100_steps(mode, tiny_config, vocab, small):
    train, _ = small
    model = model_for(mode, tiny_config, vocab)
    teacher = build_model(tiny_config, vocab, seed=1) if mode == "distilwhisper" else None
    tr = Trainer(model, TrainConfig(mode=mode, lr=1e-3), 100, 10, teacher=teacher, lang="L1")
    before = snapshot(model)
    frozen = {n for n, p in model.named_parameters() if not p.requires_grad}
    batches = make_batches(train, 8, np.random.default_rng(0), False)
    for step in range(100):
        train_step(tr, collate(batches[step % len(batches)], vocab))
    after = snapshot(model)
    assert frozen
    for n in frozen:
        assert np.array_equal(before[n], after[n]), n
    assert any(not np.array_equal(before[n], after[n]) for n in after if n not in frozen)


def test_ft_changes_every_parameter(tiny_config, vocab, small):
    train, _ = small
    model = model_for("ft", tiny_config, vocab)
    tr = Trainer(model, TrainConfig(mode="ft", lr=1e-3), 100, 10)
    before = snapshot(model)
    batches = make_batches(train, 8, np.random.default_rng(0), False)
    for step in range(100):
        tr.train_step(collate(batches[step % len(batches)], vocab))
    unchanged = [n for n, v in snapshot(model).items() if np.array_equal(v, before[n])]
    assert not unchanged


def test_mode_model_mismatch(tiny_config, vocab):
    with pytest.raises(ValueError):
        Trainer(build_model(tiny_config, vocab), TrainConfig(mode="clsr_ft"), 1, 0, lang="L1")
    with pytest.raises(ValueError):
        Trainer(build_model(tiny_config, vocab, "clsr", ["L1"]), TrainConfig(mode="distilwhisper"), 1, 0, lang="L1")
    with pytest.raises(KeyError):
        Trainer(build_model(tiny_config, vocab, "clsr", ["L1"]), TrainConfig(mode="clsr_ft"), 1, 0, lang="L2")


def test_teacher_vocab_mismatch(tiny_config, vocab, roster):
    from clsrkit.model import Vocabulary

    other = Vocabulary(vocab.characters, ["L1", "L2"])
    cfg = ModelConfig(**{**tiny_config.to_dict(), "vocab_size": other.size})
    teacher = build_model(cfg, other)
    with pytest.raises(ValueError):
        Trainer(build_model(tiny_config, vocab, "clsr", ["L1"]), TrainConfig(mode="distilwhisper"), 1, 0, teacher, "L1")


def test_self_distillation_null(tiny_config, vocab, small):
    train, _ = small
    teacher = build_model(tiny_config, vocab, seed=3)
    student = copy.deepcopy(teacher)
    student.attach_clsr(["L1"])
    fresh = copy.deepcopy(student)
    tr = Trainer(student, TrainConfig(mode="distilwhisper", kd=KdConfig("js", 1.0, 2.0)), 10, 0, teacher, "L1")
    lb = tr.train_step(collate(list(train)[:8], vocab))
    assert lb.kd < 1e-6
    kl = Trainer(fresh, TrainConfig(mode="distilwhisper", kd=KdConfig("kl", 1.0, 2.0)), 10, 0, teacher, "L1")
    assert kl.train_step(collate(list(train)[:8], vocab)).kd < 1e-6


def test_teacher_is_never_modified(tiny_config, vocab, small):
    train, _ = small
    teacher = build_model(tiny_config, vocab, seed=4)
    before = snapshot(teacher)
    student = build_model(tiny_config, vocab, "clsr", ["L1"], seed=5)
    tr = Trainer(student, TrainConfig(mode="distilwhisper", lr=1e-2), 20, 0, teacher, "L1")
    for _ in range(20):
        tr.train_step(collate(list(train)[:8], vocab))
    for n, v in snapshot(teacher).items():
        assert np.array_equal(v, before[n])
    assert all(p.grad is None for p in teacher.parameters())


def test_beta_zero_distillation_equals_clsr_ft(tiny_config, vocab, small):
    train, _ = small
    teacher = build_model(tiny_config, vocab, seed=6)
    a = build_model(tiny_config, vocab, "clsr", ["L1"], seed=7)
    b = copy.deepcopy(a)
    ta = Trainer(a, TrainConfig(mode="clsr_ft", lr=1e-2, seed=2), 30, 3, lang="L1")
    tb = Trainer(b, TrainConfig(mode="distilwhisper", lr=1e-2, seed=2, kd=KdConfig(beta=0.0)), 30, 3, teacher, "L1")
    batches = make_batches(train, 8, np.random.default_rng(1), False)
    for step in range(30):
        batch = collate(batches[step % len(batches)], vocab)
        la, lb = ta.train_step(batch), tb.train_step(batch)
        assert la.total == lb.total
        for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(p.data, q.data), (step, n)


def test_divergence_is_reported(tiny_config, vocab, small):
    train, _ = small
    model = build_model(tiny_config, vocab)
    model.decoder.token_embedding.data[...] = np.inf
    tr = Trainer(model, TrainConfig(mode="ft"), 1, 0)
    with pytest.raises((TrainingDiverged, ArithmeticError)):
        tr.train_step(collate(list(train)[:2], vocab))


# -- run_training -------------------------------------------------------------


def test_one_epoch_gives_one_validation(tmp_path, tiny_config, vocab, roster):
    train = generate_corpus(roster[1], 10, "indomain", 1)
    valid = generate_corpus(roster[1], 3, "indomain", 2)
    res = run_training(build_model(tiny_config, vocab), train, valid, TrainConfig(mode="ft", epochs=1), tmp_path)
    assert len(res.metrics) == 1 and res.best_epoch == 1
    assert (tmp_path / "best" / "manifest.json").exists()
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0] == ["epoch", "step", "ce", "gate", "kd", "total", "valid_wer"]
    assert len(rows) == 2


def test_runs_are_deterministic_and_keep_best(tiny_config, vocab, small):
    train, valid = small
    cfg = TrainConfig(mode="clsr_ft", epochs=4, lr=3e-3, batch_size=8)

    def run():
        m = build_model(tiny_config, vocab, "clsr", ["L1"], seed=1)
        return m, run_training(m, train, valid, cfg)

    m1, r1 = run()
    m2, r2 = run()
    assert r1.metrics == r2.metrics
    wers = [row["valid_wer"] for row in r1.metrics]
    assert r1.best_wer == min(wers) <= wers[-1]
    assert r1.best_wer == r1.metrics[r1.best_epoch - 1]["valid_wer"]
    for (_, p), (_, q) in zip(m1.named_parameters(), m2.named_parameters()):
        assert np.array_equal(p.data, q.data)


def test_best_parameters_are_restored(tiny_config, vocab, small):
    from clsrkit.evalbias import evaluate_model

    train, valid = small
    m = build_model(tiny_config, vocab, seed=2)
    res = run_training(m, train, valid, TrainConfig(mode="ft", epochs=3, lr=3e-3, batch_size=8))
    assert evaluate_model(m, valid).mean() == res.best_wer


def test_toy_loss_decreases(vocab, roster):
    cfg = ModelConfig(layers=1, width=32, heads=4, vocab_size=vocab.size, max_src_len=64, max_tgt_len=32, frame_dim=16)
    train = Manifest()
    train.extend(generate_corpus(roster[0], 50, "indomain", 30))
    valid = generate_corpus(roster[0], 4, "indomain", 31)
    # 50 examples at batch 4 is 13 steps per epoch; 16 epochs is ~200 steps
    res = run_training(build_model(cfg, vocab), train, valid,
                       TrainConfig(mode="ft", epochs=16, lr=3e-3, batch_size=4, valid_every=16))
    totals = [row["total"] for row in res.metrics]
    assert all(b < a for a, b in zip(totals, totals[1:])), totals


def test_clsr_run_needs_single_language(tiny_config, vocab, toy_corpus):
    m = build_model(tiny_config, vocab, "clsr", ["L1", "L2"])
    with pytest.raises(ValueError):
        run_training(m, toy_corpus, toy_corpus, TrainConfig(mode="clsr_ft", epochs=1))
    with pytest.raises(ValueError):
        run_training(m, Manifest(), toy_corpus, TrainConfig(mode="clsr_ft", epochs=1), lang="L1")
