import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clsrkit import numcore as nc
from clsrkit.distill import TrainConfig, Trainer
from clsrkit.model import (
    PREFIX_LEN,
    ModelConfig,
    Vocabulary,
    build_model,
    collate,
    decode_logits,
    encode,
    greedy_transcribe,
    load_checkpoint,
    save_checkpoint,
    transcribe_batch,
)

from conftest import random_frames


def test_vocabulary_layout(vocab):
    assert vocab.n_text == len(vocab.characters)
    specials = set(vocab.special_ids.values())
    assert specials.isdisjoint(range(vocab.n_text))
    assert vocab.prefix("L3") == [vocab.sot, vocab.lang_token("L3"), vocab.transcribe, vocab.notimestamps]
    assert vocab.decode(vocab.encode("ab c") + [vocab.eot]) == "ab c"
    with pytest.raises(KeyError):
        vocab.lang_token("xx")
    with pytest.raises(ValueError):
        vocab.encode("A")
    assert Vocabulary.from_dict(vocab.to_dict()).special_ids == vocab.special_ids


def test_parameter_count_matches_closed_form(vocab):
    cfg = ModelConfig(layers=2, width=64, heads=4, vocab_size=vocab.size, max_src_len=64, max_tgt_len=32, frame_dim=16)
    m = build_model(cfg, vocab)
    assert sum(p.size for p in m.parameters()) == cfg.backbone_parameter_count()


def _independent_count(L, d, h, f, V, P):
    # tally of every weight matrix and vector by hand
    per_enc = 2 * 2 * d + 4 * d * d + 4 * d + d * h + h + h * d + d
    per_dec = 3 * 2 * d + 8 * d * d + 8 * d + d * h + h + h * d + d
    stem = 3 * f * d + d + 3 * d * d + d
    return stem + L * (per_enc + per_dec) + 2 * 2 * d + V * d + P * d


@pytest.mark.parametrize("L, d, heads", [(1, 16, 2), (2, 64, 4), (3, 48, 6)])
def test_closed_form_against_hand_tally(vocab, L, d, heads):
    cfg = ModelConfig(layers=L, width=d, heads=heads, vocab_size=vocab.size, max_src_len=10, max_tgt_len=7, frame_dim=5)
    expected = _independent_count(L, d, 4 * d, 5, vocab.size, PREFIX_LEN + 7 + 1)
    assert cfg.backbone_parameter_count() == expected


def test_invalid_configs(vocab):
    with pytest.raises(ValueError):
        ModelConfig(layers=1, width=30, heads=4, vocab_size=vocab.size, max_src_len=8, max_tgt_len=8, frame_dim=4)
    cfg = ModelConfig(layers=1, width=16, heads=2, vocab_size=vocab.size, max_src_len=8, max_tgt_len=8, frame_dim=4)
    with pytest.raises(ValueError):
        build_model(cfg, vocab, "clsr", [])
    with pytest.raises(ValueError):
        build_model(cfg, vocab, "adapter")


def test_same_seed_same_parameters(tiny_config, vocab):
    a, b = build_model(tiny_config, vocab, seed=3), build_model(tiny_config, vocab, seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)


def test_stem_halves_200_frames(tiny_config, vocab):
    m = build_model(tiny_config, vocab)
    mem = encode(m, random_frames(np.random.default_rng(0), 200))
    assert mem.shape == (100, tiny_config.width)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 60))
def test_stem_length_contract(n):
    vocab = Vocabulary("ab ", ["L1"])
    cfg = ModelConfig(layers=1, width=16, heads=2, vocab_size=vocab.size, max_src_len=32, max_tgt_len=8, frame_dim=3)
    m = build_model(cfg, vocab)
    mem = encode(m, np.ones((n, 3), dtype=np.float32))
    assert mem.shape[0] == math.ceil(n / 2)


def test_encoder_degenerate_and_positional(tiny_config, vocab):
    m = build_model(tiny_config, vocab)
    zero = encode(m, np.zeros((20, 16), dtype=np.float32)).data
    assert np.isfinite(zero).all()
    x = random_frames(np.random.default_rng(1), 20)
    a = encode(m, x).data
    assert np.array_equal(a, encode(m, x).data)
    perm = np.random.default_rng(2).permutation(20)
    assert not np.allclose(a, encode(m, x[perm]).data)


def test_over_length_input_rejected(tiny_config, vocab):
    m = build_model(tiny_config, vocab)
    with pytest.raises(ValueError):
        encode(m, np.zeros((2 * tiny_config.max_src_len + 1, 16), dtype=np.float32))


def test_causality(tiny_config, vocab):
    m = build_model(tiny_config, vocab)
    mem = encode(m, random_frames(np.random.default_rng(3), 16))
    toks = vocab.prefix("L2") + vocab.encode("abcab")
    base = decode_logits(m, mem, toks, "L2").data
    for t in range(PREFIX_LEN, len(toks)):
        changed = list(toks)
        changed[t] = vocab.encode("p")[0] if toks[t] != vocab.encode("p")[0] else vocab.encode("a")[0]
        out = decode_logits(m, mem, changed, "L2").data
        assert np.array_equal(out[:t], base[:t])
        assert not np.array_equal(out[t:], base[t:])


def test_prefix_only_gives_first_content_logits(tiny_config, vocab):
    m = build_model(tiny_config, vocab)
    mem = encode(m, random_frames(np.random.default_rng(4), 10))
    assert decode_logits(m, mem, vocab.prefix("L1"), "L1").shape == (PREFIX_LEN, vocab.size)
    with pytest.raises(ValueError):
        decode_logits(m, mem, vocab.prefix("L1")[1:], "L1")


def test_step_by_step_equals_full_sequence(vocab):
    with nc.precision(np.float64):
        cfg = ModelConfig(layers=2, width=32, heads=4, vocab_size=vocab.size, max_src_len=64, max_tgt_len=16, frame_dim=16)
        m = build_model(cfg, vocab, seed=5)
        mem = encode(m, random_frames(np.random.default_rng(5), 18).astype(np.float64))
        toks = vocab.prefix("L4") + vocab.encode("hello")[:0] + vocab.encode("abc dp")
        full = decode_logits(m, mem, toks, "L4").data
        for t in range(PREFIX_LEN, len(toks) + 1):
            step = decode_logits(m, mem, toks[:t], "L4").data[-1]
            np.testing.assert_allclose(step, full[t - 1], rtol=1e-10, atol=1e-12)


def test_prefix_conditioning(tiny_config, vocab):
    m = build_model(tiny_config, vocab)
    mem = encode(m, random_frames(np.random.default_rng(6), 12))
    text = vocab.encode("abc")
    a = decode_logits(m, mem, vocab.prefix("L1") + text, "L1").data
    b = decode_logits(m, mem, vocab.prefix("L5") + text, "L5").data
    # position 0 sees only <|startoftranscript|>; later positions see the language token
    assert np.array_equal(a[0], b[0])
    assert not np.allclose(a[1:], b[1:])


def test_greedy_terminates_and_is_deterministic(tiny_config, vocab):
    m = build_model(tiny_config, vocab, seed=1)
    x = random_frames(np.random.default_rng(7), 30)
    out = greedy_transcribe(m, x, "L1")
    assert len(out) <= tiny_config.max_tgt_len
    assert all(t < vocab.n_text for t in out)
    assert out == greedy_transcribe(m, x, "L1")


def test_batched_transcription_matches_single(tiny_config, vocab, toy_corpus):
    m = build_model(tiny_config, vocab, seed=2)
    exs = list(toy_corpus.filter(lang="L3"))
    batch = transcribe_batch(m, [e.frames for e in exs], [e.lang for e in exs], max_len=10)
    single = [transcribe_batch(m, [e.frames], [e.lang], max_len=10)[0] for e in exs]
    assert batch == single


def test_overfit_single_example(vocab, roster):
    from clsrkit.data import generate_corpus

    ex = list(generate_corpus(roster[0], 1, "indomain", 123))
    cfg = ModelConfig(layers=1, width=32, heads=4, vocab_size=vocab.size, max_src_len=64, max_tgt_len=32, frame_dim=16)
    m = build_model(cfg, vocab, seed=0)
    tr = Trainer(m, TrainConfig(mode="ft", lr=3e-3, label_smoothing=0.0), total_steps=300, warmup_steps=10)
    batch = collate(ex, vocab)
    for _ in range(300):
        tr.train_step(batch)
    assert vocab.decode(greedy_transcribe(m, ex[0].frames, ex[0].lang)) == ex[0].text


def test_checkpoint_roundtrip(tmp_path, tiny_config, vocab, toy_corpus):
    for variant in ("plain", "clsr", "lora"):
        m = build_model(tiny_config, vocab, variant, ["L1", "L2"], seed=4)
        # move some adapter weights away from their zero init
        for name, p in m.named_parameters():
            if "lora_B" in name or ".gates." in name:
                p.data = p.data + 0.01
        save_checkpoint(m, tmp_path / variant, {"note": variant})
        back = load_checkpoint(tmp_path / variant)
        assert back.ff_variant == variant
        for (na, pa), (nb, pb) in zip(m.named_parameters(), back.named_parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)
        b = collate(list(toy_corpus.filter(lang="L1"))[:3], vocab)
        assert np.array_equal(m.forward(b).data, back.forward(b).data)


def test_backbone_checkpoint_loads_into_clsr_names(tiny_config, vocab):
    plain = build_model(tiny_config, vocab)
    clsr = build_model(tiny_config, vocab, "clsr", ["L1"])
    plain_names = {n for n, _ in plain.named_parameters()}
    assert plain_names <= {n for n, _ in clsr.named_parameters()}


def naive_greedy(model, frames, lang, max_len):
    """Reference decoder: full teacher-forced recomputation at every step."""
    vocab = model.vocab
    mem = encode(model, frames, lang)
    toks = vocab.prefix(lang)
    out = []
    while len(out) < max_len:
        logits = decode_logits(model, mem, toks, lang).data[-1].copy()
        special = np.arange(vocab.size) >= vocab.n_text
        special[vocab.eot] = False
        logits[special] = -np.inf
        nxt = int(logits.argmax())
        if nxt == vocab.eot:
            break
        out.append(nxt)
        toks = toks + [nxt]
    return out


@pytest.mark.parametrize("variant", ["plain", "clsr", "lora"])
def test_cached_decoding_matches_full_recomputation(vocab, toy_corpus, variant):
    with nc.precision(np.float64):
        cfg = ModelConfig(layers=2, width=32, heads=4, vocab_size=vocab.size, max_src_len=64, max_tgt_len=20, frame_dim=16)
        m = build_model(cfg, vocab, variant, ["L2"], seed=9)
        rng = np.random.default_rng(0)
        for p in m.parameters():
            p.data = p.data + rng.normal(0, 0.05, p.shape)
        exs = list(toy_corpus.filter(lang="L2"))
        got = transcribe_batch(m, [e.frames.astype(np.float64) for e in exs], ["L2"] * len(exs), max_len=12)
        for e, g in zip(exs, got):
            assert g == naive_greedy(m, e.frames.astype(np.float64), "L2", 12)
