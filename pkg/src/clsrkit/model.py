"""A miniature Whisper-shaped encoder-decoder.

Convolutional stem (k=3 stride 1, then k=3 stride 2, GELU after each),
sinusoidal encoder positions, learned decoder positions, pre-norm blocks,
final layer norms on both stacks and a tied output projection. The
decoder is conditioned through the forced prefix
``<|startoftranscript|> <|lang|> <|transcribe|> <|notimestamps|>``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .clsr import ClsrLayer, RouteContext, gate_width, per_language_overhead
from .lora import LoraFeedForward, lora_parameter_count
from .nn import NEG_INF, FeedForward, LayerNorm, Module, ModuleDict, MultiHeadAttention, sinusoids
from .numcore import Parameter, Tensor

FF_VARIANTS = ("plain", "clsr", "lora")
PREFIX_LEN = 4

SPECIAL_TOKENS = (
    "<|endoftext|>",
    "<|startoftranscript|>",
    "<|pad|>",
    "<|transcribe|>",
    "<|translate|>",
    "<|nospeech|>",
    "<|notimestamps|>",
)


class Vocabulary:
    """Character-level text tokens followed by the special tokens.

    Text ids are ``0 .. n_text-1``; special and language-token ids come
    after them, so the two sets never overlap.
    """

    def __init__(self, characters: str, languages: Sequence[str]):
        chars = sorted(set(characters))
        if not chars:
            raise ValueError("empty character set")
        self.characters = "".join(chars)
        self.languages = list(languages)
        if len(set(self.languages)) != len(self.languages):
            raise ValueError("duplicate language tags")
        self._char_to_id = {c: i for i, c in enumerate(chars)}
        specials = list(SPECIAL_TOKENS) + [f"<|{lang}|>" for lang in self.languages]
        self.special_ids = {tok: len(chars) + i for i, tok in enumerate(specials)}
        self.size = len(chars) + len(specials)

    @property
    def n_text(self) -> int:
        return len(self.characters)

    @property
    def eot(self) -> int:
        return self.special_ids["<|endoftext|>"]

    @property
    def sot(self) -> int:
        return self.special_ids["<|startoftranscript|>"]

    @property
    def pad(self) -> int:
        return self.special_ids["<|pad|>"]

    @property
    def transcribe(self) -> int:
        return self.special_ids["<|transcribe|>"]

    @property
    def notimestamps(self) -> int:
        return self.special_ids["<|notimestamps|>"]

    def lang_token(self, lang: str) -> int:
        try:
            return self.special_ids[f"<|{lang}|>"]
        except KeyError:
            raise KeyError(f"unknown language tag {lang!r}") from None

    def prefix(self, lang: str) -> list[int]:
        return [self.sot, self.lang_token(lang), self.transcribe, self.notimestamps]

    def encode(self, text: str) -> list[int]:
        try:
            return [self._char_to_id[c] for c in text]
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.characters[i] for i in ids if 0 <= i < self.n_text)

    def is_special(self, token: int) -> bool:
        return token >= self.n_text

    def to_dict(self) -> dict:
        return {"characters": self.characters, "languages": self.languages}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["characters"], d["languages"])


@dataclass
class ModelConfig:
    layers: int
    width: int
    heads: int
    vocab_size: int
    max_src_len: int
    max_tgt_len: int
    frame_dim: int
    ff_dim: int | None = None
    lora_rank: int = 4
    gate_dim: int | None = None

    def __post_init__(self):
        if self.ff_dim is None:
            self.ff_dim = 4 * self.width
        if self.gate_dim is None:
            self.gate_dim = gate_width(self.width)
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 2:
            raise ValueError("width must be even for sinusoidal positions")
        for name in ("layers", "width", "heads", "vocab_size", "max_src_len", "max_tgt_len", "frame_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def n_positions(self) -> int:
        """Decoder position table: prefix + content + end token."""
        return PREFIX_LEN + self.max_tgt_len + 1

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def backbone_parameter_count(self) -> int:
        """Closed-form parameter count of the plain model.

        stem: 3*f*d + d + 3*d*d + d
        encoder layer: 2 LN (4d) + attention 4(d^2 + d) + FF (2*d*h + h + d)
        decoder layer: 3 LN (6d) + 2 attentions 8(d^2 + d) + FF
        plus encoder/decoder final LN (4d), token embedding V*d (tied) and
        learned decoder positions P*d.
        """
        d, h, f, L = self.width, self.ff_dim, self.frame_dim, self.layers
        ff = 2 * d * h + h + d
        attn = 4 * (d * d + d)
        stem = 3 * f * d + d + 3 * d * d + d
        enc = L * (4 * d + attn + ff)
        dec = L * (6 * d + 2 * attn + ff)
        return stem + enc + dec + 4 * d + self.vocab_size * d + self.n_positions * d

    def clsr_overhead_per_language(self) -> int:
        return 2 * self.layers * per_language_overhead(self.width, self.ff_dim, self.gate_dim)

    def lora_overhead(self) -> int:
        return 2 * self.layers * lora_parameter_count(self.width, self.ff_dim, self.lora_rank)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.attn_ln = LayerNorm(cfg.width)
        self.attn = MultiHeadAttention(cfg.width, cfg.heads, rng)
        self.ff_ln = LayerNorm(cfg.width)
        self.ff = FeedForward(cfg.width, cfg.ff_dim, rng)

    def __call__(self, x, bias, ctx):
        h = self.attn_ln(x)
        x = x + self.attn(h, h, bias)
        return x + self.ff(self.ff_ln(x), ctx)


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.attn_ln = LayerNorm(cfg.width)
        self.attn = MultiHeadAttention(cfg.width, cfg.heads, rng)
        self.cross_ln = LayerNorm(cfg.width)
        self.cross = MultiHeadAttention(cfg.width, cfg.heads, rng)
        self.ff_ln = LayerNorm(cfg.width)
        self.ff = FeedForward(cfg.width, cfg.ff_dim, rng)

    def __call__(self, x, memory, self_bias, cross_bias, ctx):
        h = self.attn_ln(x)
        x = x + self.attn(h, h, self_bias)
        x = x + self.cross(self.cross_ln(x), memory, cross_bias)
        return x + self.ff(self.ff_ln(x), ctx)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        d, f = cfg.width, cfg.frame_dim
        self.conv1 = Parameter(rng.uniform(-1, 1, (3, f, d)) / np.sqrt(3 * f))
        self.conv1_bias = Parameter(np.zeros(d))
        self.conv2 = Parameter(rng.uniform(-1, 1, (3, d, d)) / np.sqrt(3 * d))
        self.conv2_bias = Parameter(np.zeros(d))
        self.layers = ModuleDict({str(i): EncoderLayer(cfg, rng) for i in range(cfg.layers)})
        self.ln_post = LayerNorm(d)
        self.positions = sinusoids(cfg.max_src_len, d)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.token_embedding = Parameter(rng.normal(0, 0.1, (cfg.vocab_size, cfg.width)))
        self.positional_embedding = Parameter(rng.normal(0, 0.1, (cfg.n_positions, cfg.width)))
        self.layers = ModuleDict({str(i): DecoderLayer(cfg, rng) for i in range(cfg.layers)})
        self.ln = LayerNorm(cfg.width)


@dataclass
class Batch:
    """Padded, teacher-forced view of a list of examples."""

    frames: np.ndarray  # (B, N, frame_dim)
    frame_lens: np.ndarray  # (B,)
    tokens: np.ndarray  # (B, T) decoder input incl. prefix
    targets: np.ndarray  # (B, T) next-token targets, pad where not scored
    langs: list[str]
    ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.langs)

    def content_mask(self, vocab: Vocabulary) -> np.ndarray:
        """Decoder positions whose input token is transcript text."""
        return self.tokens < vocab.n_text

    def target_mask(self, vocab: Vocabulary) -> np.ndarray:
        return self.targets != vocab.pad


def collate(examples, vocab: Vocabulary) -> Batch:
    """Build a padded batch from objects with ``frames``, ``text``, ``lang``."""
    frames = [np.asarray(e.frames) for e in examples]
    n = max(f.shape[0] for f in frames)
    dim = frames[0].shape[1]
    fr = np.zeros((len(frames), n, dim), dtype=np.float32)
    for i, f in enumerate(frames):
        fr[i, : f.shape[0]] = f
    seqs = [vocab.encode(e.text) for e in examples]
    t = PREFIX_LEN + max(len(s) for s in seqs)
    tokens = np.full((len(seqs), t), vocab.pad, dtype=np.int64)
    targets = np.full((len(seqs), t), vocab.pad, dtype=np.int64)
    for i, (e, s) in enumerate(zip(examples, seqs)):
        full = vocab.prefix(e.lang) + s
        tokens[i, : len(full)] = full
        targets[i, PREFIX_LEN - 1 : PREFIX_LEN - 1 + len(s)] = s
        targets[i, PREFIX_LEN - 1 + len(s)] = vocab.eot
    return Batch(
        fr,
        np.array([f.shape[0] for f in frames]),
        tokens,
        targets,
        [e.lang for e in examples],
        [getattr(e, "utterance_id", str(i)) for i, e in enumerate(examples)],
    )


class Seq2SeqModel(Module):
    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        super().__init__()
        if vocab.size != config.vocab_size:
            raise ValueError(f"vocabulary has {vocab.size} tokens, config says {config.vocab_size}")
        rng = np.random.default_rng(seed)
        self.config = config
        self.vocab = vocab
        self.seed = seed
        self.ff_variant = "plain"
        self.expert_languages: list[str] = []
        self.metadata: dict = {}
        self.encoder = Encoder(config, rng)
        self.decoder = Decoder(config, rng)

    # -- feed-forward slots ---------------------------------------------------
    def ff_slots(self) -> list[tuple[str, Module]]:
        out = []
        for stack in ("encoder", "decoder"):
            for i, layer in getattr(self, stack).layers.items():
                out.append((f"{stack}.layers.{i}.ff", layer))
        return out

    def attach_clsr(self, languages: Sequence[str], seed: int | None = None) -> None:
        if not languages:
            raise ValueError("CLSR needs at least one language")
        unknown = [lang for lang in languages if f"<|{lang}|>" not in self.vocab.special_ids]
        if unknown:
            raise KeyError(f"languages {unknown} are not in the vocabulary")
        rng = np.random.default_rng(self.seed + 1 if seed is None else seed)
        for _, layer in self.ff_slots():
            if isinstance(layer.ff, ClsrLayer):
                from .clsr import init_experts_from_shared

                new = [lang for lang in languages if lang not in layer.ff.experts]
                init_experts_from_shared(layer.ff, new, rng)
            elif type(layer.ff) is FeedForward:
                layer.ff = ClsrLayer(layer.ff, languages, rng, self.config.gate_dim)
            else:
                raise ValueError("CLSR cannot be combined with another feed-forward variant")
        self.ff_variant = "clsr"
        self.expert_languages = sorted(set(self.expert_languages) | set(languages))

    def attach_lora(self, rank: int | None = None, seed: int | None = None) -> None:
        rank = rank or self.config.lora_rank
        rng = np.random.default_rng(self.seed + 2 if seed is None else seed)
        for _, layer in self.ff_slots():
            if type(layer.ff) is not FeedForward:
                raise ValueError("LoRA wraps plain feed-forward slots only")
            layer.ff = LoraFeedForward(layer.ff, rank, rng)
        self.config.lora_rank = rank
        self.ff_variant = "lora"

    # -- forward ----------------------------------------------------------------
    def _ctx(self, ctx: RouteContext | None, langs) -> RouteContext:
        if ctx is None:
            ctx = RouteContext()
        if self.ff_variant == "clsr":
            uniq = set(langs)
            if len(uniq) != 1:
                raise ValueError("a CLSR forward pass needs a single-language batch")
            lang = uniq.pop()
            if lang not in self.expert_languages:
                raise KeyError(f"no language expert loaded for {lang!r}")
            ctx.lang = lang
        return ctx

    def encode_batch(self, frames: np.ndarray, frame_lens: np.ndarray, ctx: RouteContext | None = None):
        """Return encoder memory (B, S, d) and the valid-position mask (B, S)."""
        enc = self.encoder
        b, n, _ = frames.shape
        if n > 2 * self.config.max_src_len:
            raise ValueError(f"input of {n} frames exceeds 2 * max_src_len = {2 * self.config.max_src_len}")
        frame_lens = np.asarray(frame_lens)
        in_mask = (np.arange(n)[None, :] < frame_lens[:, None])[..., None]
        x = Tensor(frames.astype(enc.conv1.dtype, copy=False))
        x = nc.gelu(nc.conv1d(x, enc.conv1, enc.conv1_bias, stride=1))
        # keep padded positions at zero so batched and single-example stems agree
        x = x * Tensor(in_mask.astype(x.dtype))
        x = nc.gelu(nc.conv1d(x, enc.conv2, enc.conv2_bias, stride=2))
        s = x.shape[1]
        src_mask = np.arange(s)[None, :] < -(-frame_lens[:, None] // 2)
        x = x + Tensor(enc.positions[:s].astype(x.dtype))
        bias = np.where(src_mask, 0.0, NEG_INF)[:, None, None, :]
        if ctx is not None:
            ctx.token_mask = src_mask
        for i, layer in enc.layers.items():
            if ctx is not None:
                ctx.layer_name = f"encoder.{i}"
            x = layer(x, bias, ctx)
        return enc.ln_post(x), src_mask

    def decode_batch(self, memory: Tensor, src_mask: np.ndarray, tokens: np.ndarray, ctx: RouteContext | None = None) -> Tensor:
        """Causal teacher-forced logits (B, T, V)."""
        x = self.decode_hidden(memory, src_mask, tokens, ctx)
        proj = self.decoder._modules.get("output_projection")
        if proj is not None:
            return proj(x)
        return nc.linear(x, self.decoder.token_embedding)

    def decode_hidden(self, memory: Tensor, src_mask: np.ndarray, tokens: np.ndarray, ctx: RouteContext | None = None) -> Tensor:
        """Final-norm decoder states (B, T, d), the input of the output projection."""
        dec = self.decoder
        b, t = tokens.shape
        if t > self.config.n_positions:
            raise ValueError(f"decoder sequence of {t} exceeds {self.config.n_positions} positions")
        x = nc.embedding(dec.token_embedding, tokens) + dec.positional_embedding[:t]
        key_ok = tokens != self.vocab.pad
        causal = np.tril(np.ones((t, t), dtype=bool))
        self_bias = np.where(causal[None, None] & key_ok[:, None, None, :], 0.0, NEG_INF)
        cross_bias = np.where(src_mask, 0.0, NEG_INF)[:, None, None, :]
        if ctx is not None:
            ctx.token_mask = tokens < self.vocab.n_text
        for i, layer in dec.layers.items():
            if ctx is not None:
                ctx.layer_name = f"decoder.{i}"
            x = layer(x, memory, self_bias, cross_bias, ctx)
        return dec.ln(x)

    def forward(self, batch: Batch, ctx: RouteContext | None = None) -> Tensor:
        ctx = self._ctx(ctx, batch.langs)
        memory, src_mask = self.encode_batch(batch.frames, batch.frame_lens, ctx)
        return self.decode_batch(memory, src_mask, batch.tokens, ctx)

    # -- checkpoints ----------------------------------------------------------
    def trainable_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "ff_variant": self.ff_variant,
            "expert_languages": self.expert_languages,
            "vocab": self.vocab.to_dict(),
            "seed": self.seed,
        }


def build_model(config: ModelConfig, vocab: Vocabulary, ff_variant: str = "plain", languages: Sequence[str] = (), seed: int = 0) -> Seq2SeqModel:
    """Deterministically initialise a model with the requested feed-forward variant."""
    if ff_variant not in FF_VARIANTS:
        raise ValueError(f"unknown feed-forward variant {ff_variant!r}")
    model = Seq2SeqModel(config, vocab, seed)
    if ff_variant == "clsr":
        if not languages:
            raise ValueError("the clsr variant needs at least one language")
        model.attach_clsr(languages)
    elif ff_variant == "lora":
        model.attach_lora()
    return model


def encode(model: Seq2SeqModel, frames, lang: str | None = None) -> Tensor:
    """Encoder memory for one utterance: (len, frame_dim) -> (ceil(len/2), d)."""
    frames = np.asarray(frames)
    ctx = model._ctx(None, [lang]) if model.ff_variant == "clsr" else None
    with nc.no_grad():
        mem, _ = model.encode_batch(frames[None], np.array([frames.shape[0]]), ctx)
    return Tensor(mem.data[0])


def decode_logits(model: Seq2SeqModel, memory: Tensor, tokens: Sequence[int], lang: str) -> Tensor:
    """Teacher-forced logits (T, V) for one utterance.

    ``tokens`` must start with the forced prefix for ``lang``.
    """
    tokens = list(tokens)
    if tokens[:PREFIX_LEN] != model.vocab.prefix(lang):
        raise ValueError("decoder input must start with <|startoftranscript|> <|lang|> <|transcribe|> <|notimestamps|>")
    mem = memory.data[None] if memory.ndim == 2 else memory.data
    ctx = model._ctx(None, [lang]) if model.ff_variant == "clsr" else None
    with nc.no_grad():
        logits = model.decode_batch(Tensor(mem), np.ones(mem.shape[:2], dtype=bool), np.array([tokens]), ctx)
    return Tensor(logits.data[0])


def transcribe_batch(model: Seq2SeqModel, frames_list, langs: Sequence[str], max_len: int | None = None) -> list[list[int]]:
    """Greedy decoding for a batch; returns text-token ids without specials."""
    vocab = model.vocab
    max_len = model.config.max_tgt_len if max_len is None else max_len
    b = len(frames_list)
    n = max(f.shape[0] for f in frames_list)
    fr = np.zeros((b, n, frames_list[0].shape[1]), dtype=np.float32)
    for i, f in enumerate(frames_list):
        fr[i, : f.shape[0]] = f
    lens = np.array([f.shape[0] for f in frames_list])
    allowed = np.zeros(vocab.size, dtype=bool)
    allowed[: vocab.n_text] = True
    allowed[vocab.eot] = True
    with nc.no_grad():
        ctx = model._ctx(RouteContext(), langs) if model.ff_variant == "clsr" else None
        memory, src_mask = model.encode_batch(fr, lens, ctx)
        dec = IncrementalDecoder(model, memory, src_mask, langs)
        tokens = np.array([vocab.prefix(lang) for lang in langs], dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        out: list[list[int]] = [[] for _ in range(b)]
        for _ in range(max_len + 1):
            logits = dec.step(tokens)
            nxt = np.where(allowed, logits, -np.inf).argmax(axis=-1)
            for i in range(b):
                if done[i]:
                    continue
                if nxt[i] == vocab.eot or len(out[i]) >= max_len:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all():
                break
            tokens = np.where(done, vocab.pad, nxt)[:, None]
    return out


class IncrementalDecoder:
    """Greedy-decoding helper that caches self-attention keys/values.

    Each :meth:`step` feeds only the new tokens and returns the logits of
    the last position; the result matches a full teacher-forced pass up to
    floating-point rounding. No gradients are tracked.
    """

    def __init__(self, model: Seq2SeqModel, memory: Tensor, src_mask: np.ndarray, langs: Sequence[str]):
        self.model = model
        self.langs = list(langs)
        self.layers = [layer for _, layer in model.decoder.layers.items()]
        self.cross_kv = [(l.cross._split(l.cross.key(memory)), l.cross._split(l.cross.value(memory))) for l in self.layers]
        self.cross_bias = np.where(src_mask, 0.0, NEG_INF)[:, None, None, :]
        self.cache: list[tuple[Tensor, Tensor] | None] = [None] * len(self.layers)
        self.key_ok = np.zeros((memory.shape[0], 0), dtype=bool)

    @property
    def length(self) -> int:
        return self.key_ok.shape[1]

    def step(self, tokens: np.ndarray) -> np.ndarray:
        model, dec = self.model, self.model.decoder
        vocab = model.vocab
        b, n = tokens.shape
        t0 = self.length
        if t0 + n > model.config.n_positions:
            raise ValueError(f"decoder sequence of {t0 + n} exceeds {model.config.n_positions} positions")
        ctx = model._ctx(RouteContext(), self.langs) if model.ff_variant == "clsr" else None
        with nc.no_grad():
            x = nc.embedding(dec.token_embedding, tokens) + dec.positional_embedding[t0 : t0 + n]
            self.key_ok = np.concatenate([self.key_ok, tokens != vocab.pad], axis=1)
            causal = np.arange(t0 + n)[None, :] <= (t0 + np.arange(n))[:, None]
            self_bias = np.where(causal[None, None] & self.key_ok[:, None, None, :], 0.0, NEG_INF)
            if ctx is not None:
                ctx.token_mask = tokens < vocab.n_text
            for i, layer in enumerate(self.layers):
                if ctx is not None:
                    ctx.layer_name = f"decoder.{i}"
                h = layer.attn_ln(x)
                att = layer.attn
                k, v = att._split(att.key(h)), att._split(att.value(h))
                if self.cache[i] is not None:
                    k = nc.concat([self.cache[i][0], k], axis=2)
                    v = nc.concat([self.cache[i][1], v], axis=2)
                self.cache[i] = (k, v)
                x = x + att.attend(att._split(att.query(h)), k, v, self_bias)
                ck, cv = self.cross_kv[i]
                x = x + layer.cross.attend(layer.cross._split(layer.cross.query(layer.cross_ln(x))), ck, cv, self.cross_bias)
                x = x + layer.ff(layer.ff_ln(x), ctx)
            x = dec.ln(x[:, -1:])
            proj = dec._modules.get("output_projection")
            logits = proj(x) if proj is not None else nc.linear(x, dec.token_embedding)
        return logits.data[:, -1]


def greedy_transcribe(model: Seq2SeqModel, frames, lang: str) -> list[int]:
    return transcribe_batch(model, [np.asarray(frames)], [lang])[0]


def configure_trainable(model: Seq2SeqModel, mode: str, lang: str | None = None) -> None:
    """Set frozen flags for a training mode.

    ft: everything trains. lora_ft: only adapter factors. clsr_ft and
    distilwhisper: only the experts and gate of ``lang``.
    """
    params = dict(model.named_parameters())
    if mode == "ft":
        if model.ff_variant != "plain":
            raise ValueError("ft mode expects a plain model")
        for p in params.values():
            p.unfreeze()
        return
    for p in params.values():
        p.freeze()
    if mode == "lora_ft":
        if model.ff_variant != "lora":
            raise ValueError("lora_ft mode needs LoRA-wrapped feed-forward slots")
        for n, p in params.items():
            if n.endswith(".lora_A") or n.endswith(".lora_B"):
                p.unfreeze()
    elif mode in ("clsr_ft", "distilwhisper"):
        if model.ff_variant != "clsr":
            raise ValueError(f"{mode} mode needs CLSR feed-forward slots")
        if lang not in model.expert_languages:
            raise KeyError(f"no expert registered for language {lang!r}")
        for n, p in params.items():
            if f".experts.{lang}." in n or f".gates.{lang}." in n:
                p.unfreeze()
    else:
        raise ValueError(f"unknown training mode {mode!r}")


def save_checkpoint(model: Seq2SeqModel, directory: str | os.PathLike, metadata: dict | None = None) -> Path:
    """Directory checkpoint: ``manifest.json`` + one tensor file per parameter."""
    root = Path(directory)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    files = {}
    for name, p in model.named_parameters():
        fname = f"tensors/{name}.bin"
        nc.save_tensor(root / fname, p)
        files[name] = fname
    manifest = model.manifest()
    manifest["tensors"] = files
    manifest["metadata"] = metadata or {}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_checkpoint(directory: str | os.PathLike, strict: bool = True) -> Seq2SeqModel:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = ModelConfig(**manifest["config"])
    vocab = Vocabulary.from_dict(manifest["vocab"])
    model = Seq2SeqModel(cfg, vocab, manifest.get("seed", 0))
    model.metadata = manifest.get("metadata", {})
    if manifest["ff_variant"] == "clsr":
        model.attach_clsr(manifest["expert_languages"])
    elif manifest["ff_variant"] == "lora":
        model.attach_lora(cfg.lora_rank)
    model.load_state_dict({n: nc.load_tensor(root / f) for n, f in manifest["tensors"].items()}, strict)
    return model
