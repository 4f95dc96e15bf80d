"""Synthetic multilingual speech-like corpora.

An utterance is a random character string; its "audio" is one codebook
vector per character, repeated twice, plus Gaussian noise, followed by a
short silence margin. Languages of one family share a letter-to-unit map
up to a few swapped letters and a small per-language perturbation, so
decoding needs the language tag and related languages transfer.

Randomness comes from :class:`PortableRNG`, a 64-bit linear congruential
generator (multiplier 6364136223846793005, increment 1442695040888963407,
modulus 2**64) seeded through splitmix64, so corpora are reproducible
across platforms and implementations.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numcore import load_tensor, save_tensor

LCG_MULT = 6364136223846793005
LCG_INC = 1442695040888963407
MASK64 = (1 << 64) - 1

EXAMPLES_PER_HOUR = 20
FRAMES_PER_CHAR = 2
MARGIN_CHARS = 1
DOMAIN_MEAN_LENGTH = {"indomain": 12.0, "outdomain": 36.0}

_BLOCK = 4096


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _jump_tables(n: int) -> tuple[np.ndarray, np.ndarray]:
    mults, incs = [], []
    a, c = 1, 0
    for _ in range(n):
        a = (a * LCG_MULT) & MASK64
        c = (c * LCG_MULT + LCG_INC) & MASK64
        mults.append(a)
        incs.append(c)
    return np.array(mults, dtype=np.uint64), np.array(incs, dtype=np.uint64)


_MULTS, _INCS = _jump_tables(_BLOCK)


class PortableRNG:
    """64-bit LCG. ``uniform`` uses the top 53 bits of each state."""

    def __init__(self, *seeds: int):
        state = 0
        for s in seeds:
            state = splitmix64(state ^ (int(s) & MASK64))
        self.state = state

    def _states(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        pos = 0
        while pos < n:
            k = min(_BLOCK, n - pos)
            s = np.uint64(self.state)
            block = _MULTS[:k] * s + _INCS[:k]
            out[pos : pos + k] = block
            self.state = int(block[-1])
            pos += k
        return out

    def uniform(self, n: int | None = None):
        u = (self._states(1 if n is None else n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if n is None else u

    def normal(self, n: int) -> np.ndarray:
        """Box-Muller (cosine branch) over pairs of uniforms."""
        u = self.uniform(2 * n)
        return np.sqrt(-2.0 * np.log1p(-u[0::2])) * np.cos(2.0 * np.pi * u[1::2])

    def integers(self, high: int, n: int | None = None):
        u = self.uniform(n)
        return int(u * high) if n is None else (u * high).astype(np.int64)

    def poisson(self, mean: float) -> int:
        """Knuth's multiplication method; fine for the small means used here."""
        limit = math.exp(-mean)
        k, p = 0, 1.0
        while True:
            p *= self.uniform()
            if p <= limit:
                return k
            k += 1

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


@dataclass
class SyntheticLanguageSpec:
    lang_id: str
    alphabet: str
    frame_codebook: dict[str, np.ndarray]
    noise_sigma: float
    train_hours_equivalent: float
    seed: int
    family: str = ""
    space_prob: float = 0.2

    def __post_init__(self):
        if not self.alphabet:
            raise ValueError(f"language {self.lang_id}: empty alphabet")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        missing = [c for c in self.alphabet + " " if c not in self.frame_codebook]
        if missing:
            raise ValueError(f"codebook lacks vectors for {missing}")
        vecs = np.stack([np.asarray(self.frame_codebook[c]) for c in self.alphabet + " "])
        d = np.linalg.norm(vecs[:, None] - vecs[None], axis=-1) + np.eye(len(vecs))
        if (d <= 0).any():
            raise ValueError(f"language {self.lang_id}: codebook vectors are not pairwise distinct")

    @property
    def frame_dim(self) -> int:
        return len(next(iter(self.frame_codebook.values())))

    def to_dict(self) -> dict:
        return {
            "lang_id": self.lang_id,
            "alphabet": self.alphabet,
            "frame_codebook": {c: [float(v) for v in vec] for c, vec in self.frame_codebook.items()},
            "noise_sigma": self.noise_sigma,
            "train_hours_equivalent": self.train_hours_equivalent,
            "seed": self.seed,
            "family": self.family,
            "space_prob": self.space_prob,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticLanguageSpec":
        d = dict(d)
        d["frame_codebook"] = {c: np.asarray(v, dtype=np.float64) for c, v in d["frame_codebook"].items()}
        return cls(**d)


@dataclass
class Example:
    utterance_id: str
    lang: str
    frames: np.ndarray
    text: str
    domain: str

    def __post_init__(self):
        if self.domain not in DOMAIN_MEAN_LENGTH:
            raise ValueError(f"unknown domain {self.domain!r}")


class Manifest:
    """Ordered examples with unique utterance ids."""

    def __init__(self, examples: Iterable[Example] = ()):
        self.examples: list[Example] = []
        self._ids: set[str] = set()
        for e in examples:
            self.append(e)

    def append(self, e: Example) -> None:
        if e.utterance_id in self._ids:
            raise ValueError(f"duplicate utterance id {e.utterance_id!r}")
        self._ids.add(e.utterance_id)
        self.examples.append(e)

    def extend(self, other: Iterable[Example]) -> None:
        for e in other:
            self.append(e)

    def __iter__(self):
        return iter(self.examples)

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Manifest(self.examples[i])
        return self.examples[i]

    def languages(self) -> list[str]:
        return sorted({e.lang for e in self.examples})

    def by_language(self) -> dict[str, "Manifest"]:
        out: dict[str, Manifest] = {}
        for e in self.examples:
            out.setdefault(e.lang, Manifest()).append(e)
        return out

    def filter(self, lang: str | None = None, domain: str | None = None) -> "Manifest":
        return Manifest(
            e for e in self.examples if (lang is None or e.lang == lang) and (domain is None or e.domain == domain)
        )


def resource_to_count(train_hours_equivalent: float, examples_per_hour: float = EXAMPLES_PER_HOUR) -> int:
    if train_hours_equivalent <= 0:
        raise ValueError("hours must be positive")
    return max(1, int(math.floor(train_hours_equivalent * examples_per_hour + 0.5)))


def _random_text(rng: PortableRNG, alphabet: str, length: int, space_prob: float) -> str:
    chars: list[str] = []
    for i in range(length):
        u = rng.uniform()
        if 0 < i < length - 1 and chars[-1] != " " and u < space_prob:
            chars.append(" ")
        else:
            chars.append(alphabet[rng.integers(len(alphabet))])
    return "".join(chars)


def synthesize_frames(spec: SyntheticLanguageSpec, text: str, rng: PortableRNG) -> np.ndarray:
    rows = [spec.frame_codebook[c] for c in text]
    rows += [np.zeros(spec.frame_dim)] * MARGIN_CHARS
    base = np.repeat(np.stack(rows), FRAMES_PER_CHAR, axis=0)
    noise = rng.normal(base.size).reshape(base.shape) * spec.noise_sigma
    return (base + noise).astype(np.float32)


def generate_example(spec: SyntheticLanguageSpec, domain: str, seed: int, index: int) -> Example:
    rng = PortableRNG(spec.seed, seed, index)
    length = max(1, rng.poisson(DOMAIN_MEAN_LENGTH[domain]))
    text = _random_text(rng, spec.alphabet, length, spec.space_prob)
    frames = synthesize_frames(spec, text, rng)
    return Example(f"{spec.lang_id}-{domain}-{seed}-{index:06d}", spec.lang_id, frames, text, domain)


def generate_corpus(spec: SyntheticLanguageSpec, n_examples: int, domain: str, seed: int, start: int = 0) -> Manifest:
    """``n_examples`` utterances, each a pure function of (spec.seed, seed, index)."""
    if n_examples < 1:
        raise ValueError("n_examples must be at least 1")
    if domain not in DOMAIN_MEAN_LENGTH:
        raise ValueError(f"unknown domain {domain!r}")
    return Manifest(generate_example(spec, domain, seed, start + i) for i in range(n_examples))


# -- language rosters ---------------------------------------------------------------

DEFAULT_ALPHABET = "abcdefghijklmnop"


@dataclass
class RosterSpec:
    """Recipe for a set of related synthetic languages.

    ``families`` maps a family name to its member (lang_id, hours) pairs;
    members share the family's letter-to-unit map except for ``swaps``
    letter pairs per member (the first member keeps the family map).
    """

    families: dict[str, list[tuple[str, float]]]
    alphabet: str = DEFAULT_ALPHABET
    frame_dim: int = 16
    noise_sigma: float = 0.5
    perturbation: float = 0.15
    swaps: int = 3
    seed: int = 1234
    space_prob: float = 0.2

    def hours(self) -> dict[str, float]:
        return {lang: h for members in self.families.values() for lang, h in members}


DEFAULT_FAMILIES = {
    "fa": [("L1", 6000.0), ("L6", 9.0)],
    "fb": [("L2", 2000.0), ("L5", 40.0)],
    "fc": [("L3", 700.0), ("L4", 200.0)],
}


def build_roster(recipe: RosterSpec) -> list[SyntheticLanguageSpec]:
    """Materialise the language specs of a roster, deterministically."""
    rng = PortableRNG(recipe.seed, 0)
    n_units = len(recipe.alphabet)
    units = rng.normal(n_units * recipe.frame_dim).reshape(n_units, recipe.frame_dim)
    units *= 1.0 / np.linalg.norm(units, axis=1, keepdims=True) * math.sqrt(recipe.frame_dim) / 2
    silence = rng.normal(recipe.frame_dim) * 0.5
    out = []
    for f_idx, (family, members) in enumerate(sorted(recipe.families.items())):
        frng = PortableRNG(recipe.seed, 1, f_idx)
        base = frng.permutation(n_units)
        for m_idx, (lang, hours) in enumerate(members):
            lrng = PortableRNG(recipe.seed, 2, f_idx, m_idx)
            mapping = list(base)
            if m_idx > 0:
                for _ in range(recipe.swaps):
                    i, j = lrng.integers(n_units), lrng.integers(n_units)
                    mapping[i], mapping[j] = mapping[j], mapping[i]
            codebook = {}
            for c_idx, ch in enumerate(recipe.alphabet):
                jitter = lrng.normal(recipe.frame_dim) * recipe.perturbation
                codebook[ch] = units[mapping[c_idx]] + jitter
            codebook[" "] = silence.copy()
            out.append(
                SyntheticLanguageSpec(
                    lang_id=lang,
                    alphabet=recipe.alphabet,
                    frame_codebook=codebook,
                    noise_sigma=recipe.noise_sigma,
                    train_hours_equivalent=hours,
                    seed=splitmix64(recipe.seed ^ (1000 + len(out))),
                    family=family,
                    space_prob=recipe.space_prob,
                )
            )
    return sorted(out, key=lambda s: s.lang_id)


def character_set(specs: Sequence[SyntheticLanguageSpec]) -> str:
    return "".join(sorted({c for s in specs for c in s.alphabet} | {" "}))


# -- manifest files ---------------------------------------------------------------


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> Path:
    """JSON lines ``{id, lang, text, domain, frames_file}``; frames in tensor format.

    Frame files go to ``<stem>_frames/`` next to the manifest and are
    referenced relative to the manifest's directory.
    """
    path = Path(path)
    frames_dir = path.parent / f"{path.stem}_frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in manifest:
            rel = f"{frames_dir.name}/{e.utterance_id}.bin"
            save_tensor(path.parent / rel, e.frames)
            rec = {"id": e.utterance_id, "lang": e.lang, "text": e.text, "domain": e.domain, "frames_file": rel}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    out = Manifest()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ident, lang, text, domain, ffile = (rec[k] for k in ("id", "lang", "text", "domain", "frames_file"))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed manifest record ({exc})") from None
            fpath = path.parent / ffile
            if not fpath.exists():
                raise FileNotFoundError(f"frames file for utterance {ident!r} not found: {fpath}")
            try:
                out.append(Example(ident, lang, load_tensor(fpath), text, domain))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def save_roster(specs: Sequence[SyntheticLanguageSpec], path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in specs], indent=1))


def load_roster(path: str | os.PathLike) -> list[SyntheticLanguageSpec]:
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, dict):
        raw = [raw]
    return [SyntheticLanguageSpec.from_dict(r) for r in raw]
