"""Synthetic benchmark corpus for desk-scale end-to-end runs.

Sentences are filler words with unambiguous entity mentions spliced in. Each
entity type owns three disjoint sub-lexicons that never appear as filler:
single-mention words, and opener/closer pairs forming two-token mentions.
Mentions are separated by at least one filler, so boundaries and types are
fully determined by the surface and a small model can reach high F1. Types
co-occur freely within sentences, which is what makes knowledge retention
measurable across tasks.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from pathlib import Path

from .corpus import Corpus, EntityTriplet, Sentence, save_jsonl


@dataclass
class SynthSpec:
    """Shape of the generated corpus."""

    type_names: tuple[str, ...] = ("ALPHA", "BETA", "GAMMA")
    train_size: int = 900  # 300 per task under a 3-way split
    dev_size: int = 90
    test_size: int = 150
    filler_words: int = 150
    single_words: int = 8  # per type: one-token mention lexicon
    pair_words: int = 4  # per type: opener/closer lexicons for two-token mentions
    min_len: int = 6
    max_len: int = 12
    max_mentions: int = 3
    pair_rate: float = 0.3  # fraction of two-token mentions
    no_entity_rate: float = 0.15
    seed: int = 7


@dataclass
class _Lexicon:
    singles: list[str]
    openers: list[str]
    closers: list[str]


def _lexicons(spec: SynthSpec) -> dict[str, _Lexicon]:
    out: dict[str, _Lexicon] = {}
    for name in spec.type_names:
        stem = name.lower()
        out[name] = _Lexicon(
            singles=[f"{stem}{i:02d}" for i in range(spec.single_words)],
            openers=[f"{stem}go{i}" for i in range(spec.pair_words)],
            closers=[f"{stem}end{i}" for i in range(spec.pair_words)],
        )
    return out


def _make_sentence(
    sid: str,
    spec: SynthSpec,
    fillers: list[str],
    lexicons: dict[str, _Lexicon],
    rng: random.Random,
) -> Sentence:
    length = rng.randint(spec.min_len, spec.max_len)
    tokens = [rng.choice(fillers) for _ in range(length)]
    entities: list[EntityTriplet] = []
    if rng.random() >= spec.no_entity_rate:
        wanted = rng.randint(1, spec.max_mentions)
        blocked: set[int] = set()  # mention cells plus one-filler margins
        used: set[str] = set()  # no repeated surface forms within a sentence
        for _ in range(wanted):
            name = rng.choice(spec.type_names)
            lex = lexicons[name]
            span = 2 if rng.random() < spec.pair_rate else 1
            candidates = [
                pos
                for pos in range(length - span + 1)
                if not blocked & set(range(pos, pos + span))
            ]
            if not candidates:
                continue
            pos = rng.choice(candidates)
            if span == 1:
                fresh = [w for w in lex.singles if w not in used]
                if not fresh:
                    continue
                tokens[pos] = rng.choice(fresh)
                used.add(tokens[pos])
            else:
                fresh_open = [w for w in lex.openers if w not in used]
                fresh_close = [w for w in lex.closers if w not in used]
                if not fresh_open or not fresh_close:
                    continue
                tokens[pos] = rng.choice(fresh_open)
                tokens[pos + 1] = rng.choice(fresh_close)
                used.update((tokens[pos], tokens[pos + 1]))
            blocked |= set(range(pos - 1, pos + span + 1))
            entities.append(EntityTriplet(pos, pos + span - 1, name))
    entities.sort()
    return Sentence(id=sid, tokens=tuple(tokens), entities=tuple(entities))


def generate_corpus(spec: SynthSpec | None = None) -> Corpus:
    """Build the benchmark corpus in memory, fully determined by the seed."""
    spec = spec or SynthSpec()
    rng = random.Random(spec.seed)
    fillers = [f"w{i:03d}" for i in range(spec.filler_words)]
    lexicons = _lexicons(spec)
    parts: dict[str, list[Sentence]] = {}
    for part, size in (
        ("train", spec.train_size),
        ("dev", spec.dev_size),
        ("test", spec.test_size),
    ):
        parts[part] = [
            _make_sentence(f"synth-{part}-{i:04d}", spec, fillers, lexicons, rng)
            for i in range(size)
        ]
    return Corpus(train=parts["train"], dev=parts["dev"], test=parts["test"])


def write_corpus(corpus: Corpus, out_dir: str | Path) -> dict[str, Path]:
    """Write the three splits as JSON-lines files; returns their paths."""
    out_dir = Path(out_dir)
    paths = {}
    for part, sentences in (
        ("train", corpus.train),
        ("dev", corpus.dev),
        ("test", corpus.test),
    ):
        path = out_dir / f"{part}.jsonl"
        save_jsonl(sentences, path)
        paths[part] = path
    return paths
