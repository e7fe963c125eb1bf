"""Corpus ingestion and class-incremental task construction.

Annotated sentences are loaded from column (BIO) or JSON-lines files and
carved into an ordered sequence of tasks. Train/dev data can be divided by
random partition ("split") or by entity-type filtering ("filter"); test data
is either the full original test set ("all") or filtered to sentences with
at least one seen type ("filter").
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, DataValidationError

TRAIN_PROTOCOLS = ("split", "filter")
TEST_PROTOCOLS = ("all", "filter")

# Learning-order permutations used by the reference benchmarks.
ONTONOTES_ORDERS = {
    "onto-1": ["ORG", "PER", "GPE", "DATE", "CARD", "NORP"],
    "onto-2": ["DATE", "NORP", "PER", "CARD", "ORG", "GPE"],
    "onto-3": ["GPE", "CARD", "ORG", "NORP", "DATE", "PER"],
    "onto-4": ["NORP", "ORG", "DATE", "PER", "GPE", "CARD"],
    "onto-5": ["CARD", "GPE", "NORP", "ORG", "PER", "DATE"],
    "onto-6": ["PER", "DATE", "CARD", "GPE", "NORP", "ORG"],
}
FEWNERD_COARSE_ORDERS = {
    "fewnerd-1": ["LOC", "PER", "ORG", "OTH", "PROD", "BUID", "ART", "EVET"],
    "fewnerd-2": ["ORG", "PROD", "ART", "EVET", "OTH", "PER", "LOC", "BUID"],
    "fewnerd-3": ["PROD", "EVET", "OTH", "PER", "ART", "LOC", "BUID", "ORG"],
    "fewnerd-4": ["BUID", "OTH", "PROD", "PER", "ORG", "LOC", "ART", "EVET"],
}


@dataclass(frozen=True, order=True)
class EntityTriplet:
    """One entity mention as (start, end, type); positions are 0-based inclusive."""

    start: int
    end: int
    type: str

    def __post_init__(self) -> None:
        if self.start < 0 or self.end < self.start:
            raise DataValidationError(
                f"invalid span [{self.start}, {self.end}] for type {self.type!r}"
            )


@dataclass(frozen=True)
class Sentence:
    """A tokenized sentence with its gold entity triplets."""

    id: str
    tokens: tuple[str, ...]
    entities: tuple[EntityTriplet, ...] = ()

    def __post_init__(self) -> None:
        if len(self.tokens) == 0:
            raise DataValidationError(f"sentence {self.id!r} has no tokens")
        for ent in self.entities:
            if ent.end >= len(self.tokens):
                raise DataValidationError(
                    f"sentence {self.id!r}: span [{ent.start}, {ent.end}] "
                    f"out of bounds for {len(self.tokens)} tokens"
                )

    def types(self) -> set[str]:
        return {ent.type for ent in self.entities}


@dataclass
class CLTask:
    """One incremental step: its new types and per-step data splits.

    ``train_full`` keeps the same train sentences with their complete
    annotations; the non-incremental upper bound re-annotates them for all
    types seen so far.
    """

    index: int  # 1-based step number
    new_types: tuple[str, ...]
    train: list[Sentence]
    dev: list[Sentence]
    test: list[Sentence]
    train_full: list[Sentence] = field(default_factory=list)


@dataclass
class CLSchedule:
    """An ordered sequence of tasks under fixed train/test protocols."""

    tasks: list[CLTask]
    train_protocol: str
    test_protocol: str
    order_name: str
    seed: int
    coarse_of: dict[str, str] = field(default_factory=dict)

    def seen_types(self, k: int) -> tuple[str, ...]:
        """All types introduced by tasks 1..k, in learning order."""
        seen: list[str] = []
        for task in self.tasks[:k]:
            seen.extend(task.new_types)
        return tuple(seen)


@dataclass
class Corpus:
    """The original train/dev/test sets before any task splitting."""

    train: list[Sentence]
    dev: list[Sentence]
    test: list[Sentence]

    def type_inventory(self) -> set[str]:
        types: set[str] = set()
        for part in (self.train, self.dev, self.test):
            for sentence in part:
                types |= sentence.types()
        return types


def load_corpus(path: str | Path, format: str = "jsonl") -> list[Sentence]:
    """Load annotated sentences from a file in deterministic order.

    ``jsonl`` records look like
    ``{"tokens": [...], "entities": [[start, end, "TYPE"], ...], "id": "..."}``;
    the ``id`` field is optional and defaults to ``<stem>:<record index>``.
    ``column`` files carry one token per line with a trailing BIO tag and a
    blank line between sentences.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"corpus file not found: {path}")
    if format == "jsonl":
        return _load_jsonl(path)
    if format == "column":
        return _load_column(path)
    raise ConfigError(f"unknown corpus format {format!r} (expected 'jsonl' or 'column')")


def _load_jsonl(path: Path) -> list[Sentence]:
    sentences: list[Sentence] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataValidationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                tokens = tuple(str(tok) for tok in record["tokens"])
                raw_entities = record.get("entities", [])
                entities = tuple(
                    EntityTriplet(int(s), int(e), str(t)) for s, e, t in raw_entities
                )
                sid = str(record.get("id", f"{path.stem}:{lineno}"))
                sentences.append(Sentence(id=sid, tokens=tokens, entities=entities))
            except DataValidationError as exc:
                raise DataValidationError(f"{path}:{lineno}: {exc}") from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise DataValidationError(f"{path}:{lineno}: malformed record: {exc}") from exc
    return sentences


def _load_column(path: Path) -> list[Sentence]:
    sentences: list[Sentence] = []
    tokens: list[str] = []
    tags: list[str] = []
    first_line = 1

    def flush(upto: int) -> None:
        if not tokens:
            return
        sid = f"{path.stem}:{len(sentences) + 1}"
        try:
            entities = bio_to_triplets(tags)
        except DataValidationError as exc:
            raise DataValidationError(f"{path}:{first_line}: {exc}") from exc
        sentences.append(Sentence(id=sid, tokens=tuple(tokens), entities=entities))
        tokens.clear()
        tags.clear()

    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush(lineno)
                first_line = lineno + 1
                continue
            parts = line.split()
            if len(parts) < 2:
                raise DataValidationError(
                    f"{path}:{lineno}: expected 'token ... tag', got {line!r}"
                )
            tokens.append(parts[0])
            tags.append(parts[-1])
    flush(-1)
    return sentences


def bio_to_triplets(tags: Sequence[str]) -> tuple[EntityTriplet, ...]:
    """Convert a BIO tag sequence into entity triplets.

    An ``I-X`` following ``O`` or a different type is treated as the start of
    a new entity (lenient IOB repair).
    """
    entities: list[EntityTriplet] = []
    start: int | None = None
    current: str | None = None
    for pos, tag in enumerate(tags):
        if tag == "O":
            if current is not None:
                entities.append(EntityTriplet(start, pos - 1, current))
                start, current = None, None
            continue
        if "-" not in tag or tag[0] not in "BI":
            raise DataValidationError(f"unrecognized BIO tag {tag!r} at position {pos}")
        prefix, tag_type = tag.split("-", 1)
        if prefix == "B" or current != tag_type:
            if current is not None:
                entities.append(EntityTriplet(start, pos - 1, current))
            start, current = pos, tag_type
    if current is not None:
        entities.append(EntityTriplet(start, len(tags) - 1, current))
    return tuple(entities)


def restrict_annotations(sentence: Sentence, types: Iterable[str]) -> Sentence:
    """Keep only triplets whose type is in ``types``; tokens are unchanged."""
    allowed = set(types)
    kept = tuple(ent for ent in sentence.entities if ent.type in allowed)
    if len(kept) == len(sentence.entities):
        return sentence
    return replace(sentence, entities=kept)


def _partition(sentences: list[Sentence], parts: int, rng: random.Random) -> list[list[Sentence]]:
    """Random partition into ``parts`` disjoint subsets of near-equal size."""
    order = list(range(len(sentences)))
    rng.shuffle(order)
    base, extra = divmod(len(order), parts)
    chunks: list[list[Sentence]] = []
    cursor = 0
    for part in range(parts):
        size = base + (1 if part < extra else 0)
        chunk = [sentences[i] for i in sorted(order[cursor : cursor + size])]
        chunks.append(chunk)
        cursor += size
    return chunks


def make_schedule(
    corpus: Corpus,
    order: Sequence[Iterable[str]],
    train_protocol: str,
    test_protocol: str,
    seed: int,
    order_name: str = "custom",
    coarse_of: dict[str, str] | None = None,
) -> CLSchedule:
    """Carve a corpus into a class-incremental schedule.

    ``order`` is a list of per-task type sets; they must be pairwise disjoint
    and covered by the corpus inventory. Under the ``split`` protocol the
    original train/dev sentences are randomly partitioned into disjoint
    per-task subsets (seeded); under ``filter`` task k receives every sentence
    containing at least one entity of its new types. Task k's train/dev
    annotations are reduced to the new types only; its test annotations cover
    all types seen so far.
    """
    if train_protocol not in TRAIN_PROTOCOLS:
        raise ConfigError(f"unknown train protocol {train_protocol!r}")
    if test_protocol not in TEST_PROTOCOLS:
        raise ConfigError(f"unknown test protocol {test_protocol!r}")
    if not order:
        raise ConfigError("order must contain at least one task type set")

    type_sets = [tuple(sorted(set(types))) for types in order]
    seen: set[str] = set()
    for k, types in enumerate(type_sets, start=1):
        if not types:
            raise ConfigError(f"task {k} has an empty type set")
        overlap = seen & set(types)
        if overlap:
            raise ConfigError(f"task {k} reuses types from earlier tasks: {sorted(overlap)}")
        seen |= set(types)
    inventory = corpus.type_inventory()
    unknown = seen - inventory
    if unknown:
        raise ConfigError(f"order names types absent from the corpus: {sorted(unknown)}")

    rng = random.Random(seed)
    if train_protocol == "split":
        train_parts = _partition(corpus.train, len(type_sets), rng)
        dev_parts = _partition(corpus.dev, len(type_sets), rng)
    else:
        train_parts = [
            [s for s in corpus.train if s.types() & set(types)] for types in type_sets
        ]
        dev_parts = [
            [s for s in corpus.dev if s.types() & set(types)] for types in type_sets
        ]

    tasks: list[CLTask] = []
    cumulative: list[str] = []
    for k, types in enumerate(type_sets, start=1):
        cumulative.extend(types)
        train_k = [restrict_annotations(s, types) for s in train_parts[k - 1]]
        dev_k = [restrict_annotations(s, types) for s in dev_parts[k - 1]]
        if not train_k:
            raise ConfigError(f"task {k} ({'+'.join(types)}) has an empty train set")
        if test_protocol == "all":
            test_k = [restrict_annotations(s, cumulative) for s in corpus.test]
        else:
            test_k = [
                restrict_annotations(s, cumulative)
                for s in corpus.test
                if s.types() & set(cumulative)
            ]
        tasks.append(
            CLTask(
                index=k,
                new_types=types,
                train=train_k,
                dev=dev_k,
                test=test_k,
                train_full=list(train_parts[k - 1]),
            )
        )

    return CLSchedule(
        tasks=tasks,
        train_protocol=train_protocol,
        test_protocol=test_protocol,
        order_name=order_name,
        seed=seed,
        coarse_of=dict(coarse_of or {}),
    )


def infer_coarse_labels(types: Iterable[str]) -> dict[str, str]:
    """Derive coarse labels from ``coarse-fine`` style type names.

    Types without a dash map to themselves (flat inventories stay flat).
    """
    return {t: (t.split("-", 1)[0] if "-" in t else t) for t in types}


def resolve_order(
    name_or_spec: str, inventory: Iterable[str], coarse_of: dict[str, str] | None = None
) -> tuple[list[tuple[str, ...]], str]:
    """Resolve a named learning order or an inline order spec into type sets.

    Known names are the ``onto-*`` permutations (one type per task) and the
    ``fewnerd-*`` permutations (one coarse group per task, expanded through
    ``coarse_of``). Inline specs separate tasks with ``;`` and types within a
    task with ``,``, e.g. ``"ORG;PER,GPE"``.
    """
    inventory = set(inventory)
    if name_or_spec in ONTONOTES_ORDERS:
        return [(t,) for t in ONTONOTES_ORDERS[name_or_spec]], name_or_spec
    if name_or_spec in FEWNERD_COARSE_ORDERS:
        coarse_of = coarse_of or infer_coarse_labels(inventory)
        groups: list[tuple[str, ...]] = []
        for coarse in FEWNERD_COARSE_ORDERS[name_or_spec]:
            fine = tuple(sorted(t for t in inventory if coarse_of.get(t) == coarse))
            if not fine:
                raise ConfigError(f"coarse group {coarse!r} matches no corpus types")
            groups.append(fine)
        return groups, name_or_spec
    if ";" in name_or_spec or "," in name_or_spec:
        groups = [
            tuple(sorted(t.strip() for t in part.split(",") if t.strip()))
            for part in name_or_spec.split(";")
            if part.strip()
        ]
        return groups, "custom"
    if name_or_spec in inventory:
        return [(name_or_spec,)], "custom"
    raise ConfigError(f"unknown learning order {name_or_spec!r}")


def schedule_manifest(schedule: CLSchedule) -> dict:
    """A JSON-serializable record of per-task sentence ids and type sets."""
    return {
        "train_protocol": schedule.train_protocol,
        "test_protocol": schedule.test_protocol,
        "order_name": schedule.order_name,
        "seed": schedule.seed,
        "coarse_of": dict(sorted(schedule.coarse_of.items())),
        "tasks": [
            {
                "index": task.index,
                "new_types": list(task.new_types),
                "train_ids": [s.id for s in task.train],
                "dev_ids": [s.id for s in task.dev],
                "test_ids": [s.id for s in task.test],
            }
            for task in schedule.tasks
        ],
    }


def schedule_from_manifest(corpus: Corpus, manifest: dict) -> CLSchedule:
    """Rebuild the exact schedule recorded by :func:`schedule_manifest`."""
    by_id = {
        part: {s.id: s for s in sentences}
        for part, sentences in (
            ("train", corpus.train),
            ("dev", corpus.dev),
            ("test", corpus.test),
        )
    }

    def pick(part: str, ids: list[str], types: Iterable[str]) -> list[Sentence]:
        pool = by_id[part]
        missing = [i for i in ids if i not in pool]
        if missing:
            raise DataValidationError(
                f"manifest references unknown {part} sentence ids: {missing[:5]}"
            )
        return [restrict_annotations(pool[i], types) for i in ids]

    tasks: list[CLTask] = []
    cumulative: list[str] = []
    for entry in manifest["tasks"]:
        new_types = tuple(entry["new_types"])
        cumulative.extend(new_types)
        tasks.append(
            CLTask(
                index=int(entry["index"]),
                new_types=new_types,
                train=pick("train", entry["train_ids"], new_types),
                dev=pick("dev", entry["dev_ids"], new_types),
                test=pick("test", entry["test_ids"], tuple(cumulative)),
                train_full=[by_id["train"][i] for i in entry["train_ids"]],
            )
        )
    return CLSchedule(
        tasks=tasks,
        train_protocol=manifest["train_protocol"],
        test_protocol=manifest["test_protocol"],
        order_name=manifest.get("order_name", "custom"),
        seed=int(manifest.get("seed", 0)),
        coarse_of=dict(manifest.get("coarse_of", {})),
    )


def save_jsonl(sentences: Iterable[Sentence], path: str | Path) -> None:
    """Write sentences as JSON-lines records loadable by :func:`load_corpus`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for sentence in sentences:
            record = {
                "id": sentence.id,
                "tokens": list(sentence.tokens),
                "entities": [[e.start, e.end, e.type] for e in sentence.entities],
            }
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")
