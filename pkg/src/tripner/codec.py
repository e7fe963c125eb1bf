"""Conversion between entity triplets and flat index target sequences.

The joint output vocabulary covers token positions ``0..n-1`` followed by the
seen entity types at indices ``n..n+ek-1`` (the "shift by n"). Encoding is
canonical and deterministic; decoding is lenient and never raises on
arbitrary in-range integer sequences.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .corpus import EntityTriplet, Sentence
from .errors import CodecError

PAD_TOKEN = "<pad>"


class TripletOrder(str, Enum):
    """Emission order of the three slots of one entity triplet."""

    SET = "SET"  # start, end, type
    STE = "STE"  # start, type, end
    TSE = "TSE"  # type, start, end

    @property
    def roles(self) -> tuple[str, str, str]:
        return _SLOT_ROLES[self]


_SLOT_ROLES = {
    TripletOrder.SET: ("start", "end", "type"),
    TripletOrder.STE: ("start", "type", "end"),
    TripletOrder.TSE: ("type", "start", "end"),
}


class EntityTypeRegistry:
    """Ordered set of entity types seen so far; indices are append-only.

    The ordinal of a type never changes once assigned, which keeps old-type
    encodings stable as later tasks extend the registry.
    """

    def __init__(
        self, types: Iterable[str] = (), coarse_of: dict[str, str] | None = None
    ) -> None:
        self._types: list[str] = []
        self._ordinals: dict[str, int] = {}
        self.coarse_of: dict[str, str] = dict(coarse_of or {})
        self.extend(types)

    def extend(self, new_types: Iterable[str]) -> None:
        """Append new types in the given order; duplicates are rejected."""
        for name in new_types:
            if name in self._ordinals:
                raise CodecError(f"type {name!r} already registered")
            self._ordinals[name] = len(self._types)
            self._types.append(name)

    @property
    def types(self) -> tuple[str, ...]:
        return tuple(self._types)

    def __len__(self) -> int:
        return len(self._types)

    def __contains__(self, name: str) -> bool:
        return name in self._ordinals

    def ordinal(self, name: str) -> int:
        try:
            return self._ordinals[name]
        except KeyError:
            raise CodecError(f"unregistered entity type {name!r}") from None

    def type_at(self, ordinal: int) -> str:
        if not 0 <= ordinal < len(self._types):
            raise CodecError(f"type ordinal {ordinal} out of range [0, {len(self._types)})")
        return self._types[ordinal]

    def snapshot(self) -> "EntityTypeRegistry":
        return EntityTypeRegistry(self._types, self.coarse_of)

    def to_dict(self) -> dict:
        return {"types": list(self._types), "coarse_of": dict(self.coarse_of)}

    @classmethod
    def from_dict(cls, payload: dict) -> "EntityTypeRegistry":
        return cls(payload["types"], payload.get("coarse_of", {}))


@dataclass(frozen=True)
class TargetSequence:
    """Flat index sequence: a pseudo-label prefix followed by a gold suffix."""

    indices: tuple[int, ...]
    n: int
    pseudo_len: int = 0
    ground_len: int = 0

    def __post_init__(self) -> None:
        if self.pseudo_len < 0 or self.ground_len < 0:
            raise CodecError("pseudo_len and ground_len must be nonnegative")
        if self.pseudo_len + self.ground_len != len(self.indices):
            raise CodecError(
                f"pseudo_len {self.pseudo_len} + ground_len {self.ground_len} "
                f"!= sequence length {len(self.indices)}"
            )
        if self.pseudo_len % 3 or self.ground_len % 3:
            raise CodecError("pseudo and ground segments must hold whole triplets")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def pseudo_indices(self) -> tuple[int, ...]:
        return self.indices[: self.pseudo_len]

    @property
    def ground_indices(self) -> tuple[int, ...]:
        return self.indices[self.pseudo_len :]

    @classmethod
    def empty(cls, n: int) -> "TargetSequence":
        return cls(indices=(), n=n)


@dataclass
class DecodeResult:
    """Triplets recovered from raw model output plus drop statistics."""

    triplets: list[EntityTriplet]
    malformed: int = 0
    duplicates: int = 0


def canonical_sort(
    entities: Iterable[EntityTriplet], registry: EntityTypeRegistry
) -> list[EntityTriplet]:
    """Deterministic serialization order: by start, then end, then type ordinal."""
    return sorted(entities, key=lambda e: (e.start, e.end, registry.ordinal(e.type)))


def encode_targets(
    entities: Iterable[EntityTriplet],
    n: int,
    registry: EntityTypeRegistry,
    order: TripletOrder = TripletOrder.SET,
) -> TargetSequence:
    """Serialize entities into a ground-truth index sequence.

    Entities are sorted canonically and emitted three indices at a time in the
    given slot order, with type indices shifted by ``n``.
    """
    order = TripletOrder(order)
    indices: list[int] = []
    for ent in canonical_sort(entities, registry):
        if ent.end >= n:
            raise CodecError(
                f"span [{ent.start}, {ent.end}] does not fit padded length n={n}"
            )
        slot_values = {
            "start": ent.start,
            "end": ent.end,
            "type": n + registry.ordinal(ent.type),
        }
        indices.extend(slot_values[role] for role in order.roles)
    return TargetSequence(indices=tuple(indices), n=n, ground_len=len(indices))


def decode_triplets(
    indices: Sequence[int],
    n: int,
    registry: EntityTypeRegistry,
    order: TripletOrder = TripletOrder.SET,
) -> DecodeResult:
    """Greedily parse raw indices back into entity triplets.

    Consumes three indices at a time; a triplet is kept only if both boundary
    slots are valid positions, the type slot is a valid shifted type index,
    and start <= end. Malformed triplets (including a trailing partial chunk)
    are dropped and counted; exact duplicates are deduplicated.
    """
    order = TripletOrder(order)
    ek = len(registry)
    result = DecodeResult(triplets=[])
    seen: set[EntityTriplet] = set()
    for base in range(0, len(indices), 3):
        chunk = list(indices[base : base + 3])
        if len(chunk) < 3:
            result.malformed += 1
            break
        slots = dict(zip(order.roles, chunk))
        start, end, type_index = slots["start"], slots["end"], slots["type"]
        if not (0 <= start < n and 0 <= end < n and start <= end):
            result.malformed += 1
            continue
        if not (n <= type_index < n + ek):
            result.malformed += 1
            continue
        triplet = EntityTriplet(start, end, registry.type_at(type_index - n))
        if triplet in seen:
            result.duplicates += 1
            continue
        seen.add(triplet)
        result.triplets.append(triplet)
    return result


def index_to_token(
    index: int, sentence: Sentence, n: int, registry: EntityTypeRegistry
) -> str:
    """Realize one output index as a surface token or an entity-type name.

    Indices below ``n`` select the sentence token at that position (the pad
    token beyond the true length); shifted indices select the type name.
    """
    ek = len(registry)
    if not 0 <= index < n + ek:
        raise CodecError(f"index {index} out of range [0, {n + ek})")
    if index < n:
        if index < len(sentence.tokens):
            return sentence.tokens[index]
        return PAD_TOKEN
    return registry.type_at(index - n)


def concat_targets(pseudo: TargetSequence, ground: TargetSequence) -> TargetSequence:
    """Join a pseudo-label sequence and a gold sequence into one target.

    Both inputs must share the same padded length ``n`` (and, by caller
    contract, the same registry snapshot and slot order).
    """
    if pseudo.n != ground.n:
        raise CodecError(f"padded length mismatch: pseudo n={pseudo.n}, ground n={ground.n}")
    return TargetSequence(
        indices=pseudo.indices + ground.indices,
        n=pseudo.n,
        pseudo_len=len(pseudo.indices),
        ground_len=len(ground.indices),
    )
