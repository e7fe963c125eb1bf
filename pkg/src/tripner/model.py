"""Encoder-decoder pointer model over the joint position/type output space.

Each decode step scores all token positions (dot products against linearly
transformed encoder states) plus all seen entity types (dot products against
their shared token embeddings) plus one trailing end-of-sequence slot, and
normalizes with a softmax. Pad positions are masked to ~0 probability.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .backbone import BackboneSpec, TinySeq2Seq, Vocabulary
from .codec import EntityTypeRegistry, TargetSequence, TripletOrder
from .corpus import Sentence
from .errors import ModelError

NEG_INF = float("-inf")


@dataclass
class EncoderOutput:
    """Per-position encoder states for one sentence padded to length n."""

    states: torch.Tensor  # (n, d)
    mask: torch.Tensor  # (n,) bool, True on real tokens
    token_ids: torch.Tensor  # (n,) encoder input ids, used to realize prefixes


@dataclass
class BatchEncoderOutput:
    states: torch.Tensor  # (B, n, d)
    mask: torch.Tensor  # (B, n)
    token_ids: torch.Tensor  # (B, n)

    def __getitem__(self, row: int) -> EncoderOutput:
        return EncoderOutput(self.states[row], self.mask[row], self.token_ids[row])


@dataclass
class DecodeDistribution:
    """Output distribution at one generative step.

    ``probs`` has length n + ek + 1: token positions, shifted type slots, and
    the trailing end-of-sequence slot used to terminate generation.
    """

    probs: torch.Tensor
    step: int


class PointerModel(nn.Module):
    """Pointer-style triplet generator with a growable entity-type registry."""

    def __init__(
        self,
        spec: BackboneSpec,
        vocab: Vocabulary,
        registry: EntityTypeRegistry,
        n: int,
        order: TripletOrder = TripletOrder.SET,
    ) -> None:
        super().__init__()
        self.spec = spec
        self.vocab = vocab
        self.registry = registry
        self.n = n
        self.order = TripletOrder(order)
        if len(vocab.type_token_ids) != len(registry):
            raise ModelError(
                f"vocabulary carries {len(vocab.type_token_ids)} type tokens but the "
                f"registry holds {len(registry)} types"
            )
        self.net = TinySeq2Seq(spec, vocab_size=len(vocab), max_source_len=n)
        self.pointer_mlp = nn.Linear(spec.hidden_dim, spec.hidden_dim)
        if spec.tie_embeddings:
            self.output_rows = None
        else:
            # Untied scoring rows: one per registered type plus the EOS row.
            self.output_rows = nn.Parameter(
                torch.randn(len(registry) + 1, spec.hidden_dim) * 0.02
            )

    # ---------------------------------------------------------------- sizing

    @property
    def ek(self) -> int:
        return len(self.registry)

    @property
    def output_size(self) -> int:
        return self.n + self.ek + 1

    @property
    def eos_output_index(self) -> int:
        return self.n + self.ek

    def _check_registry(self, registry: EntityTypeRegistry) -> None:
        if registry.types != self.registry.types:
            raise ModelError(
                f"registry mismatch: model holds {self.registry.types}, "
                f"caller passed {registry.types}"
            )

    def _type_and_eos_rows(self) -> torch.Tensor:
        """Scoring rows for the ek type slots plus the EOS slot: (ek + 1, d)."""
        if self.output_rows is not None:
            return self.output_rows
        ids = torch.tensor(
            list(self.vocab.type_token_ids) + [self.vocab.eos_id],
            device=self.net.embedding.weight.device,
        )
        return self.net.embedding(ids)

    # --------------------------------------------------------------- encode

    def encode(self, sentence: Sentence, n: int | None = None) -> EncoderOutput:
        """Encode one sentence padded to length n (must match the model's n)."""
        if n is not None and n != self.n:
            raise ModelError(f"padded length {n} does not match the model's n={self.n}")
        return self.encode_batch([sentence])[0]

    def encode_batch(self, sentences: Sequence[Sentence]) -> BatchEncoderOutput:
        device = self.net.embedding.weight.device
        ids = torch.tensor(
            [self.vocab.encode_words(s.tokens, self.n) for s in sentences],
            dtype=torch.long,
            device=device,
        )
        mask = torch.zeros(ids.shape, dtype=torch.bool, device=device)
        for row, sentence in enumerate(sentences):
            mask[row, : len(sentence.tokens)] = True
        states = self.net.encode(ids, mask)
        return BatchEncoderOutput(states=states, mask=mask, token_ids=ids)

    # ------------------------------------------------------- prefix realize

    def _realize_ids(
        self, indices: Sequence[int], token_ids: torch.Tensor
    ) -> list[int]:
        """Convert output indices into decoder input token ids (Index2Token)."""
        realized: list[int] = [self.vocab.bos_id]
        boundary = self.n + self.ek
        for index in indices:
            if 0 <= index < self.n:
                realized.append(int(token_ids[index]))
            elif self.n <= index < boundary:
                realized.append(self.vocab.type_token_ids[index - self.n])
            elif index == boundary:
                realized.append(self.vocab.eos_id)
            else:
                raise ModelError(f"prefix index {index} out of range [0, {boundary}]")
        return realized

    # ------------------------------------------------------------- scoring

    def _step_logits(
        self,
        hidden: torch.Tensor,  # (B, T, d)
        enc_states: torch.Tensor,  # (B, n, d)
        enc_mask: torch.Tensor,  # (B, n)
    ) -> torch.Tensor:
        """Logits over positions, types, and EOS for every decode step: (B, T, V)."""
        pointer_keys = self.pointer_mlp(enc_states)  # (B, n, d)
        position_scores = hidden @ pointer_keys.transpose(1, 2)  # (B, T, n)
        position_scores = position_scores.masked_fill(~enc_mask[:, None, :], NEG_INF)
        rows = self._type_and_eos_rows().to(hidden.dtype)  # (ek + 1, d)
        symbol_scores = hidden @ rows.T  # (B, T, ek + 1)
        return torch.cat([position_scores, symbol_scores], dim=-1)

    def forced_logits(
        self, enc: BatchEncoderOutput, step_inputs: torch.Tensor
    ) -> torch.Tensor:
        """Teacher-forced logits for every step given decoder input ids (B, T)."""
        hidden = self.net.decode(step_inputs, enc.states, enc.mask)
        return self._step_logits(hidden, enc.states, enc.mask)

    # ------------------------------------------------------------ decoding

    def decode_step(
        self,
        enc: EncoderOutput,
        prefix: TargetSequence,
        registry: EntityTypeRegistry,
    ) -> DecodeDistribution:
        """Distribution over the next output index after the given prefix."""
        self._check_registry(registry)
        if prefix.n != self.n:
            raise ModelError(f"prefix n={prefix.n} does not match model n={self.n}")
        input_ids = torch.tensor(
            [self._realize_ids(prefix.indices, enc.token_ids)], dtype=torch.long
        )
        batch = BatchEncoderOutput(
            states=enc.states[None], mask=enc.mask[None], token_ids=enc.token_ids[None]
        )
        logits = self.forced_logits(batch, input_ids)[0, -1]
        return DecodeDistribution(
            probs=torch.softmax(logits, dim=-1).detach(), step=len(prefix)
        )

    def _grammar_mask(
        self,
        slot: int,
        pending_start: int | None,
        device: torch.device,
    ) -> torch.Tensor:
        """Allowed-output mask for the current slot under the triplet grammar."""
        allowed = torch.zeros(self.output_size, dtype=torch.bool, device=device)
        role = self.order.roles[slot % 3]
        if role == "type":
            allowed[self.n : self.n + self.ek] = True
        else:
            low = pending_start if (role == "end" and pending_start is not None) else 0
            allowed[low : self.n] = True
        if slot % 3 == 0:
            allowed[self.eos_output_index] = True
        return allowed

    def generate(
        self,
        enc: EncoderOutput,
        registry: EntityTypeRegistry,
        max_triplets: int,
        constrained: bool = True,
    ) -> tuple[TargetSequence, list[DecodeDistribution]]:
        """Greedy autoregressive decoding of up to ``max_triplets`` triplets.

        Returns the generated index sequence (without the terminating EOS) and
        the model distribution at every emitted step. With ``constrained``,
        slots follow the triplet grammar for the model's composition order:
        boundary slots are restricted to position indices (end >= start), type
        slots to type indices, and EOS may only appear on triplet boundaries.
        """
        self._check_registry(registry)
        batch = BatchEncoderOutput(
            states=enc.states[None], mask=enc.mask[None], token_ids=enc.token_ids[None]
        )
        sequences, distributions = self.generate_batch(batch, max_triplets, constrained)
        return sequences[0], distributions[0]

    @torch.no_grad()
    def generate_batch(
        self,
        enc: BatchEncoderOutput,
        max_triplets: int,
        constrained: bool = True,
    ) -> tuple[list[TargetSequence], list[list[DecodeDistribution]]]:
        if max_triplets < 0:
            raise ModelError(f"max_triplets must be nonnegative, got {max_triplets}")
        batch_size = enc.states.shape[0]
        device = enc.states.device
        if max_triplets == 0 or (constrained and self.ek == 0):
            empty = [TargetSequence.empty(self.n) for _ in range(batch_size)]
            return empty, [[] for _ in range(batch_size)]
        emitted: list[list[int]] = [[] for _ in range(batch_size)]
        dists: list[list[DecodeDistribution]] = [[] for _ in range(batch_size)]
        finished = [False] * batch_size
        starts: list[int | None] = [None] * batch_size
        input_ids = torch.full(
            (batch_size, 1), self.vocab.bos_id, dtype=torch.long, device=device
        )
        for step in range(3 * max_triplets):
            if all(finished):
                break
            logits = self.forced_logits(enc, input_ids)[:, -1]  # (B, V)
            probs = torch.softmax(logits, dim=-1)
            slot = step % 3
            role = self.order.roles[slot]
            if constrained:
                masked = logits.clone()
                for row in range(batch_size):
                    allowed = self._grammar_mask(slot, starts[row], device)
                    masked[row, ~allowed] = NEG_INF
                choices = masked.argmax(dim=-1)
            else:
                choices = logits.argmax(dim=-1)
            next_ids = torch.full(
                (batch_size, 1), self.vocab.pad_id, dtype=torch.long, device=device
            )
            for row in range(batch_size):
                if finished[row]:
                    continue
                choice = int(choices[row])
                if choice == self.eos_output_index:
                    finished[row] = True
                    continue
                emitted[row].append(choice)
                dists[row].append(DecodeDistribution(probs=probs[row].clone(), step=step))
                if role == "start":
                    starts[row] = choice if choice < self.n else None
                elif slot == 2:
                    starts[row] = None
                next_ids[row, 0] = self._realize_ids([choice], enc.token_ids[row])[1]
            input_ids = torch.cat([input_ids, next_ids], dim=1)
        sequences = []
        for row in range(batch_size):
            indices = emitted[row]
            # Drop a trailing partial triplet left when the step budget ran out
            # mid-triplet (only possible without the grammar, which stops on
            # triplet boundaries).
            usable = 3 * (len(indices) // 3)
            sequences.append(
                TargetSequence(
                    indices=tuple(indices[:usable]), n=self.n, pseudo_len=usable
                )
            )
            dists[row] = dists[row][:usable]
        return sequences, dists

    # ------------------------------------------------------------- scoring

    def score_sequence(
        self,
        enc: EncoderOutput,
        target: TargetSequence,
        registry: EntityTypeRegistry,
        include_final_step: bool = False,
    ) -> tuple[list[float], list[DecodeDistribution]]:
        """Teacher-forced per-step probabilities of the target indices.

        Returns the probability assigned to each target index and the full
        distribution at every step. With ``include_final_step`` one extra
        distribution is appended for the step following the last target index
        (where EOS would be emitted).
        """
        self._check_registry(registry)
        if target.n != self.n:
            raise ModelError(f"target n={target.n} does not match model n={self.n}")
        if not target.indices and not include_final_step:
            return [], []
        input_ids = torch.tensor(
            [self._realize_ids(target.indices, enc.token_ids)], dtype=torch.long
        )
        if not include_final_step:
            input_ids = input_ids[:, : max(len(target.indices), 1)]
        batch = BatchEncoderOutput(
            states=enc.states[None], mask=enc.mask[None], token_ids=enc.token_ids[None]
        )
        with torch.no_grad():
            logits = self.forced_logits(batch, input_ids)[0]
            probs = torch.softmax(logits, dim=-1)
        step_probs: list[float] = []
        distributions: list[DecodeDistribution] = []
        for step, index in enumerate(target.indices):
            if not 0 <= index < self.output_size:
                raise ModelError(f"target index {index} out of range [0, {self.output_size})")
            step_probs.append(float(probs[step, index]))
            distributions.append(DecodeDistribution(probs=probs[step].clone(), step=step))
        if include_final_step:
            final = len(target.indices)
            distributions.append(DecodeDistribution(probs=probs[final].clone(), step=final))
        return step_probs, distributions

    # ------------------------------------------------------ registry growth

    def extend_types(self, new_types: Sequence[str], noise_std: float = 0.02) -> None:
        """Register new entity types and grow the embedding table.

        New rows start at the mean of the existing type embeddings (keeping
        their logits in-distribution) plus small noise from the global seed.
        """
        new_types = list(new_types)
        if not new_types:
            return
        weight = self.net.embedding.weight
        if self.vocab.type_token_ids:
            base = weight.data[list(self.vocab.type_token_ids)].mean(dim=0)
        else:
            base = torch.zeros(self.spec.hidden_dim, dtype=weight.dtype, device=weight.device)
        rows = base[None, :].repeat(len(new_types), 1)
        rows = rows + noise_std * torch.randn(
            rows.shape, dtype=weight.dtype, device=weight.device
        )
        self.registry.extend(new_types)
        self.vocab.add_type_tokens(new_types)
        self.net.grow_embedding(rows)
        if self.output_rows is not None:
            old = self.output_rows.data  # (old_ek + 1, d): type rows then the EOS row
            type_rows, eos_row = old[:-1], old[-1:]
            if len(type_rows):
                extra = type_rows.mean(dim=0, keepdim=True).repeat(len(new_types), 1)
            else:
                extra = torch.zeros(len(new_types), old.shape[1], dtype=old.dtype)
            extra = extra + noise_std * torch.randn(extra.shape, dtype=old.dtype)
            self.output_rows = nn.Parameter(torch.cat([type_rows, extra, eos_row], dim=0))


# ------------------------------------------------------------- checkpoints


def save_checkpoint(model: PointerModel, directory: str | Path, step: int) -> Path:
    """Write the weights blob plus a JSON sidecar describing the vocabulary."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "weights.pt")
    sidecar = {
        "step": step,
        "n": model.n,
        "order": model.order.value,
        "registry": model.registry.to_dict(),
        "vocab": model.vocab.to_dict(),
        "backbone": model.spec.to_dict(),
    }
    (directory / "sidecar.json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[PointerModel, int]:
    """Rebuild the exact model (vocabulary, registry, weights) from disk."""
    directory = Path(directory)
    sidecar_path = directory / "sidecar.json"
    if not sidecar_path.exists():
        raise ModelError(f"no checkpoint sidecar at {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    model = PointerModel(
        spec=BackboneSpec.from_dict(sidecar["backbone"]),
        vocab=Vocabulary.from_dict(sidecar["vocab"]),
        registry=EntityTypeRegistry.from_dict(sidecar["registry"]),
        n=int(sidecar["n"]),
        order=TripletOrder(sidecar["order"]),
    )
    state = torch.load(directory / "weights.pt", map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    return model, int(sidecar["step"])


def checkpoint_hash(directory: str | Path) -> str:
    """Content hash of the checkpoint weights, used as the pseudo-cache key."""
    blob = (Path(directory) / "weights.pt").read_bytes()
    return hashlib.sha256(blob).hexdigest()
