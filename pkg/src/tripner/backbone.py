"""Self-contained tiny seq2seq transformer backbone.

A word-level encoder-decoder small enough for desk-scale gradient checks and
overfit tests. The single token-embedding table is shared by the encoder
input, the decoder input, and the entity-type scoring rows.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ModelError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


def seed_everything(seed: int) -> None:
    """Seed every RNG the package draws from."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


@dataclass
class BackboneSpec:
    """Architecture hyperparameters of the sequence-to-sequence backbone."""

    kind: str = "tiny-scratch"  # {"tiny-scratch", "pretrained-seq2seq"}
    hidden_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ffn_dim: int | None = None  # defaults to 4 * hidden_dim
    max_target_len: int = 64
    tie_embeddings: bool = True
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("tiny-scratch", "pretrained-seq2seq"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "pretrained-seq2seq":
            raise ModelError(
                "pretrained seq2seq backbones need local weights and a subword "
                "tokenizer; use kind='tiny-scratch' for self-contained runs"
            )
        if self.hidden_dim % self.heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden_dim

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hidden_dim": self.hidden_dim,
            "encoder_layers": self.encoder_layers,
            "decoder_layers": self.decoder_layers,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "max_target_len": self.max_target_len,
            "tie_embeddings": self.tie_embeddings,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "BackboneSpec":
        return cls(**payload)


class Vocabulary:
    """Word-level vocabulary: specials, corpus words, then grown type tokens."""

    def __init__(self, words: Iterable[str], type_names: Sequence[str] = ()) -> None:
        self._tokens: list[str] = list(SPECIALS)
        self._ids: dict[str, int] = {tok: i for i, tok in enumerate(self._tokens)}
        for word in sorted(set(words) - set(SPECIALS)):
            self._ids[word] = len(self._tokens)
            self._tokens.append(word)
        self.type_token_ids: list[int] = []
        self.add_type_tokens(type_names)

    def add_type_tokens(self, type_names: Iterable[str]) -> list[int]:
        """Append one dedicated token per new entity type; returns their ids."""
        added: list[int] = []
        for name in type_names:
            token = f"<type:{name}>"
            if token in self._ids:
                raise ConfigError(f"type token for {name!r} already present")
            token_id = len(self._tokens)
            self._ids[token] = token_id
            self._tokens.append(token)
            self.type_token_ids.append(token_id)
            added.append(token_id)
        return added

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    def word_id(self, word: str) -> int:
        return self._ids.get(word, self._ids[UNK])

    def encode_words(self, tokens: Sequence[str], n: int) -> list[int]:
        if len(tokens) > n:
            raise ModelError(
                f"sentence of {len(tokens)} tokens exceeds padded length n={n}; "
                "refusing to truncate"
            )
        ids = [self.word_id(tok) for tok in tokens]
        ids.extend([self.pad_id] * (n - len(ids)))
        return ids

    def to_dict(self) -> dict:
        return {"tokens": self._tokens, "type_token_ids": list(self.type_token_ids)}

    @classmethod
    def from_dict(cls, payload: dict) -> "Vocabulary":
        vocab = cls.__new__(cls)
        vocab._tokens = list(payload["tokens"])
        vocab._ids = {tok: i for i, tok in enumerate(vocab._tokens)}
        vocab.type_token_ids = list(payload["type_token_ids"])
        return vocab

    @classmethod
    def from_sentences(cls, sentences: Iterable) -> "Vocabulary":
        words: set[str] = set()
        for sentence in sentences:
            words.update(sentence.tokens)
        return cls(words)


class MultiHeadAttention(nn.Module):
    """Plain scaled dot-product attention over batch-first tensors."""

    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(
        self,
        queries: torch.Tensor,
        keys: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        causal: bool = False,
    ) -> torch.Tensor:
        batch, q_len, dim = queries.shape
        k_len = keys.shape[1]
        shape = (batch, -1, self.heads, self.head_dim)
        q = self.query(queries).view(batch, q_len, self.heads, self.head_dim).transpose(1, 2)
        k = self.key(keys).view(*shape).transpose(1, 2)
        v = self.value(keys).view(*shape).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / self.head_dim**0.5
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.triu(
                torch.ones(q_len, k_len, dtype=torch.bool, device=scores.device), diagonal=1
            )
            scores = scores.masked_fill(future, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        context = (attn @ v).transpose(1, 2).reshape(batch, q_len, dim)
        return self.out(context)


class FeedForward(nn.Module):
    def __init__(self, dim: int, ffn_dim: int, dropout: float) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, ffn_dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ffn_dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float) -> None:
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, key_mask=mask))
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float) -> None:
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        memory_mask: torch.Tensor,
    ) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, causal=True))
        x = x + self.drop(self.cross_attn(self.norm2(x), memory, key_mask=memory_mask))
        x = x + self.drop(self.ffn(self.norm3(x)))
        return x


class TinySeq2Seq(nn.Module):
    """Encoder-decoder stack over a shared, growable token embedding."""

    def __init__(self, spec: BackboneSpec, vocab_size: int, max_source_len: int) -> None:
        super().__init__()
        self.spec = spec
        dim = spec.hidden_dim
        self.embedding = nn.Embedding(vocab_size, dim)
        self.enc_pos = nn.Embedding(max_source_len, dim)
        self.dec_pos = nn.Embedding(spec.max_target_len + 1, dim)
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(dim, spec.heads, spec.ffn_dim, spec.dropout)
            for _ in range(spec.encoder_layers)
        )
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(dim, spec.heads, spec.ffn_dim, spec.dropout)
            for _ in range(spec.decoder_layers)
        )
        self.enc_norm = nn.LayerNorm(dim)
        self.dec_norm = nn.LayerNorm(dim)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)

    def grow_embedding(self, extra_rows: torch.Tensor) -> None:
        """Append rows to the shared embedding, keeping existing weights."""
        old = self.embedding.weight.data
        grown = nn.Embedding(old.shape[0] + extra_rows.shape[0], old.shape[1])
        grown.to(dtype=old.dtype, device=old.device)
        with torch.no_grad():
            grown.weight[: old.shape[0]] = old
            grown.weight[old.shape[0] :] = extra_rows.to(dtype=old.dtype, device=old.device)
        self.embedding = grown

    def encode(self, token_ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(token_ids.shape[1], device=token_ids.device)
        x = self.embedding(token_ids) + self.enc_pos(positions)[None, :, :]
        for layer in self.encoder_layers:
            x = layer(x, mask)
        return self.enc_norm(x)

    def decode(
        self,
        input_ids: torch.Tensor,
        memory: torch.Tensor,
        memory_mask: torch.Tensor,
    ) -> torch.Tensor:
        length = input_ids.shape[1]
        if length > self.dec_pos.num_embeddings:
            raise ModelError(
                f"decoder input of length {length} exceeds positional capacity "
                f"{self.dec_pos.num_embeddings}"
            )
        positions = torch.arange(length, device=input_ids.device)
        x = self.embedding(input_ids) + self.dec_pos(positions)[None, :, :]
        for layer in self.decoder_layers:
            x = layer(x, memory, memory_mask)
        return self.dec_norm(x)
