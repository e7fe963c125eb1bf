"""Experiment configuration: JSON file format, validation, and loading."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .backbone import BackboneSpec
from .errors import ConfigError
from .trainer import TrainConfig

CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["corpus"],
    "properties": {
        "corpus": {
            "type": "object",
            "additionalProperties": False,
            "required": ["train", "dev", "test"],
            "properties": {
                "train": {"type": "string"},
                "dev": {"type": "string"},
                "test": {"type": "string"},
                "format": {"enum": ["jsonl", "column"]},
                "coarse_map": {"type": ["string", "null"]},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["tiny-scratch", "pretrained-seq2seq"]},
                "hidden_dim": {"type": "integer", "minimum": 1},
                "encoder_layers": {"type": "integer", "minimum": 1},
                "decoder_layers": {"type": "integer", "minimum": 1},
                "heads": {"type": "integer", "minimum": 1},
                "ffn_dim": {"type": ["integer", "null"], "minimum": 1},
                "max_target_len": {"type": "integer", "minimum": 3},
                "tie_embeddings": {"type": "boolean"},
                "dropout": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "warmup_ratio": {"type": "number", "minimum": 0, "maximum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "alpha": {"type": "number", "minimum": 0},
                "beta": {"type": "number", "minimum": 0},
                "composition": {"enum": ["SET", "STE", "TSE"]},
                "ctf": {"type": "boolean"},
                "kd_form": {"enum": ["kl", "ce"]},
                "seed": {"type": "integer"},
                "max_triplets": {"type": "integer", "minimum": 0},
                "constrained_decode": {"type": "boolean"},
                "rescore_pruned_teacher": {"type": "boolean"},
                "early_stopping": {"type": "boolean"},
                "weight_decay": {"type": "number", "minimum": 0},
                "grad_clip": {"type": "number", "minimum": 0},
                "new_type_noise": {"type": "number", "minimum": 0},
                "delta_default": {"type": "number", "minimum": 0, "maximum": 1},
                "delta_per_type": {
                    "type": "object",
                    "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
                },
                "eval_batch_size": {"type": "integer", "minimum": 1},
            },
        },
        "padded_length": {"type": ["integer", "null"], "minimum": 1},
    },
}


@dataclass
class ExperimentConfig:
    """Everything a run needs beyond the schedule manifest."""

    corpus_train: Path
    corpus_dev: Path
    corpus_test: Path
    corpus_format: str = "jsonl"
    coarse_map: Path | None = None
    model: BackboneSpec = field(default_factory=BackboneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    padded_length: int | None = None


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate an experiment config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    try:
        jsonschema.validate(payload, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        location = "/".join(str(part) for part in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: invalid config at {location}: {exc.message}") from exc
    corpus = payload["corpus"]
    base = path.parent

    def resolve(raw: str) -> Path:
        candidate = Path(raw)
        return candidate if candidate.is_absolute() else base / candidate

    model = BackboneSpec(**payload.get("model", {}))
    train = TrainConfig(**payload.get("train", {}))
    coarse_map = corpus.get("coarse_map")
    return ExperimentConfig(
        corpus_train=resolve(corpus["train"]),
        corpus_dev=resolve(corpus["dev"]),
        corpus_test=resolve(corpus["test"]),
        corpus_format=corpus.get("format", "jsonl"),
        coarse_map=resolve(coarse_map) if coarse_map else None,
        model=model,
        train=train,
        padded_length=payload.get("padded_length"),
    )


def content_hash(*paths: str | Path) -> str:
    """Stable hash over the raw bytes of the given input files."""
    digest = hashlib.sha256()
    for path in paths:
        digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def write_run_manifest(
    run_dir: Path,
    config_path: Path,
    manifest_path: Path,
    mode: str,
    ablations: list[str],
    composition: str,
    train_config: dict | None = None,
) -> dict:
    """Record what produced a run directory; reruns with the same hash reuse it.

    The resolved training config is embedded because ablation flags modify it
    beyond what the config file alone shows.
    """
    payload = {
        "mode": mode,
        "ablations": sorted(ablations),
        "composition": composition,
        "config_path": str(config_path),
        "schedule_manifest_path": str(manifest_path),
        "inputs_hash": content_hash(config_path, manifest_path),
    }
    if train_config is not None:
        payload["train_config"] = train_config
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.json").write_text(
        json.dumps(payload, indent=2), encoding="utf-8"
    )
    return payload
