"""Command-line entry point: data preparation, training runs, reports.

Exit codes: 0 success, 2 usage or configuration error, 3 data validation
error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from .codec import TripletOrder
from .config import load_config, write_run_manifest
from .corpus import (
    CLSchedule,
    Corpus,
    infer_coarse_labels,
    load_corpus,
    make_schedule,
    resolve_order,
    schedule_from_manifest,
    schedule_manifest,
)
from .errors import ConfigError, TripnerError
from .synth import SynthSpec, generate_corpus, write_corpus
from .trainer import detect_padded_length, run_cl_sequence, run_noncl_upperbound
from . import reporting

logger = logging.getLogger(__name__)

PROTOCOLS = {
    "split-all": ("split", "all"),
    "split-filter": ("split", "filter"),
    "filter-all": ("filter", "all"),
    "filter-filter": ("filter", "filter"),
}
ABLATIONS = ("no-ctf", "kd-as-ce", "unconstrained-decode", "no-kd")


def _runs_root() -> Path:
    return Path(os.environ.get("TRIPNER_RUNS_ROOT", "."))


def _resolve_out(path: str) -> Path:
    candidate = Path(path)
    return candidate if candidate.is_absolute() else _runs_root() / candidate


def _load_corpus_parts(train: Path, dev: Path, test: Path, fmt: str) -> Corpus:
    return Corpus(
        train=load_corpus(train, fmt),
        dev=load_corpus(dev, fmt),
        test=load_corpus(test, fmt),
    )


def cmd_prepare(args: argparse.Namespace) -> int:
    if args.protocol not in PROTOCOLS:
        raise ConfigError(
            f"unknown protocol {args.protocol!r}; choose one of {sorted(PROTOCOLS)}"
        )
    train_protocol, test_protocol = PROTOCOLS[args.protocol]
    corpus = _load_corpus_parts(
        Path(args.train), Path(args.dev), Path(args.test), args.format
    )
    inventory = corpus.type_inventory()
    coarse_of: dict[str, str] | None = None
    if args.coarse_map:
        coarse_path = Path(args.coarse_map)
        if not coarse_path.exists():
            raise ConfigError(f"coarse map not found: {coarse_path}")
        coarse_of = json.loads(coarse_path.read_text(encoding="utf-8"))
    elif any("-" in name for name in inventory):
        # coarse-fine style type names; the dash prefix is the coarse label
        coarse_of = infer_coarse_labels(inventory)
    order, order_name = resolve_order(args.order, inventory, coarse_of)
    schedule = make_schedule(
        corpus,
        order,
        train_protocol,
        test_protocol,
        seed=args.seed,
        order_name=order_name,
        coarse_of=coarse_of,
    )
    manifest = schedule_manifest(schedule)
    summary = [
        {
            "task": task.index,
            "new_types": list(task.new_types),
            "train": len(task.train),
            "dev": len(task.dev),
            "test": len(task.test),
        }
        for task in schedule.tasks
    ]
    manifest["summary"] = summary
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    print(f"wrote schedule manifest: {out_path}")
    for entry in summary:
        print(
            "task {task}: types={new_types} train={train} dev={dev} test={test}".format(
                **entry
            )
        )
    return 0


def _apply_ablations(train_cfg, ablations: list[str], composition: str | None):
    for name in ablations:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    if "no-ctf" in ablations:
        train_cfg = replace(train_cfg, ctf=False)
    if "kd-as-ce" in ablations:
        train_cfg = replace(train_cfg, kd_form="ce")
    if "unconstrained-decode" in ablations:
        train_cfg = replace(train_cfg, constrained_decode=False)
    if "no-kd" in ablations:
        train_cfg = replace(train_cfg, alpha=0.0)
    if composition:
        train_cfg = replace(train_cfg, composition=TripletOrder(composition))
    return train_cfg


def _sweep_values(raw: str) -> list[float]:
    try:
        values = [float(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --sweep-delta value list {raw!r}") from exc
    if not values or not all(0.0 <= v <= 1.0 for v in values):
        raise ConfigError("--sweep-delta values must lie in [0, 1]")
    return values


def _truncate(schedule: CLSchedule, steps: int) -> CLSchedule:
    return CLSchedule(
        tasks=schedule.tasks[:steps],
        train_protocol=schedule.train_protocol,
        test_protocol=schedule.test_protocol,
        order_name=schedule.order_name,
        seed=schedule.seed,
        coarse_of=schedule.coarse_of,
    )


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise ConfigError(f"schedule manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    corpus = _load_corpus_parts(
        config.corpus_train, config.corpus_dev, config.corpus_test, config.corpus_format
    )
    schedule = schedule_from_manifest(corpus, manifest)
    ablations = list(args.ablate or [])
    if args.mode == "noncl" and ablations:
        raise ConfigError("ablations only apply to --mode cl")
    train_cfg = _apply_ablations(config.train, ablations, args.composition)
    run_dir = _resolve_out(args.out_dir)
    (run_dir / "logs").mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "logs" / "train.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    package_logger = logging.getLogger("tripner")
    package_logger.addHandler(handler)
    try:
        write_run_manifest(
            run_dir,
            Path(args.config),
            manifest_path,
            mode=args.mode,
            ablations=ablations,
            composition=train_cfg.composition.value,
            train_config=train_cfg.to_dict(),
        )
        n = config.padded_length or detect_padded_length(schedule)
        if args.sweep_delta:
            if args.mode != "cl":
                raise ConfigError("--sweep-delta requires --mode cl")
            if len(schedule.tasks) < 2:
                raise ConfigError("--sweep-delta needs a schedule with at least 2 tasks")
            values = _sweep_values(args.sweep_delta)
            run_cl_sequence(_truncate(schedule, 1), train_cfg, config.model, run_dir, n=n)
            for value in values:
                sub = run_dir / "sweep" / f"delta_{value:g}"
                for part in (
                    "checkpoints/step1", "records/step1.json", "metrics/step1.json",
                ):
                    source = run_dir / part
                    target = sub / part
                    if target.exists():
                        continue
                    target.parent.mkdir(parents=True, exist_ok=True)
                    if source.is_dir():
                        shutil.copytree(source, target)
                    else:
                        shutil.copy2(source, target)
                sweep_cfg = replace(train_cfg, delta_default=value, delta_per_type={})
                run_cl_sequence(_truncate(schedule, 2), sweep_cfg, config.model, sub, n=n)
                print(f"sweep delta={value:g} complete: {sub}")
            print(f"threshold sweep written under {run_dir / 'sweep'}")
            return 0
        if args.mode == "cl":
            records = run_cl_sequence(schedule, train_cfg, config.model, run_dir, n=n)
        else:
            records = run_noncl_upperbound(schedule, train_cfg, config.model, run_dir, n=n)
    finally:
        package_logger.removeHandler(handler)
        handler.close()
    for record in records:
        macro = record.metrics.macro_f1 if record.metrics else float("nan")
        print(f"step {record.step}: macro F1 {macro:.4f}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    out_dir = _resolve_out(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cl_runs: dict[str, list] = {}
    noncl_runs: list[list] = []
    sweep_sources: list[Path] = []
    for raw in args.runs:
        run_dir = Path(raw)
        if not run_dir.exists():
            raise ConfigError(f"run directory not found: {run_dir}")
        if (run_dir / "sweep").exists():
            sweep_sources.append(run_dir)
            continue
        series = reporting.load_series(run_dir)
        if reporting.run_mode(run_dir) == "noncl":
            noncl_runs.append(series)
        else:
            cl_runs[reporting.run_label(run_dir)] = series
    if args.average:
        table = reporting.write_order_averaged_table(
            out_dir / "f1_table_averaged.csv", list(cl_runs.values()), noncl_runs
        )
        print(f"wrote {table}")
    elif cl_runs or noncl_runs:
        if len(noncl_runs) > 1:
            raise ConfigError(
                "give at most one non-incremental run (or pass --average)"
            )
        noncl_series = noncl_runs[0] if noncl_runs else None
        table = reporting.write_f1_table(out_dir / "f1_table.csv", cl_runs, noncl_series)
        print(f"wrote {table}")
    if cl_runs:
        for label, series in cl_runs.items():
            safe = label.replace("/", "_").replace(" ", "_")
            plot = reporting.plot_type_curves(out_dir / f"curves_{safe}.png", label, series)
            print(f"wrote {plot}")
    for run_dir in sweep_sources:
        points = reporting.load_sweep(run_dir)
        plot = reporting.plot_delta_sweep(
            out_dir / f"delta_sweep_{run_dir.name}.png", points
        )
        print(f"wrote {plot}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        train_size=args.train_size,
        dev_size=args.dev_size,
        test_size=args.test_size,
        seed=args.seed,
    )
    corpus = generate_corpus(spec)
    out_dir = Path(args.out_dir)
    paths = write_corpus(corpus, out_dir)
    config = {
        "corpus": {
            "train": paths["train"].name,
            "dev": paths["dev"].name,
            "test": paths["test"].name,
            "format": "jsonl",
        },
        "model": {"hidden_dim": 64, "heads": 4, "max_target_len": 48},
        "train": {
            "learning_rate": 1e-3,
            "epochs": 10,
            "batch_size": 8,
            "seed": 13,
            "max_triplets": 6,
            "delta_default": 0.6,
        },
    }
    config_path = out_dir / "config.json"
    config_path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    print(f"wrote corpus under {out_dir} ({len(corpus.train)} train sentences)")
    print(f"wrote example config: {config_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tripner",
        description="Class-incremental NER via entity-triplet sequence generation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    prepare = sub.add_parser("prepare", help="carve a corpus into a task schedule")
    prepare.add_argument("--train", required=True, help="train split file")
    prepare.add_argument("--dev", required=True, help="dev split file")
    prepare.add_argument("--test", required=True, help="test split file")
    prepare.add_argument("--format", default="jsonl", choices=["jsonl", "column"])
    prepare.add_argument(
        "--protocol", required=True, help="split-all | split-filter | filter-all | filter-filter"
    )
    prepare.add_argument(
        "--order", required=True,
        help="order name (onto-1..6, fewnerd-1..4) or inline spec like 'ORG;PER,GPE'",
    )
    prepare.add_argument("--seed", type=int, default=11)
    prepare.add_argument("--coarse-map", help="JSON file mapping fine types to coarse labels")
    prepare.add_argument("--out", required=True, help="schedule manifest path")
    prepare.set_defaults(func=cmd_prepare)

    train = sub.add_parser("train", help="run a training sequence")
    train.add_argument("--manifest", required=True, help="schedule manifest from prepare")
    train.add_argument("--config", required=True, help="experiment config JSON")
    train.add_argument("--mode", default="cl", choices=["cl", "noncl"])
    train.add_argument(
        "--ablate", action="append", choices=list(ABLATIONS),
        help="repeatable: no-ctf, kd-as-ce, unconstrained-decode, no-kd",
    )
    train.add_argument("--composition", choices=["SET", "STE", "TSE"])
    train.add_argument(
        "--sweep-delta", help="comma list of thresholds; runs the step-2 sweep protocol"
    )
    train.add_argument("--out-dir", required=True, help="run directory")
    train.set_defaults(func=cmd_train)

    report = sub.add_parser("report", help="tables and plots from finished runs")
    report.add_argument("runs", nargs="+", help="run directories")
    report.add_argument("--out-dir", required=True)
    report.add_argument(
        "--average", action="store_true",
        help="average macro F1 across the given runs (one run per learning order)",
    )
    report.set_defaults(func=cmd_report)

    synth = sub.add_parser("synth", help="generate the synthetic benchmark corpus")
    synth.add_argument("--out-dir", required=True)
    synth.add_argument("--seed", type=int, default=7)
    synth.add_argument("--train-size", type=int, default=900)
    synth.add_argument("--dev-size", type=int, default=90)
    synth.add_argument("--test-size", type=int, default=150)
    synth.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TripnerError as exc:
        logger.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
