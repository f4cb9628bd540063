"""Command-line experiment runner.

Verbs: synth | rasterize | grid | adapt | matched | eval | report.

Every command is deterministic given its config and seeds. Exit codes:
0 success, 2 configuration error, 3 data error, 4 training divergence.
The ATBSEG_CACHE environment variable supplies the default checkpoint /
registry directory when the corresponding flag is omitted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import jsonschema

from . import metrics, phantom, train
from .corpus import load_corpus, save_mask_png
from .errors import AtbsegError, ConfigError, DataError
from .figures import write_report_figures
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .rasterize import masks_from_contours
from .registry import Registry

CACHE_ENV_VAR = "ATBSEG_CACHE"


def _cache_dir(flag_value: str | None, flag_name: str) -> Path:
    if flag_value:
        return Path(flag_value)
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env)
    raise ConfigError(f"{flag_name} not given and {CACHE_ENV_VAR} is not set")


def _validate_config(obj: dict, schema: dict, source: str) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(obj), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        pointer = "/" + "/".join(str(p) for p in err.absolute_path)
        raise ConfigError(f"{source}: at {pointer}: {err.message}")


def _load_json(path: str | Path, source: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{source}: file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON: {exc}") from exc


_MODEL_SCHEMA = {
    "type": "object",
    "properties": {
        "stages": {"type": "integer", "minimum": 2, "maximum": 5},
        "base_channels": {"type": "integer", "minimum": 4},
        "auto_pad": {"type": "boolean"},
        "variant": {"enum": list(("segnet-style", "unet-style"))},
    },
    "additionalProperties": False,
}

_TRAIN_SCHEMA = {
    "type": "object",
    "properties": {
        "max_epochs": {"type": "integer", "minimum": 1},
        "patience": {"type": "integer", "minimum": 1},
        "min_delta": {"type": "number", "minimum": 0},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
    },
    "additionalProperties": False,
}

GRID_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["corpus", "groups", "splits", "architectures"],
    "properties": {
        "corpus": {"type": "string"},
        "groups": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "array",
                "minItems": 1,
                "items": {"type": "string", "pattern": "^[A-Za-z][0-9]+$"},
            },
        },
        "splits": {
            "type": "array",
            "minItems": 1,
            "items": {"enum": ["2:1", "4:1", "8:2"]},
        },
        "architectures": {
            "type": "array",
            "minItems": 1,
            "items": {"enum": ["segnet-style", "unet-style"]},
        },
        "model": _MODEL_SCHEMA,
        "train": _TRAIN_SCHEMA,
    },
    "additionalProperties": False,
}

POOL_SPEC_SCHEMA = {
    "type": "object",
    "required": ["manifest", "subjects", "pool", "test"],
    "properties": {
        "manifest": {"type": "string"},
        "subjects": {"type": "array", "minItems": 1, "items": {"type": "string"}},
        "pool": {
            "type": "object",
            "required": ["mode"],
            "properties": {
                "mode": {"enum": ["videos", "frames"]},
                "pool_video": {"type": "integer", "minimum": 1},
                "val_video": {"type": "integer", "minimum": 1},
                "video": {"type": "integer", "minimum": 1},
                "pool_size": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "test": {
            "type": "object",
            "properties": {
                "videos": {"type": "array", "minItems": 1,
                           "items": {"type": "integer", "minimum": 1}},
            },
            "required": ["videos"],
            "additionalProperties": False,
        },
        "frames": {"type": "array", "minItems": 1,
                   "items": {"enum": [1, 5, 10, 15]}},
        "rounds": {"type": "integer", "minimum": 1},
        "train": _TRAIN_SCHEMA,
        "seed": {"type": "integer"},
    },
    "additionalProperties": False,
}


def _model_config_from(obj: dict, width: int, height: int) -> ModelConfig:
    return ModelConfig(
        variant=obj.get("variant", "segnet-style"),
        input_width=width,
        input_height=height,
        stages=obj.get("stages", 3),
        base_channels=obj.get("base_channels", 16),
        auto_pad=obj.get("auto_pad", False),
    )


def _train_config_from(obj: dict, default_lr: float = 1e-3) -> train.TrainConfig:
    return train.TrainConfig(
        max_epochs=obj.get("max_epochs", 30),
        patience=obj.get("patience", 5),
        min_delta=obj.get("min_delta", 1e-4),
        learning_rate=obj.get("learning_rate", default_lr),
        batch_size=obj.get("batch_size", 8),
        seed=obj.get("seed", 0),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    manifest_a, manifest_b = phantom.generate_benchmark_suite(out, master_seed=args.seed)
    print(manifest_a)
    print(manifest_b)
    return 0


def cmd_rasterize(args) -> int:
    corpus = load_corpus(Path(args.manifest))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    w, h = corpus.profile.frame_width, corpus.profile.frame_height
    count = 0
    for sid in corpus.subject_ids():
        for clip in corpus.clips_for(sid):
            for frame, cs in zip(clip.frames, clip.annotations):
                triple = masks_from_contours(cs, w, h)
                stem = f"{sid}_v{clip.video_index:02d}_f{frame.frame_index:04d}"
                for m, grid in enumerate(triple.masks(), start=1):
                    save_mask_png(grid, out / f"{stem}_m{m}.png")
                count += 1
    print(f"rasterized {count} frames -> {out}")
    return 0


def cmd_grid(args) -> int:
    config = _load_json(args.config, "grid config")
    _validate_config(config, GRID_CONFIG_SCHEMA, f"grid config {args.config}")
    corpus = load_corpus(Path(config["corpus"]))
    profile = corpus.profile
    model_config = _model_config_from(
        config.get("model", {}), profile.frame_width, profile.frame_height
    )
    train_config = _train_config_from(config.get("train", {}))
    registry = Registry(_cache_dir(args.registry, "--registry"))
    splits = [train.SplitSpec.from_name(s) for s in config["splits"]]
    entries = train.pretrain_grid(
        corpus,
        config["groups"],
        splits,
        config["architectures"],
        model_config,
        train_config,
        registry,
        jobs=args.jobs,
        log=print,
    )
    print(f"registry {registry.directory}: {len(entries)} entries")
    return 0


def _build_pool_sets(corpus, spec: dict):
    subjects = spec["subjects"]
    pool_cfg = spec["pool"]
    pool, validation = [], []
    if pool_cfg["mode"] == "videos":
        if "pool_video" not in pool_cfg or "val_video" not in pool_cfg:
            raise ConfigError("pool mode 'videos' needs pool_video and val_video")
        for sid in subjects:
            pool.extend(train.rasterized_samples(corpus, sid, pool_cfg["pool_video"]))
            validation.extend(train.rasterized_samples(corpus, sid, pool_cfg["val_video"]))
    else:
        if "video" not in pool_cfg or "pool_size" not in pool_cfg:
            raise ConfigError("pool mode 'frames' needs video and pool_size")
        n_pool = pool_cfg["pool_size"]
        for sid in subjects:
            samples = train.rasterized_samples(corpus, sid, pool_cfg["video"])
            if len(samples) <= n_pool:
                raise ConfigError(
                    f"subject {sid}: video {pool_cfg['video']} has {len(samples)} frames; "
                    f"needs more than pool_size {n_pool}"
                )
            pool.extend(samples[:n_pool])
            validation.extend(samples[n_pool:])
    return pool, validation


def _build_test_set(corpus, spec: dict) -> list[metrics.EvalSample]:
    out = []
    for sid in spec["subjects"]:
        for vidx in spec["test"]["videos"]:
            out.extend(train.eval_samples(train.rasterized_samples(corpus, sid, vidx)))
    return out


def cmd_adapt(args) -> int:
    spec = _load_json(args.pool, "pool spec")
    _validate_config(spec, POOL_SPEC_SCHEMA, f"pool spec {args.pool}")
    frame_counts = (
        [int(k) for k in args.frames.split(",")] if args.frames else spec.get("frames", [1, 5, 10, 15])
    )
    rounds = args.rounds if args.rounds else spec.get("rounds", 10)

    corpus = load_corpus(Path(spec["manifest"]))
    pool, validation = _build_pool_sets(corpus, spec)
    test_set = _build_test_set(corpus, spec)
    adapt_config = _train_config_from(spec.get("train", {}), default_lr=train.ADAPT_LEARNING_RATE)

    registry = Registry(_cache_dir(args.registry, "--registry"))
    entries = registry.load_entries()
    if not entries:
        raise DataError(f"registry {registry.directory} has no entries")

    adaptation = train.AdaptationSpec(
        frame_counts=tuple(frame_counts),
        rounds=rounds,
        pool=tuple(pool),
        validation=tuple(validation),
        base_seed=spec.get("seed", 0),
    )

    records = []
    ckpt_dir = Path(args.checkpoints) if args.checkpoints else None
    for entry in entries:
        base = registry.load_model(entry)
        for k in adaptation.frame_counts:
            for round_index in range(1, adaptation.rounds + 1):
                result = train.fine_tune_one(base, adaptation, k, round_index, adapt_config)
                records.extend(
                    metrics.evaluate_model(
                        result.model,
                        test_set,
                        model_name=f"{entry.architecture}:{entry.name}",
                        k=k,
                        round_index=round_index,
                    )
                )
                if ckpt_dir is not None:
                    save_checkpoint(
                        result.model,
                        ckpt_dir / f"{entry.architecture}__{entry.name}__k{k}_r{round_index}.pt",
                        epoch=len(result.history.epochs),
                        val_metrics={"val_loss": result.history.best_val_loss},
                    )
        print(f"adapted {entry.architecture} {entry.name}: "
              f"{len(adaptation.frame_counts) * adaptation.rounds} runs")
    metrics.append_records_csv(Path(args.out), records)
    print(f"wrote {len(records)} metric rows -> {args.out}")
    return 0


def cmd_matched(args) -> int:
    corpus = load_corpus(Path(args.manifest))
    extra = _load_json(args.config, "matched config") if args.config else {}
    _validate_config(
        extra,
        {"type": "object",
         "properties": {"model": _MODEL_SCHEMA, "train": _TRAIN_SCHEMA},
         "additionalProperties": False},
        "matched config",
    )
    subjects = args.subjects.split(",")
    profile = corpus.profile
    model_config = _model_config_from(
        extra.get("model", {}), profile.frame_width, profile.frame_height
    )
    train_config = _train_config_from(extra.get("train", {}))
    model, history = train.matched_condition(
        corpus, subjects, args.rule, model_config, train_config
    )
    out = Path(args.checkpoint_out)
    save_checkpoint(
        model, out,
        epoch=len(history.epochs),
        val_metrics={"val_loss": history.best_val_loss,
                     "val_dice": list(history.best_val_dice() or ())},
    )
    print(f"matched model -> {out} (best val loss {history.best_val_loss:.4f}, "
          f"epoch {history.best_epoch}/{len(history.epochs)})")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(Path(args.checkpoint))
    corpus = load_corpus(Path(args.manifest))
    subjects = args.subjects.split(",")
    videos = [int(v) for v in args.videos.split(",")]
    test_set = []
    for sid in subjects:
        for vidx in videos:
            test_set.extend(train.eval_samples(train.rasterized_samples(corpus, sid, vidx)))
    records = metrics.evaluate_model(
        model, test_set, model_name=args.name, k=args.k, round_index=args.round
    )
    metrics.append_records_csv(Path(args.out), records)
    for r in records:
        print(f"{r.model_name} mask {r.mask_id}: pca={r.pca:.4f} dice={r.dice:.4f}")
    return 0


def cmd_report(args) -> int:
    records = metrics.read_records_csv(Path(args.records))
    matched = metrics.read_records_csv(Path(args.matched))
    if not records:
        raise DataError(f"no records in {args.records}")
    aggregates = metrics.aggregate(records, matched)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_aggregates_csv(out / "aggregates.csv", aggregates)
    metrics.write_aggregates_json(out / "aggregates.json", aggregates)

    matched_by_mask: dict[int, dict[str, float]] = {}
    for mask_id in sorted({r.mask_id for r in matched}):
        rows = [r for r in matched if r.mask_id == mask_id]
        matched_by_mask[mask_id] = {
            "pca": sum(r.pca for r in rows) / len(rows),
            "dice": sum(r.dice for r in rows) / len(rows),
        }
    figure_paths = write_report_figures(out, aggregates, matched_by_mask)

    summary = {"max_relative_to_matched": {}}
    for metric_name in ("pca", "dice"):
        attr = f"relative_to_matched_{metric_name}"
        best = max(aggregates, key=lambda a: getattr(a, attr))
        summary["max_relative_to_matched"][metric_name] = {
            "value": getattr(best, attr),
            "model": best.model_name,
            "k": best.k,
            "mask": best.mask_id,
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    for p in figure_paths:
        print(p)
    print(out / "aggregates.csv")
    return 0


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atbseg",
        description="Air-tissue-boundary segmentation experiments: phantom corpora, "
                    "grid pretraining, few-frame adaptation, and reporting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the two phantom benchmark corpora")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=phantom.DEFAULT_MASTER_SEED)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rasterize", help="write binary mask PNGs for a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("grid", help="pretrain the base-model grid into a registry")
    p.add_argument("--config", required=True, help="grid config JSON")
    p.add_argument("--registry", help=f"registry dir (default: ${CACHE_ENV_VAR})")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("adapt", help="fine-tune every base model and evaluate")
    p.add_argument("--registry", help=f"registry dir (default: ${CACHE_ENV_VAR})")
    p.add_argument("--pool", required=True, help="pool spec JSON")
    p.add_argument("--frames", help="comma list overriding the spec, e.g. 1,5,10,15")
    p.add_argument("--rounds", type=int, help="override rounds")
    p.add_argument("--out", required=True, help="metric records CSV (appended)")
    p.add_argument("--checkpoints", help="optional dir for adapted checkpoints")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("matched", help="train a matched-condition benchmark model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--subjects", required=True, help="comma list, e.g. F5,M5")
    p.add_argument("--rule", required=True, choices=list(train.MATCHED_RULES))
    p.add_argument("--config", help="JSON with optional model/train sections")
    p.add_argument("--checkpoint-out", required=True)
    p.set_defaults(func=cmd_matched)

    p = sub.add_parser("eval", help="evaluate a checkpoint on test videos")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--subjects", required=True)
    p.add_argument("--videos", required=True, help="comma list, e.g. 13,14,15")
    p.add_argument("--name", required=True, help="model name for the records")
    p.add_argument("--k", type=int, default=metrics.BASE_K,
                   help="frame count column (-1 matched, 0 base)")
    p.add_argument("--round", type=int, default=0)
    p.add_argument("--out", required=True, help="metric records CSV (appended)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate records and emit SVG figures")
    p.add_argument("--records", required=True)
    p.add_argument("--matched", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AtbsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


def entrypoint() -> None:
    sys.exit(main())
