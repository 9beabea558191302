"""Command-line orchestration: prepare data, pre-train, evaluate.

Every command is reproducible from its config file and seed alone, and each
run directory receives an echo of the fully resolved configuration. Config
files are flat ``key=value`` text (``#`` comments and blank lines ignored).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluate as E
from . import ingest as I
from . import model as M
from . import trainer as TR

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class DataError(Exception):
    """Unreadable or invariant-violating input data."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# flat key=value config files


def read_kv(path) -> dict[str, str]:
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}: bad config line {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv(kv: dict[str, str], path) -> None:
    lines = [f"{k}={v}" for k, v in sorted(kv.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def _echo_config(out_dir: Path, kv: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_kv(kv, out_dir / "config.txt")


# ---------------------------------------------------------------------------
# prepare


def cmd_prepare(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    if args.synthetic:
        raw = _generate_synthetic(args, rng)
    elif args.csv_dir:
        raw = _import_csv_dir(args)
    else:
        raise DataError("nothing to prepare: pass --synthetic N or --csv-dir DIR")

    stats = I.compute_stats(_stats_view(raw))
    manifest_dir = Path(args.manifest).resolve().parent
    entries = []
    rejected = 0
    for rec in raw:
        try:
            done = I.preprocess_record(rec, stats, rng)
        except I.RecordRejected as exc:
            print(f"rejected: {exc}", file=sys.stderr)
            rejected += 1
            continue
        if done is None:
            print(f"rejected: record {rec.record_id} shorter than 10 s", file=sys.stderr)
            rejected += 1
            continue
        path = I.write_record(done, out_dir / rec.record_id)
        entries.append((str(path.resolve().relative_to(manifest_dir)) if path.resolve().is_relative_to(manifest_dir) else str(path.resolve()), done.database_id))
    if not entries:
        raise DataError(f"all {rejected} records were rejected")

    I.write_manifest(entries, args.manifest)
    I.save_stats(stats, args.stats)
    _echo_config(
        out_dir,
        {
            "command": "prepare",
            "seed": str(args.seed),
            "synthetic": str(args.synthetic or 0),
            "seconds": str(args.seconds),
            "classes": str(args.classes or 0),
            "csv_dir": args.csv_dir or "",
            "rate": str(args.rate),
            "database_id": args.database_id,
            "records": str(len(entries)),
            "rejected": str(rejected),
        },
    )
    print(f"prepared {len(entries)} records ({rejected} rejected) -> {args.manifest}")
    return 0


def _generate_synthetic(args, rng) -> list[I.EcgRecord]:
    records = []
    width = len(str(max(args.synthetic - 1, 1)))
    for i in range(args.synthetic):
        class_id = int(rng.integers(args.classes)) if args.classes else None
        rec = I.synth_ecg(rng, seconds=args.seconds, class_id=class_id, record_id=f"syn{i:0{width}d}")
        if args.classes:
            labels = np.zeros(args.classes, dtype=np.float32)
            labels[class_id] = 1.0
            rec.labels = labels
            u = rng.random()
            rec.fold = "train" if u < 0.7 else ("val" if u < 0.85 else "test")
        records.append(rec)
    return records


def _import_csv_dir(args) -> list[I.EcgRecord]:
    paths = sorted(Path(args.csv_dir).glob("*.csv"))
    if not paths:
        raise DataError(f"no .csv files under {args.csv_dir}")
    try:
        return [I.import_csv(p, rate=args.rate, database_id=args.database_id) for p in paths]
    except (ValueError, OSError) as exc:
        raise DataError(str(exc)) from exc


def _stats_view(records):
    """What normalization sees: NaN-interpolated, resampled, wander-filtered."""
    for rec in records:
        rec = I.interpolate_nans(rec)
        rec = I.resample_500hz(rec)
        if rec.database_id in I.BASELINE_WANDER_DATABASES:
            rec = I.remove_baseline_wander(rec)
        yield rec


# ---------------------------------------------------------------------------
# pretrain


def cmd_pretrain(args) -> int:
    kv = read_kv(args.config)
    train_cfg = TR.train_config_from_kv(kv)
    model_cfg = M.config_from_kv(kv)
    out_dir = Path(args.out)
    _echo_config(out_dir, {**TR.train_config_kv(train_cfg), **{k: str(v) for k, v in M.vars_of_config(model_cfg).items()}})
    try:
        final = TR.pretrain(train_cfg, model_cfg, args.manifest, out_dir, resume=args.resume)
    except TR.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"pre-training done; final checkpoint {final}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        dataset = E.LabeledDataset.from_manifest(args.data)
    except (ValueError, OSError, KeyError) as exc:
        raise DataError(f"cannot load dataset: {exc}") from exc
    for fold in ("train", "val", "test"):
        idx = dataset.indices(fold)
        if idx.size == 0:
            raise DataError(f"dataset has no {fold!r} fold")
        if fold != "train":
            col_pos = dataset.labels[idx].sum(axis=0)
            if not np.any((col_pos > 0) & (col_pos < idx.size)):
                raise DataError(f"{fold!r} fold has no class with both positive and negative records")

    model_cfg, _, _, _, tensors = M.load_checkpoint(args.checkpoint)
    encoder = {k[len("ema/"):]: v for k, v in tensors.items() if k.startswith("ema/")}
    if not encoder:  # fall back to raw student weights if no EMA stored
        encoder = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/") and M.is_encoder_param(k[len("param/"):])}
    if not encoder:
        raise DataError(f"checkpoint {args.checkpoint} holds no encoder weights")

    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size

    aucs = []
    for seed in range(args.seeds):
        cfg = E.EvalConfig.for_mode(args.mode, seed=seed, **overrides)
        rng = np.random.default_rng(seed)
        head_state = None
        if args.mode == "two_stage":
            artifact = out_dir / "linear" / f"artifact-seed{seed}"
            if not (artifact / "MANIFEST").exists():
                raise DataError(
                    f"two_stage needs the linear artifact {artifact}; run --mode linear with the same --out first"
                )
            _, _, linear_encoder, head_state = E.load_eval_artifact(artifact)
            result = E.train_head(cfg, linear_encoder, model_cfg, dataset, rng, head_state=head_state)
        else:
            result = E.train_head(cfg, encoder, model_cfg, dataset, rng)

        E.save_eval_artifact(out_dir / args.mode / f"artifact-seed{seed}", result, model_cfg)
        scores, labels = E.predict_fold(result.encoder, result.head, cfg, model_cfg, dataset, "test")
        auc = E.macro_auc(scores, labels)
        aucs.append(auc)
        _write_predictions(out_dir / args.mode / f"predictions-seed{seed}.csv", dataset, scores)
        print(f"seed {seed}: test macro AUC {auc:.4f} (best val {result.best_val_auc:.4f})")

    results = {
        "mode": args.mode,
        "seeds": list(range(args.seeds)),
        "auc_per_seed": aucs,
        "mean": float(np.mean(aucs)),
        "std": float(np.std(aucs)),
    }
    (out_dir / args.mode / "results.json").write_text(json.dumps(results, indent=2) + "\n")
    _echo_config(out_dir / args.mode, {
        "mode": args.mode, "checkpoint": str(args.checkpoint), "data": str(args.data),
        "seeds": str(args.seeds), "steps": str(overrides.get("steps", 5000)),
        "batch_size": str(overrides.get("batch_size", 128)),
    })
    print(f"{args.mode}: mean {results['mean']:.4f} std {results['std']:.4f}")
    return 0


def _write_predictions(path, dataset: E.LabeledDataset, scores: np.ndarray) -> None:
    idx = dataset.indices("test")
    header = "record_id," + ",".join(f"class_{c}" for c in range(scores.shape[1]))
    lines = [header]
    for row, i in enumerate(idx):
        lines.append(dataset.records[i].record_id + "," + ",".join(f"{v:.17g}" for v in scores[row]))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecgjepa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="preprocess or generate records into .ecg files")
    p.add_argument("--manifest", required=True, help="manifest file to write")
    p.add_argument("--out", required=True, help="directory for .ecg records")
    p.add_argument("--stats", required=True, help="database stats file to write")
    p.add_argument("--synthetic", type=int, default=0, metavar="N", help="generate N synthetic records")
    p.add_argument("--seconds", type=float, default=10.0, help="synthetic record length")
    p.add_argument("--classes", type=int, default=0, metavar="C", help="label synthetic records with C classes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv-dir", default=None, help="import CSV records (one lead per column, header row)")
    p.add_argument("--rate", type=float, default=500.0, help="sampling rate of CSV input")
    p.add_argument("--database-id", default="SYNTHETIC", help="database id for CSV input")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="run self-supervised pre-training")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="downstream evaluation of a checkpoint")
    p.add_argument("--mode", required=True, choices=("linear", "finetune", "two_stage"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest of labeled records")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=1, metavar="K")
    p.add_argument("--steps", type=int, default=None, help="override head-training steps")
    p.add_argument("--batch-size", type=int, default=None, help="override head-training batch size")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, I.RecordRejected) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
