"""Configuration-driven experiment runner.

Subcommands: gen, train, eval, interpret, infoplane, subsample. Every
artifact embeds the resolved config, root seed, and package version; JSON
artifacts are written with sorted keys and CSV artifacts carry a leading
`# meta=` comment line, so identical (config, seed) reruns are
byte-identical. Exit codes: 0 success, 2 config error, 3 training fault.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .concepts import parse_variant
from .config import (ConfigError, ExperimentConfig, config_from_artifact,
                     load_config_file, resolve_config)
from .infoplane import build_plane, plane_to_csv, trajectory_postprocess
from .interpret import (aggregate_attr, aggregates_to_csv, attr_paths,
                        reasoning_trace, routing_stats, trace_to_json)
from .model import ConceptMoEModel, ModelDims
from .objective import LossWeights
from .rng import substream
from .synthcohort import (cohort_from_json, cohort_to_json, generate_cohort,
                          samples_for_patients, split_patient_level)
from .trainer import (TrainingFault, checkpoint_from_json, checkpoint_to_json,
                      evaluate, scaled_sizes, subsample_protocol, train_fold)

RUNLOG_COLUMNS = ("epoch", "lr", "loss_total", "loss_cls", "loss_concept_l1",
                  "loss_concept_l2", "loss_interaction", "val_macro_f1",
                  "rho", "b_grad")


# artifact helpers -------------------------------------------------------------

def _manifest(cfg: ExperimentConfig, command: str) -> dict:
    return {"version": __version__, "command": command, "seed": cfg.seed,
            "config": cfg.to_dict()}


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n",
                    encoding="utf-8")


def _meta_line(cfg: ExperimentConfig) -> str:
    blob = json.dumps({"version": __version__, "seed": cfg.seed,
                       "config": cfg.to_dict()},
                      sort_keys=True, separators=(",", ":"))
    return "# meta=" + blob


def _runlog_csv(run_log: list[dict], meta_line: str) -> str:
    buf = io.StringIO()
    buf.write(meta_line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RUNLOG_COLUMNS)
    for row in run_log:
        writer.writerow(["" if row.get(col) is None else repr(row[col])
                         if isinstance(row.get(col), float) else row.get(col)
                         for col in RUNLOG_COLUMNS])
    return buf.getvalue()


def _eval_payload(result) -> dict:
    return {
        "macro_f1": result.macro_f1,
        "per_class": [{"precision": s.precision, "recall": s.recall,
                       "f1": s.f1, "support": s.support,
                       "predicted": s.predicted} for s in result.per_class],
        "concept_auroc": result.concept_aurocs,
        "predictions": result.predictions.tolist(),
        "labels": result.labels.tolist(),
    }


# shared assembly ----------------------------------------------------------------

def _load_or_generate_cohort(cfg: ExperimentConfig, cohort_path: str | None):
    if cohort_path:
        cohort_cfg, cohort = cohort_from_json(
            Path(cohort_path).read_text(encoding="utf-8"))
        return cohort_cfg, cohort
    return cfg.cohort, generate_cohort(cfg.cohort)


def _build_model(cfg: ExperimentConfig, patch_dim: int, node_dim: int
                 ) -> ConceptMoEModel:
    dims = ModelDims(patch_dim=patch_dim, graph_node_dim=node_dim,
                     num_classes=cfg.cohort.num_classes, d=cfg.model.d,
                     d_c=cfg.model.d_c, gnn_layers=cfg.model.gnn_layers,
                     gnn_hidden=cfg.model.gnn_hidden,
                     gnn_dropout=cfg.model.gnn_dropout,
                     patch_cap=cfg.model.patch_cap)
    return ConceptMoEModel(dims, parse_variant(cfg.variant),
                           perturb_sigma_scale=cfg.model.perturb_sigma_scale)


def _fold_sets(cfg: ExperimentConfig, cohort, fold: int):
    splits = split_patient_level(cohort, cfg.folds, cfg.seed)
    train_ids, val_ids, test_ids = splits[fold]
    return (samples_for_patients(cohort, train_ids),
            samples_for_patients(cohort, val_ids),
            samples_for_patients(cohort, test_ids))


def _loss_weights(cfg: ExperimentConfig) -> LossWeights:
    return LossWeights(lambda1=cfg.loss.lambda1, lambda2=cfg.loss.lambda2,
                       lambda_int=cfg.loss.lambda_int)


def _fold_seed(cfg: ExperimentConfig, fold: int) -> int:
    return int(substream(cfg.seed, "fold", fold).integers(2 ** 63))


def _run_fold_task(payload: dict) -> dict:
    """Train one fold and write its artifacts; safe to run in a subprocess."""
    cfg = config_from_artifact(payload["config"])
    out_dir = Path(payload["out"])
    fold = payload["fold"]
    cohort_cfg, cohort = _load_or_generate_cohort(cfg, payload.get("cohort_path"))
    train_s, val_s, test_s = _fold_sets(cfg, cohort, fold)
    model = _build_model(cfg, cohort_cfg.patch_dim, cohort_cfg.graph_node_dim)
    seed = _fold_seed(cfg, fold)
    model.init_params(seed=seed)
    result = train_fold(model, train_s, val_s, test_s, cfg.train,
                        _loss_weights(cfg), seed=seed)

    fold_dir = out_dir / f"fold{fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    meta = {"fold": fold, "variant": cfg.variant, "seed": cfg.seed,
            "fold_seed": seed, "best_epoch": result.best_epoch,
            "version": __version__, "config": cfg.to_dict()}
    (fold_dir / "checkpoint.json").write_text(
        checkpoint_to_json(result.best_state, meta=meta), encoding="utf-8")
    (fold_dir / "runlog.csv").write_text(_runlog_csv(result.run_log,
                                                     _meta_line(cfg)),
                                         encoding="utf-8")
    dump_dir = fold_dir / "dumps"
    dump_dir.mkdir(exist_ok=True)
    for dump in result.dumps:
        _write_json(dump_dir / f"epoch_{dump['epoch']:04d}.json",
                    {"format": "cbmoe-dump-v1", "fold": fold,
                     "epoch": dump["epoch"], "records": dump["records"]})
    return {"fold": fold, "best_epoch": result.best_epoch,
            "best_val_macro_f1": result.best_val_f1,
            "epochs_run": result.epochs_run,
            "test": _eval_payload(result.test_eval)}


# subcommands -------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _resolve_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort = generate_cohort(cfg.cohort)
    (out / "cohort.json").write_text(cohort_to_json(cfg.cohort, cohort),
                                     encoding="utf-8")
    _write_json(out / "manifest.json", _manifest(cfg, "gen"))
    print(f"wrote {len(cohort)} samples to {out / 'cohort.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "manifest.json", _manifest(cfg, "train"))
    payloads = [{"config": cfg.to_dict(), "out": str(out), "fold": fold,
                 "cohort_path": args.cohort}
                for fold in range(cfg.folds)]
    if args.parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.parallel) as ex:
            rows = list(ex.map(_run_fold_task, payloads))
    else:
        rows = [_run_fold_task(p) for p in payloads]
    scores = np.array([r["test"]["macro_f1"] for r in rows])
    summary = {"version": __version__, "seed": cfg.seed, "config": cfg.to_dict(),
               "folds": rows,
               "aggregate": {"test_macro_f1_mean": float(scores.mean()),
                             "test_macro_f1_std": float(scores.std(ddof=0))}}
    _write_json(out / "summary.json", summary)
    print(f"test macro-F1 mean {scores.mean():.4f} over {cfg.folds} folds")
    return 0


def _load_run(run_dir: Path) -> ExperimentConfig:
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    return config_from_artifact(manifest["config"])


def _model_from_checkpoint(cfg: ExperimentConfig, cohort_cfg, fold_dir: Path
                           ) -> ConceptMoEModel:
    state, meta = checkpoint_from_json(
        (fold_dir / "checkpoint.json").read_text(encoding="utf-8"))
    model = _build_model(cfg, cohort_cfg.patch_dim, cohort_cfg.graph_node_dim)
    model.init_params(seed=int(meta.get("fold_seed", 0)))
    model.load_state_arrays(state)
    return model


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg = _load_run(run_dir)
    cohort_cfg, cohort = _load_or_generate_cohort(cfg, args.cohort)
    train_s, val_s, test_s = _fold_sets(cfg, cohort, args.fold)
    model = _model_from_checkpoint(cfg, cohort_cfg, run_dir / f"fold{args.fold}")
    samples = {"test": test_s, "val": val_s, "train": train_s}[args.split]
    result = evaluate(model, samples)
    payload = {"version": __version__, "seed": cfg.seed, "fold": args.fold,
               "split": args.split, "config": cfg.to_dict(),
               **_eval_payload(result)}
    out = Path(args.out) if args.out else run_dir
    _write_json(out / f"eval_fold{args.fold}_{args.split}.json", payload)
    print(f"fold {args.fold} {args.split} macro-F1 {result.macro_f1:.4f}")
    return 0


def cmd_interpret(args) -> int:
    run_dir = Path(args.run)
    cfg = _load_run(run_dir)
    if parse_variant(cfg.variant).bottleneck != "cem":
        raise ConfigError("attribution needs an embedding (cem) variant; "
                          f"run used {cfg.variant!r}")
    cohort_cfg, cohort = _load_or_generate_cohort(cfg, args.cohort)
    out = Path(args.out) if args.out else run_dir / "interpret"
    out.mkdir(parents=True, exist_ok=True)
    folds = range(cfg.folds) if args.fold is None else [args.fold]
    records = []
    routing = {}
    trace_dir = out / "traces"
    for fold in folds:
        _, _, test_s = _fold_sets(cfg, cohort, fold)
        model = _model_from_checkpoint(cfg, cohort_cfg, run_dir / f"fold{fold}")
        routing[f"fold{fold}"] = routing_stats(model, test_s)
        for sample in test_s:
            records.extend(attr_paths(model, sample, fold=fold))
            trace = reasoning_trace(model, sample)
            path = trace_dir / f"fold{fold}"
            path.mkdir(parents=True, exist_ok=True)
            (path / f"{sample.sample_id}.json").write_text(
                trace_to_json(trace) + "\n", encoding="utf-8")
    agg = aggregate_attr(records, cfg.cohort.num_classes)
    meta_line = _meta_line(cfg)
    paths = sorted({key[0] for key in agg})
    for path_name in paths:
        for view in ("per_expert", "gate"):
            text = aggregates_to_csv(agg, path_name, view, meta_line=meta_line)
            (out / f"attr_{path_name}_{view}.csv").write_text(text,
                                                              encoding="utf-8")
    _write_json(out / "routing.json",
                {"version": __version__, "seed": cfg.seed,
                 "config": cfg.to_dict(), "routing": routing})
    print(f"wrote attribution tables for paths {paths} to {out}")
    return 0


def cmd_infoplane(args) -> int:
    run_dir = Path(args.run)
    cfg = _load_run(run_dir)
    dumps_by_fold = []
    for fold in range(cfg.folds):
        fold_dumps = []
        dump_dir = run_dir / f"fold{fold}" / "dumps"
        if not dump_dir.is_dir():
            continue
        for path in sorted(dump_dir.glob("epoch_*.json")):
            fold_dumps.append(json.loads(path.read_text(encoding="utf-8")))
        dumps_by_fold.append(fold_dumps)
    if not dumps_by_fold:
        raise ConfigError(f"no dump files under {run_dir}")
    kind = args.kind
    if kind == "auto":
        variant = parse_variant(cfg.variant)
        if args.feature in ("p1", "p2"):
            kind = "cbm"
        elif args.feature == "z":
            kind = "latent"
        else:
            kind = "cbm" if variant.bottleneck == "cbm" else "cem"
    points, missing = build_plane(dumps_by_fold, args.feature)
    processed = trajectory_postprocess(points, kind)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    meta_line = _meta_line(cfg)
    raw_csv = plane_to_csv(points, kind, meta_line=meta_line)
    (out / f"mi_{args.feature}_raw.csv").write_text(raw_csv, encoding="utf-8")
    (out / f"mi_{args.feature}.csv").write_text(
        plane_to_csv(processed, kind, meta_line=meta_line), encoding="utf-8")
    if missing:
        print(f"warning: missing epochs with no records: {missing}")
    print(f"wrote {len(processed)} information-plane points "
          f"({len(points)} raw) for feature {args.feature!r}")
    return 0


def cmd_subsample(args) -> int:
    cfg = _resolve_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort_cfg, cohort = _load_or_generate_cohort(cfg, args.cohort)
    train_s, val_s, test_s = _fold_sets(cfg, cohort, fold=0)
    sizes = cfg.subsample.sizes or scaled_sizes(len(train_s))

    def factory(run_seed: int) -> ConceptMoEModel:
        model = _build_model(cfg, cohort_cfg.patch_dim, cohort_cfg.graph_node_dim)
        return model.init_params(seed=run_seed)

    result = subsample_protocol(train_s, val_s, test_s, sizes,
                                cfg.subsample.repeats, factory, cfg.train,
                                _loss_weights(cfg), seed=cfg.seed)
    payload = {"version": __version__, "seed": cfg.seed, "config": cfg.to_dict(),
               "pool_size": len(train_s), "sizes": result.sizes,
               "repeats": result.repeats, "runs": result.runs,
               "summary": {str(k): v for k, v in result.summary.items()}}
    _write_json(out / "subsample_summary.json", payload)
    for size in result.sizes:
        stats = result.summary[size]
        print(f"size {size}: macro-F1 {stats['mean']:.4f} +/- {stats['sem']:.4f} (sem)")
    return 0


# argument plumbing -----------------------------------------------------------------

def _resolve_from_args(args) -> ExperimentConfig:
    document = load_config_file(args.config) if args.config else {}
    overrides = {"seed": args.seed, "variant": getattr(args, "variant", None)}
    return resolve_config(document, preset=args.preset, overrides=overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbmoe",
        description="concept-bottleneck mixture-of-experts experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True, variant_flag=True):
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--preset", choices=("pbt-default", "tcga-default"),
                       help="named hyperparameter preset")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--cohort", help="load a cohort JSON instead of generating")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        if variant_flag:
            p.add_argument("--variant", help="model variant override, e.g. "
                           "hier-morph+bio, flat-morph-hard, flat-bio-cbm")

    p = sub.add_parser("gen", help="generate a synthetic cohort")
    common(p, variant_flag=False)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="cross-validated training")
    common(p)
    p.add_argument("--parallel", type=int, default=1,
                   help="process-parallel folds (deterministic ordering)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained fold checkpoint")
    p.add_argument("--run", required=True, help="train output directory")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--cohort", help="load a cohort JSON instead of generating")
    p.add_argument("--out", help="output directory (default: run dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interpret", help="attribution tables and reasoning traces")
    p.add_argument("--run", required=True)
    p.add_argument("--fold", type=int, default=None,
                   help="restrict to one fold (default: all)")
    p.add_argument("--cohort", help="load a cohort JSON instead of generating")
    p.add_argument("--out", help="output directory (default: run/interpret)")
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("infoplane", help="information-plane trajectory from dumps")
    p.add_argument("--run", required=True)
    p.add_argument("--feature", choices=("z", "b1", "b2", "p1", "p2"),
                   required=True)
    p.add_argument("--kind", choices=("auto", "cem", "cbm", "latent"),
                   default="auto")
    p.add_argument("--out", help="output directory (default: run dir)")
    p.set_defaults(func=cmd_infoplane)

    p = sub.add_parser("subsample", help="training-set subsampling grid")
    common(p)
    p.set_defaults(func=cmd_subsample)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingFault as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
