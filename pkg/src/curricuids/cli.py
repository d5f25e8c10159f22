"""Command-line entry point: ``curricuids <subcommand> ... --seed N``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .compress import (
    load_qmodel, prune_magnitude, quantize, save_qmodel, size_report,
)
from .curriculum import CurriculumConfig
from .data_pipeline import (
    DatasetKind, Preprocessor, SequenceBatch, SplitSpec, StagePlan, SynthConfig, build_stage_plan,
    clean_table, load_stage_plan, load_table, records_to_matrix, synthesize_dataset, table_to_matrix,
    transform, windowize_runs, write_csv,
)
from .ensemble import BoostConfig, ForestConfig, build_ensemble, load_ensemble, save_ensemble
from .errors import CurricuidsError, EmptyStage, InvalidConfig, IoFailure
from .evaluation import (
    architecture_spec, evaluate_model, pipeline_spec, predict_proba, run_ablation, write_ablation,
)
from .metrics import compute_metrics
from .model import ModelConfig, canonical_json, load_model, model_forward, save_model
from .pipeline import PipelineOptions, file_fingerprint, prepare, run_pipeline
from .xai import LimeConfig, explain_windows, render_explanation

log = logging.getLogger("curricuids")

MANIFEST_SCHEMA = "curricuids.manifest/1"
METRICS_SCHEMA = "curricuids.metrics/1"
DEFAULT_LABEL = "Attack_type"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers

def _write_json(path: str, doc, pretty: bool = True) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            if pretty:
                json.dump(doc, fh, indent=2, sort_keys=True)
                fh.write("\n")
            else:
                fh.write(canonical_json(doc))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _plan_from_arg(value: str) -> StagePlan:
    if value in {k.value for k in DatasetKind}:
        return build_stage_plan(value)
    return load_stage_plan(value)


def _load_matrix(path: str, label_column: str, encoders=None, drop_outliers: bool = True, outlier_z: float = 4.0):
    table = clean_table(load_table(path, label_column), outlier_z, encoders, drop_outliers)
    return table, table_to_matrix(table)


def _windows_for_model(path: str, meta: dict) -> SequenceBatch:
    """Clean and scale a CSV the same way the model's training data was, then window it."""
    _, m = _load_matrix(path, meta["label_column"], meta.get("encoders") or {}, drop_outliers=False)
    pre = Preprocessor.from_dict(meta["preprocessor"])
    W = int(meta["window"])
    return windowize_runs(transform(pre, m), W, int(meta.get("stride", W)))


def _load_any(path: str):
    """(model-like object, metadata) for a network, quantized or ensemble checkpoint."""
    try:
        with open(path, encoding="utf-8") as fh:
            kind = json.load(fh).get("format_version", "")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if kind.startswith("curricuids.ensemble"):
        e = load_ensemble(path)
        _, meta = load_model(os.path.join(os.path.dirname(path), e.nn_checkpoint))
        return e, meta
    if kind.startswith("curricuids.qmodel"):
        qm = load_qmodel(path)
        meta_path = path + ".meta.json"
        if not os.path.isfile(meta_path):
            raise IoFailure(f"quantized checkpoint needs its metadata file {meta_path}")
        with open(meta_path, encoding="utf-8") as fh:
            return qm, json.load(fh)
    return load_model(path)


def _curriculum_config(a, checkpoint_dir=None) -> CurriculumConfig:
    return CurriculumConfig(epochs_per_stage=a.epochs, batch_size=a.batch_size, learning_rate=a.lr,
                            early_stop_patience=a.patience, lime_fraction=a.lime_fraction, seed=a.seed,
                            lime_num_samples=a.lime_samples, unlearning=not a.no_unlearning,
                            checkpoint_dir=checkpoint_dir)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(a) -> int:
    plan = _plan_from_arg(a.plan)
    cfg = SynthConfig(n_per_stage=a.n_per_stage, n_features=a.n_features, n_decoys=a.n_decoys,
                      noise=a.noise, seed=a.seed)
    records, truth = synthesize_dataset(cfg, plan)
    m = records_to_matrix(records, truth.feature_names)
    write_csv(a.out, m, a.label_column)
    doc = {"rows": len(m), "features": truth.feature_names, "decoy_features": truth.decoy_features,
           "stage_groups": {str(k): v for k, v in truth.stage_groups.items()},
           "stage_modes": {str(k): v for k, v in truth.stage_modes.items()},
           "config": asdict(cfg), "plan": plan.to_dict()}
    _write_json(os.path.splitext(a.out)[0] + ".truth.json", doc)
    print(json.dumps({"rows": len(m), "out": a.out}, sort_keys=True))
    return 0


def cmd_ingest(a) -> int:
    raw = load_table(a.data, a.label_column)
    table = clean_table(raw, a.outlier_z)
    write_csv(a.out, table_to_matrix(table), a.label_column)
    report = {"rows_in": len(raw.rows), "rows_out": len(table.rows), "encoders": table.encoders}
    _write_json(os.path.splitext(a.out)[0] + ".ingest.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_plan(a) -> int:
    plan = _plan_from_arg(a.plan)
    doc = plan.to_dict()
    if a.data:
        _, m = _load_matrix(a.data, a.label_column, drop_outliers=False)
        stage_of, unmatched = plan.assign(m.tags)
        doc["counts"] = {str(s.index): int(np.sum(stage_of == s.index)) for s in plan.stages}
        doc["unmatched"] = unmatched
        empty = [k for k, v in doc["counts"].items() if v == 0]
        if empty:
            print(json.dumps(doc, indent=2, sort_keys=True))
            raise EmptyStage(f"stage(s) {', '.join(empty)} matched zero records")
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_train(a) -> int:
    t0 = time.perf_counter()
    out = a.out
    dirs = {k: os.path.join(out, k) for k in ("stages", "checkpoints", "explanations", "data")}
    for d in dirs.values():
        os.makedirs(d, exist_ok=True)
    plan = _plan_from_arg(a.plan)
    table, matrix = _load_matrix(a.data, a.label_column)
    data = prepare(matrix, a.window, SplitSpec(seed=a.seed), a.reducer, a.retained_variance)
    cc = _curriculum_config(a, dirs["checkpoints"])
    opts = PipelineOptions(seed=a.seed, window=a.window, reducer=a.reducer,
                           retained_variance=a.retained_variance, curriculum=cc,
                           ensemble=not a.no_ensemble, oof_folds=a.folds, oof_epochs=a.oof_epochs,
                           forest_trees=a.n_trees, boost_rounds=a.n_rounds, compress=not a.no_compress,
                           prune_sparsity=a.sparsity, threshold=a.threshold)
    res = run_pipeline(data, plan, opts)
    t_train = time.perf_counter()

    meta = {"label_column": a.label_column, "encoders": table.encoders,
            "preprocessor": data.preprocessor.to_dict(), "window": a.window, "stride": a.window,
            "plan": plan.to_dict(), "input_features": data.preprocessor.output_names()}
    save_model(res.model, os.path.join(dirs["checkpoints"], "model.json"), meta)
    artifacts = ["checkpoints/model.json"]
    if res.pruned is not None:
        save_model(res.pruned, os.path.join(dirs["checkpoints"], "pruned.json"), meta)
        qpath = os.path.join(dirs["checkpoints"], "quantized.json")
        save_qmodel(quantize(res.model), qpath)
        _write_json(qpath + ".meta.json", meta, pretty=False)
        artifacts += ["checkpoints/pruned.json", "checkpoints/quantized.json"]
    if res.ensemble is not None:
        save_ensemble(res.ensemble.ensemble, os.path.join(dirs["checkpoints"], "ensemble.json"), "model.json")
        artifacts.append("checkpoints/ensemble.json")

    for name, part in (("train", data.raw_train), ("validation", data.raw_validation), ("test", data.raw_test)):
        write_csv(os.path.join(dirs["data"], f"{name}.csv"), part, a.label_column)

    stages_doc = {}
    for r in res.run.results:
        d = r.to_dict()
        _write_json(os.path.join(dirs["stages"], f"stage_{r.stage_index}.json"), d)
        stages_doc[str(r.stage_index)] = {
            "metrics": d["validation_metrics"], "dropped_features": r.dropped_features,
            "checkpoint": f"checkpoints/{r.checkpoint_path}" if r.checkpoint_path else None,
            "epochs": r.epochs_run, "retrain_epochs": r.retrain_epochs,
            "active_features": r.active_features, "start_fingerprint": r.start_fingerprint,
            "end_fingerprint": r.end_fingerprint}

    names = data.preprocessor.output_names()
    active_names = [names[j] for j in res.model.active_features]
    explained = []
    if a.explain > 0 and len(res.test):
        idx = np.arange(min(a.explain, len(res.test)))
        m = res.model
        stds = data.train.X[:, m.active_features].std(axis=0)
        lime = LimeConfig(num_samples=a.lime_samples, top_k=min(10, len(m.active_features)), seed=a.seed)
        exps = explain_windows(lambda w: model_forward(m, w), res.test.windows[idx][:, :, m.active_features],
                               stds, lime, [f"test_{i}" for i in idx])
        for e in exps:
            render_explanation(e, active_names, os.path.join(dirs["explanations"], f"{e.instance_id}.json"))
            explained.append(f"explanations/{e.instance_id}.json")

    metrics_doc = {"schema": METRICS_SCHEMA, "threshold": a.threshold,
                   "test_windows": len(res.test),
                   "reports": {k: v.to_dict() for k, v in res.metrics.items()}}
    _write_json(os.path.join(out, "metrics.json"), metrics_doc)
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "version": __version__,
        "seed": a.seed,
        "dataset": {"file": os.path.basename(a.data), "sha256": file_fingerprint(a.data),
                    "rows_after_cleaning": len(matrix), "label_column": a.label_column},
        "config": {"options": opts.to_dict(), "model": res.model_config.to_dict(), "plan": plan.to_dict()},
        "split": {"train_rows": len(data.train), "validation_rows": len(data.validation),
                  "test_rows": len(data.test), "test_windows": len(res.test)},
        "stages": stages_doc,
        "final_active_features": active_names,
        "metrics": metrics_doc["reports"],
        "compression": res.compression,
        "ensemble": None if res.ensemble is None else {
            "meta_weights": res.ensemble.ensemble.meta.weights.tolist(),
            "meta_bias": res.ensemble.ensemble.meta.bias,
            "oof_audit_passed": res.ensemble.oof.audit(),
            "folds": opts.oof_folds},
        "artifacts": artifacts,
        "explanations": explained,
    }
    manifest["config"]["options"]["curriculum"]["checkpoint_dir"] = "checkpoints"
    _write_json(os.path.join(out, "manifest.json"), manifest)
    _write_json(os.path.join(out, "timing.json"),
                {"train_seconds": t_train - t0, "total_seconds": time.perf_counter() - t0})
    summary = {k: round(v.accuracy, 6) for k, v in res.metrics.items()}
    print(json.dumps({"out": out, "accuracy": summary}, sort_keys=True))
    return 0


def cmd_explain(a) -> int:
    model, meta = load_model(a.model)
    batch = _windows_for_model(a.data, meta)
    if a.instance:
        idx = list(a.instance)
    else:
        rng = np.random.default_rng(a.seed)
        idx = sorted(rng.choice(len(batch), size=min(a.sample, len(batch)), replace=False).tolist())
    bad = [i for i in idx if not 0 <= i < len(batch)]
    if bad:
        raise InvalidConfig(f"instances {bad} out of range (0..{len(batch) - 1})")
    os.makedirs(a.out, exist_ok=True)
    names = [meta.get("input_features", [])[j] if meta.get("input_features") else f"x{j}"
             for j in model.active_features]
    x = batch.windows[:, :, model.active_features]
    stds = x.reshape(-1, x.shape[2]).std(axis=0)
    lime = LimeConfig(num_samples=a.num_samples, top_k=min(a.top_k, len(names)), seed=a.seed)
    exps = explain_windows(lambda w: model_forward(model, w), x[idx], stds, lime, [int(i) for i in idx])
    written = []
    for e in exps:
        path = os.path.join(a.out, f"instance_{e.instance_id}.json")
        render_explanation(e, names, path)
        written.append(path)
    print(json.dumps({"explanations": written}, sort_keys=True))
    return 0


def cmd_compress(a) -> int:
    model, meta = load_model(a.model)
    os.makedirs(a.out, exist_ok=True)
    tune = _windows_for_model(a.fine_tune_data, meta) if a.fine_tune_data else None
    cfg = CurriculumConfig(seed=a.seed)
    pruned, mask = prune_magnitude(model, a.sparsity, tune, a.epochs if tune is not None else 0, cfg)
    qm = quantize(pruned)
    save_model(pruned, os.path.join(a.out, "pruned.json"), meta)
    qpath = os.path.join(a.out, "quantized.json")
    save_qmodel(qm, qpath)
    _write_json(qpath + ".meta.json", meta, pretty=False)
    report = {"dense": size_report(quantize(model)).to_dict(), "quantized": size_report(qm).to_dict(),
              "quantized_sparse": size_report(qm, sparse=True).to_dict(),
              "target_sparsity": mask.target_sparsity, "achieved_sparsity": mask.achieved_sparsity}
    if a.data:
        test = _windows_for_model(a.data, meta)
        report["accuracy"] = {"float": evaluate_model(model, test).accuracy,
                              "pruned": evaluate_model(pruned, test).accuracy,
                              "quantized": evaluate_model(qm, test).accuracy}
    _write_json(os.path.join(a.out, "size_report.json"), report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_ensemble(a) -> int:
    model, meta = load_model(a.model)
    train = _windows_for_model(a.data, meta)
    os.makedirs(a.out, exist_ok=True)
    nn_name = "nn.json"
    shutil.copyfile(a.model, os.path.join(a.out, nn_name))
    cfg = CurriculumConfig(seed=a.seed)
    mc = ModelConfig.from_dict({**model.config.to_dict(), "n_features": train.n_features})
    build = build_ensemble(model, train, mc, cfg, ForestConfig(n_trees=a.n_trees, seed=a.seed),
                           BoostConfig(n_rounds=a.n_rounds, seed=a.seed), a.folds, a.oof_epochs)
    save_ensemble(build.ensemble, os.path.join(a.out, "ensemble.json"), nn_name)
    doc = {"meta_weights": build.ensemble.meta.weights.tolist(), "meta_bias": build.ensemble.meta.bias,
           "oof_audit_passed": build.oof.audit(), "folds": a.folds}
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_evaluate(a) -> int:
    model, meta = _load_any(a.model)
    batch = _windows_for_model(a.data, meta)
    p = predict_proba(model, batch)
    report = compute_metrics(p, batch.labels, a.threshold)
    doc = {"schema": METRICS_SCHEMA, "windows": len(batch), **report.to_dict()}
    if a.out:
        _write_json(a.out, doc)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_ablate(a) -> int:
    plan = _plan_from_arg(a.plan)
    _, matrix = _load_matrix(a.data, a.label_column)
    spec = architecture_spec() if a.kind == "architecture" else pipeline_spec()
    rows = []
    for seed in range(a.seed, a.seed + a.repeats):
        data = prepare(matrix, a.window, SplitSpec(seed=seed), a.reducer, a.retained_variance)
        cfg = _curriculum_config(a)
        rows += run_ablation(spec, data, plan, cfg, seed, a.oof_epochs, a.n_trees, a.n_rounds)
    csv_path, json_path = write_ablation(rows, a.out, f"ablation_{a.kind}")
    for r in rows:
        print(f"{r.name:<14} seed {r.seed}  accuracy {100 * r.accuracy:.2f}%")
    print(json.dumps({"csv": csv_path, "json": json_path}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_training_args(p) -> None:
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--reducer", choices=("pca", "none"), default="pca")
    p.add_argument("--retained-variance", type=float, default=0.95)
    p.add_argument("--epochs", type=int, default=12, help="epochs per curriculum stage")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--patience", type=int, default=4)
    p.add_argument("--lime-fraction", type=float, default=0.1)
    p.add_argument("--lime-samples", type=int, default=1000)
    p.add_argument("--no-unlearning", action="store_true")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--oof-epochs", type=int, default=10)
    p.add_argument("--n-trees", type=int, default=100)
    p.add_argument("--n-rounds", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="curricuids", description="Staged intrusion-detection training toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, required=True)
        p.set_defaults(func=fn)
        return p

    p = command("synth", cmd_synth, "generate a synthetic staged dataset")
    p.add_argument("--plan", default="cic-iov-2024")
    p.add_argument("--n-per-stage", type=int, default=3000)
    p.add_argument("--n-features", type=int, default=16)
    p.add_argument("--n-decoys", type=int, default=2)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--label-column", default=DEFAULT_LABEL)
    p.add_argument("--out", required=True)

    p = command("ingest", cmd_ingest, "clean a CSV and write the cleaned cache")
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", default=DEFAULT_LABEL)
    p.add_argument("--outlier-z", type=float, default=4.0)
    p.add_argument("--out", required=True)

    p = command("plan", cmd_plan, "emit a stage plan, optionally checked against a CSV")
    p.add_argument("--plan", required=True, help="dataset kind or JSON plan file")
    p.add_argument("--data")
    p.add_argument("--label-column", default=DEFAULT_LABEL)

    p = command("train", cmd_train, "run the curriculum pipeline into a run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--label-column", default=DEFAULT_LABEL)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--sparsity", type=float, default=0.5)
    p.add_argument("--explain", type=int, default=5, help="test windows to explain")
    p.add_argument("--no-ensemble", action="store_true")
    p.add_argument("--no-compress", action="store_true")
    _add_training_args(p)

    p = command("explain", cmd_explain, "LIME reports for windows of a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--instance", type=int, action="append")
    p.add_argument("--sample", type=int, default=5)
    p.add_argument("--num-samples", type=int, default=1000)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out", required=True)

    p = command("compress", cmd_compress, "prune and quantize a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--sparsity", type=float, default=0.5)
    p.add_argument("--fine-tune-data")
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--data", help="held-out CSV for accuracy deltas")
    p.add_argument("--out", required=True)

    p = command("ensemble", cmd_ensemble, "out-of-fold stacking around a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="training CSV")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--oof-epochs", type=int, default=10)
    p.add_argument("--n-trees", type=int, default=100)
    p.add_argument("--n-rounds", type=int, default=100)
    p.add_argument("--out", required=True)

    p = command("evaluate", cmd_evaluate, "metrics JSON for a checkpoint on a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")

    p = command("ablate", cmd_ablate, "architecture or pipeline ablation table")
    p.add_argument("--data", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--label-column", default=DEFAULT_LABEL)
    p.add_argument("--kind", choices=("architecture", "pipeline"), default="pipeline")
    p.add_argument("--repeats", type=int, default=1, help="seeds seed..seed+repeats-1")
    p.add_argument("--out", required=True)
    _add_training_args(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CurricuidsError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
