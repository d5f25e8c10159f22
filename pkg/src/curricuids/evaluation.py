"""Model evaluation and ablation tables."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .compress import QuantizedModel, quantized_forward
from .curriculum import CurriculumConfig, fit_epochs, make_stage_datasets, run_curriculum
from .data_pipeline import SequenceBatch, StagePlan, windowize_runs
from .ensemble import BoostConfig, ForestConfig, StackedEnsemble, build_ensemble, ensemble_predict
from .errors import FeatureCountMismatch, InvalidConfig, IoFailure
from .metrics import MetricsReport, compute_metrics
from .model import IdsModel, ModelConfig, build_model, model_forward
from .pipeline import PreparedData


def predict_proba(model, batch: SequenceBatch) -> np.ndarray:
    """Probabilities from a network, a quantized network or a stacked ensemble.

    ``batch`` carries every preprocessed feature; networks read their active columns.
    """
    if isinstance(model, StackedEnsemble):
        return ensemble_predict(model, batch)
    active = model.active_features
    if active and batch.n_features <= max(active):
        raise FeatureCountMismatch(f"batch has {batch.n_features} features, model reads index {max(active)}")
    x = batch.windows[:, :, active]
    if isinstance(model, QuantizedModel):
        return quantized_forward(model, x)
    if isinstance(model, IdsModel):
        return model_forward(model, x)
    raise TypeError(f"cannot evaluate {type(model).__name__}")


def evaluate_model(model, batch: SequenceBatch, threshold: float = 0.5) -> MetricsReport:
    return compute_metrics(predict_proba(model, batch), batch.labels, threshold)


# ---------------------------------------------------------------------------
# ablation

ARCHITECTURE_STEPS = [
    ("baseline", {"use_encoder": False, "use_self_attention": False, "gru_layers": 0, "lstm_layers": 0,
                  "use_residual": False, "use_layernorm": False, "use_dropout": False}),
    ("+attention", {"use_encoder": True, "use_self_attention": True}),
    ("+gru", {"gru_layers": 3}),
    ("+lstm", {"lstm_layers": 3}),
    ("+residual", {"use_residual": True}),
    ("+layernorm", {"use_layernorm": True}),
    ("+dropout", {"use_dropout": True}),
]
PIPELINE_STEPS = ["base_nn", "+curriculum", "+unlearning", "+stacking"]


@dataclass
class AblationEntry:
    name: str
    kind: str  # "architecture" or "pipeline"
    model_overrides: dict = field(default_factory=dict)


@dataclass
class AblationSpec:
    entries: list[AblationEntry]

    def validate(self) -> None:
        if not self.entries:
            raise InvalidConfig("ablation spec is empty")
        for e in self.entries:
            if e.kind == "pipeline" and e.name not in PIPELINE_STEPS:
                raise InvalidConfig(f"unknown pipeline step {e.name!r}")
            if e.kind not in ("architecture", "pipeline"):
                raise InvalidConfig(f"unknown ablation kind {e.kind!r}")

    def to_dict(self) -> dict:
        return {"entries": [{"name": e.name, "kind": e.kind, "model_overrides": e.model_overrides}
                            for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSpec":
        return cls([AblationEntry(e["name"], e["kind"], dict(e.get("model_overrides", {})))
                    for e in d["entries"]])


def architecture_spec() -> AblationSpec:
    """Cumulative configs; each adds exactly one named component to its predecessor."""
    entries, acc = [], {}
    for name, delta in ARCHITECTURE_STEPS:
        acc = {**acc, **delta}
        entries.append(AblationEntry(name, "architecture", dict(acc)))
    return AblationSpec(entries)


def pipeline_spec() -> AblationSpec:
    return AblationSpec([AblationEntry(n, "pipeline") for n in PIPELINE_STEPS])


@dataclass
class AblationRow:
    name: str
    seed: int
    accuracy: float
    metrics: MetricsReport


def _pooled(stages, cfg: CurriculumConfig, model_cfg: ModelConfig, epochs: int) -> IdsModel:
    m = build_model(model_cfg)
    fit_epochs(m, stages[-1].train, stages[-1].validation, epochs, cfg, (0, 99))
    return m


def run_ablation(spec: AblationSpec, data: PreparedData, plan: StagePlan, cfg: CurriculumConfig,
                 seed: int, oof_epochs: int = 10, forest_trees: int = 100,
                 boost_rounds: int = 100) -> list[AblationRow]:
    """Train every entry on the same data and seed; rows come back in spec order.

    Architecture entries and the ``base_nn`` step train one pooled stage for
    the whole curriculum's epoch budget. Pipeline steps reuse their
    predecessor's model where the step only adds to it.
    """
    spec.validate()
    W = data.window
    stages = make_stage_datasets(plan, data.train, W, data.validation, stride=W,
                                 bootstrap_fraction=cfg.bootstrap_fraction, seed=seed)
    test = windowize_runs(data.test, W, W)
    budget = cfg.epochs_per_stage * plan.n_stages
    base_cfg = ModelConfig(n_features=data.train.n_features, window=W, seed=seed)
    rows: list[AblationRow] = []
    cache: dict[str, IdsModel] = {}

    def curriculum(unlearning: bool) -> IdsModel:
        key = f"curriculum:{unlearning}"
        if key not in cache:
            c = replace(cfg, unlearning=unlearning, seed=seed, checkpoint_dir=None)
            cache[key] = run_curriculum(plan, stages, c, model_cfg=base_cfg).model
        return cache[key]

    for e in spec.entries:
        if e.kind == "architecture":
            mc = ModelConfig(**{**base_cfg.to_dict(), **e.model_overrides})
            probs = model_forward(_pooled(stages, cfg, mc, budget), test.windows)
        elif e.name == "base_nn":
            probs = model_forward(_pooled(stages, cfg, base_cfg, budget), test.windows)
        elif e.name == "+curriculum":
            probs = predict_proba(curriculum(False), test)
        elif e.name == "+unlearning":
            probs = predict_proba(curriculum(True), test)
        else:
            nn = curriculum(True)
            ens = build_ensemble(nn, stages[-1].train, base_cfg, replace(cfg, seed=seed),
                                 ForestConfig(n_trees=forest_trees, seed=seed),
                                 BoostConfig(n_rounds=boost_rounds, seed=seed), 5, oof_epochs)
            probs = ensemble_predict(ens.ensemble, test)
        mr = compute_metrics(probs, test.labels)
        rows.append(AblationRow(e.name, seed, mr.accuracy, mr))
    return rows


def write_ablation(rows: list[AblationRow], out_dir: str, stem: str = "ablation") -> tuple[str, str]:
    """CSV (name, seed, accuracy) plus a JSON document with full metrics."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    try:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["config", "seed", "accuracy"])
            for r in rows:
                w.writerow([r.name, r.seed, repr(r.accuracy)])
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump({"schema": "curricuids.ablation/1",
                       "rows": [{"config": r.name, "seed": r.seed, "accuracy": r.accuracy,
                                 "metrics": r.metrics.to_dict()} for r in rows]},
                      fh, indent=2, sort_keys=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return csv_path, json_path
