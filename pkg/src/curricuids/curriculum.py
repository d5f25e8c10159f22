"""Staged training with weight carry-over and explanation-driven feature drops."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn_core as nn
from .data_pipeline import FeatureMatrix, SequenceBatch, StagePlan, windowize_runs
from .errors import DivergenceDetected, EmptyStage, FeatureCountMismatch, InvalidConfig
from .metrics import MetricsReport, compute_metrics
from .model import (
    IdsModel, ModelConfig, build_model, forward_tensor, model_forward, restrict_features,
    save_model,
)
from .xai import (
    DROP_THRESHOLD, LimeConfig, aggregate_importance, explain_windows, select_drop_set,
)

log = logging.getLogger(__name__)


@dataclass
class CurriculumConfig:
    epochs_per_stage: int = 12
    batch_size: int = 64
    learning_rate: float = 2e-3
    early_stop_patience: int = 4
    lime_fraction: float = 0.1
    seed: int = 0
    bootstrap_fraction: float = 0.05
    lime_max_instances: int = 48
    lime_num_samples: int = 1000
    lime_kernel_width: float | None = None
    drop_threshold: float = DROP_THRESHOLD
    unlearning: bool = True
    retrain_epochs: int | None = None  # None -> ceil(epochs_per_stage / 2)
    checkpoint_dir: str | None = None

    def validate(self) -> None:
        if self.epochs_per_stage < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidConfig("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.early_stop_patience < 1:
            raise InvalidConfig("early_stop_patience must be >= 1")
        if not 0.0 < self.lime_fraction <= 1.0:
            raise InvalidConfig("lime_fraction must be in (0, 1]")

    @property
    def retrain_budget(self) -> int:
        if self.retrain_epochs is not None:
            return self.retrain_epochs
        return math.ceil(self.epochs_per_stage / 2)


@dataclass
class StageDataset:
    stage_index: int
    train: SequenceBatch
    validation: SequenceBatch
    attack_tags: list[str]


@dataclass
class StageResult:
    stage_index: int
    epochs_run: int
    train_loss_history: list[float]
    validation_metrics: MetricsReport | None
    dropped_features: list[int] = field(default_factory=list)
    checkpoint_path: str | None = None
    start_fingerprint: str = ""
    end_fingerprint: str = ""
    pre_unlearning_metrics: MetricsReport | None = None
    retrain_epochs: int = 0
    active_features: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["validation_metrics"] = None if self.validation_metrics is None else self.validation_metrics.to_dict()
        d["pre_unlearning_metrics"] = (None if self.pre_unlearning_metrics is None
                                       else self.pre_unlearning_metrics.to_dict())
        return d


# ---------------------------------------------------------------------------
# stage data

def _stage_split(plan: StagePlan, batch: SequenceBatch, bootstrap_fraction: float,
                 rng: np.random.Generator, require_all: bool) -> list[SequenceBatch]:
    stage_of, _ = plan.assign(batch.tags)
    normal = np.flatnonzero(stage_of == 1)
    per_stage = {k: np.flatnonzero(stage_of == k) for k in range(2, plan.n_stages + 1)}
    if require_all:
        if len(normal) == 0:
            raise EmptyStage("stage 1 matched zero normal records")
        for k, idx in per_stage.items():
            if len(idx) == 0:
                raise EmptyStage(f"stage {k} matched zero records")
    out = []
    first_attack = per_stage.get(2, np.zeros(0, dtype=np.int64))
    if len(first_attack):
        n_boot = max(1, int(round(bootstrap_fraction * len(first_attack))))
        boot = np.sort(rng.choice(first_attack, size=min(n_boot, len(first_attack)), replace=False))
    else:
        boot = first_attack
    out.append(batch.subset(np.sort(np.concatenate([normal, boot]))))
    acc = normal
    for k in range(2, plan.n_stages + 1):
        acc = np.concatenate([acc, per_stage[k]])
        out.append(batch.subset(np.sort(acc)))
    return out


def make_stage_datasets(plan: StagePlan, train: FeatureMatrix, W: int,
                        validation: FeatureMatrix | None = None, stride: int = 1,
                        bootstrap_fraction: float = 0.05, seed: int = 0) -> list[StageDataset]:
    """Cumulative stage datasets.

    Stage 1 is every normal window plus a small bootstrap sample of the first
    attack stage, so both labels exist. Stage k adds the attacks of stages
    2..k. Windows are cut inside runs of one stage tag only.
    """
    if train.tags is None:
        raise InvalidConfig("stage datasets need the attack-type tags")
    rng = np.random.default_rng(seed)
    tr = windowize_runs(train, W, stride)
    va = windowize_runs(validation, W, stride) if validation is not None and len(validation) else None
    tr_parts = _stage_split(plan, tr, bootstrap_fraction, rng, True)
    va_parts = (_stage_split(plan, va, bootstrap_fraction, rng, False) if va is not None
                else [b.subset([]) for b in tr_parts])
    out = []
    for k, (t, v) in enumerate(zip(tr_parts, va_parts), start=1):
        tags = sorted({g for g, lab in zip(t.tags, t.labels) if lab == 1})
        out.append(StageDataset(k, t, v, tags))
    return out


# ---------------------------------------------------------------------------
# training

def fit_epochs(m: IdsModel, train: SequenceBatch, validation: SequenceBatch | None, epochs: int,
               cfg: CurriculumConfig, seed_key: Sequence[int] = (),
               after_step: Callable[[IdsModel], None] | None = None,
               early_stop: bool = True) -> tuple[int, list[float], MetricsReport | None]:
    """Minibatch Adam on BCE; keeps the weights of the best validation epoch.

    ``train`` and ``validation`` are full-width batches; columns are selected
    through the model's active features.
    """
    x = train.windows[:, :, m.active_features]
    y = train.labels.astype(np.float64)
    xv = validation.windows[:, :, m.active_features] if validation is not None and len(validation) else None
    rng = np.random.default_rng([cfg.seed, *seed_key])
    state = nn.AdamState(lr=cfg.learning_rate)
    params = list(m.parameters())
    losses: list[float] = []
    best_key, best_state, best_metrics, stale = (-1.0, 0.0), None, None, 0
    epochs_run = 0
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with nn.Tape() as tape:
                loss = nn.bce_loss(forward_tensor(m, x[idx], True, rng), y[idx])
            if not np.isfinite(loss.data):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch + 1}")
            nn.backward(tape, loss)
            nn.adam_step(state, params)
            if after_step is not None:
                after_step(m)
            total += float(loss.data) * len(idx)
        losses.append(total / max(len(y), 1))
        epochs_run += 1
        if xv is None:
            continue
        pv = model_forward(m, xv)
        metrics = compute_metrics(pv, validation.labels)
        # F1 first; ties (common once F1 saturates) go to the lower validation loss
        key = (metrics.f1, -nn.binary_cross_entropy(pv, validation.labels))
        if key > best_key:
            best_key, best_state, best_metrics, stale = key, m.state(), metrics, 0
        else:
            stale += 1
            if early_stop and stale >= cfg.early_stop_patience:
                break
    if best_state is not None:
        m.load_state(best_state)
    return epochs_run, losses, best_metrics


def train_stage(m: IdsModel, d: StageDataset, cfg: CurriculumConfig,
                epochs: int | None = None, tag: str = "") -> tuple[IdsModel, StageResult]:
    """Continue training ``m`` in place on one stage."""
    cfg.validate()
    if d.train.n_features <= max(m.active_features, default=-1):
        raise FeatureCountMismatch("stage data is narrower than the model's active features")
    start = m.fingerprint()
    epochs = cfg.epochs_per_stage if epochs is None else epochs
    run, losses, metrics = fit_epochs(m, d.train, d.validation, epochs, cfg,
                                      (d.stage_index, len(tag)))
    if metrics is None and len(d.validation):
        metrics = evaluate_batch(m, d.validation)
    result = StageResult(d.stage_index, run, losses, metrics, [], None, start, m.fingerprint(),
                         active_features=list(m.active_features))
    if cfg.checkpoint_dir:
        os.makedirs(cfg.checkpoint_dir, exist_ok=True)
        name = f"stage_{d.stage_index}{tag}.json"
        save_model(m, os.path.join(cfg.checkpoint_dir, name))
        result.checkpoint_path = name
    return m, result


def evaluate_batch(m: IdsModel, batch: SequenceBatch, threshold: float = 0.5) -> MetricsReport:
    return compute_metrics(model_forward(m, batch.windows[:, :, m.active_features]), batch.labels, threshold)


# ---------------------------------------------------------------------------
# un-learning

def unlearning_drop_set(m: IdsModel, d: StageDataset, cfg: CurriculumConfig) -> list[int]:
    """Original feature indices whose aggregated LIME weight is below the threshold."""
    n = len(d.train)
    k = min(n, cfg.lime_max_instances, max(1, math.ceil(cfg.lime_fraction * n)))
    rng = np.random.default_rng([cfg.seed, d.stage_index, 7])
    picks = np.sort(rng.choice(n, size=k, replace=False))
    windows = d.train.windows[picks][:, :, m.active_features]
    stds = d.train.windows[:, :, m.active_features].reshape(-1, len(m.active_features)).std(axis=0)
    lime = LimeConfig(num_samples=cfg.lime_num_samples, kernel_width=cfg.lime_kernel_width,
                      top_k=len(m.active_features), seed=cfg.seed * 1000 + d.stage_index)
    exps = explain_windows(lambda w: model_forward(m, w), windows, stds, lime, picks.tolist())
    summary = aggregate_importance(exps, len(m.active_features))
    local = select_drop_set(summary, cfg.drop_threshold)
    return [m.active_features[j] for j in local]


@dataclass
class CurriculumRun:
    model: IdsModel
    results: list[StageResult]


def run_curriculum(plan: StagePlan, stages: Sequence[StageDataset], cfg: CurriculumConfig,
                   model: IdsModel | None = None, model_cfg: ModelConfig | None = None) -> CurriculumRun:
    """Train stage by stage; after each stage, drop low-significance features and retrain."""
    cfg.validate()
    if not stages:
        raise EmptyStage("curriculum needs at least one stage")
    if len(stages) != plan.n_stages:
        raise InvalidConfig(f"plan has {plan.n_stages} stages, got {len(stages)} datasets")
    if model is None:
        if model_cfg is None:
            raise InvalidConfig("pass a model or a model config")
        model = build_model(model_cfg)
    results = []
    for d in stages:
        model, res = train_stage(model, d, cfg)
        if cfg.unlearning and len(model.active_features) > 1:
            drop = unlearning_drop_set(model, d, cfg)
            if drop:
                res.pre_unlearning_metrics = res.validation_metrics
                keep = [f for f in model.active_features if f not in drop]
                log.info("stage %d: dropping features %s", d.stage_index, drop)
                model = restrict_features(model, keep, reinit_seed=cfg.seed * 7919 + d.stage_index)
                model, again = train_stage(model, d, cfg, epochs=cfg.retrain_budget, tag="_retrain")
                res.dropped_features = drop
                res.retrain_epochs = again.epochs_run
                res.train_loss_history += again.train_loss_history
                res.validation_metrics = again.validation_metrics
                res.checkpoint_path = again.checkpoint_path or res.checkpoint_path
                res.end_fingerprint = again.end_fingerprint
                res.active_features = list(model.active_features)
        results.append(res)
    return CurriculumRun(model, results)


def train_pooled(train: SequenceBatch, validation: SequenceBatch, cfg: CurriculumConfig,
                 model_cfg: ModelConfig, epochs: int) -> IdsModel:
    """Single-stage baseline on all training windows at once."""
    m = build_model(model_cfg)
    fit_epochs(m, train, validation, epochs, cfg, (0, 99))
    return m
