"""Glue between raw tables, splits, stage datasets and the trained artifacts."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .compress import prune_magnitude, quantize, quantized_forward, size_report
from .curriculum import (
    CurriculumConfig, CurriculumRun, StageDataset, evaluate_batch, make_stage_datasets,
    run_curriculum,
)
from .data_pipeline import (
    FeatureMatrix, Preprocessor, SequenceBatch, SplitSpec, StagePlan, SynthConfig, SynthTruth,
    block_index, fit_preprocessor, records_to_matrix, stratified_split_indices, synthesize_dataset,
    transform, windowize_runs,
)
from .ensemble import BoostConfig, EnsembleBuild, ForestConfig, build_ensemble, ensemble_predict
from .metrics import MetricsReport, compute_metrics
from .model import IdsModel, ModelConfig, parameter_count

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    train: FeatureMatrix
    validation: FeatureMatrix
    test: FeatureMatrix
    preprocessor: Preprocessor
    window: int
    raw_train: FeatureMatrix | None = None
    raw_validation: FeatureMatrix | None = None
    raw_test: FeatureMatrix | None = None

    def test_windows(self) -> SequenceBatch:
        return windowize_runs(self.test, self.window, self.window)


def block_split(m: FeatureMatrix, W: int, spec: SplitSpec) -> tuple[FeatureMatrix, FeatureMatrix, FeatureMatrix]:
    """Stratified split of non-overlapping W-row blocks, stratified by tag.

    Splitting whole blocks keeps every held-out window free of rows seen in
    training; splitting rows first would leak neighbours across the boundary.
    """
    tags = m.tags if m.tags is not None else [str(v) for v in m.y]
    blocks = block_index(tags, W)
    if len(blocks) == 0:
        return m.subset([]), m.subset([]), m.subset([])
    codes = np.unique(np.array([tags[b[-1]] for b in blocks]), return_inverse=True)[1]
    parts = stratified_split_indices(codes, spec)
    return tuple(m.subset(blocks[p].ravel()) for p in parts)


def prepare(m: FeatureMatrix, W: int, spec: SplitSpec, reducer: str = "pca",
            retained_variance: float = 0.95) -> PreparedData:
    tr, va, te = block_split(m, W, spec)
    pre = fit_preprocessor(tr, retained_variance, reducer)
    return PreparedData(transform(pre, tr), transform(pre, va), transform(pre, te), pre, W, tr, va, te)


def synthetic_matrix(plan: StagePlan, seed: int, n_per_stage: int = 3000,
                     **synth) -> tuple[FeatureMatrix, SynthTruth]:
    records, truth = synthesize_dataset(SynthConfig(n_per_stage=n_per_stage, seed=seed, **synth), plan)
    return records_to_matrix(records, truth.feature_names), truth


def synthetic_data(plan: StagePlan, seed: int, n_per_stage: int = 3000, W: int = 10,
                   **synth) -> tuple[PreparedData, SynthTruth]:
    """Generated sessions, split by block, scaled on train rows, no reduction."""
    m, truth = synthetic_matrix(plan, seed, n_per_stage, **synth)
    return prepare(m, W, SplitSpec(seed=seed), reducer="none"), truth


def matrix_fingerprint(m: FeatureMatrix) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(m.X, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(m.y, dtype="<i8").tobytes())
    h.update("\n".join(m.tags or []).encode())
    return h.hexdigest()


def file_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# full run

@dataclass
class PipelineOptions:
    seed: int = 0
    window: int = 10
    reducer: str = "pca"
    retained_variance: float = 0.95
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    model_overrides: dict = field(default_factory=dict)
    ensemble: bool = True
    oof_folds: int = 5
    oof_epochs: int = 10
    forest_trees: int = 100
    boost_rounds: int = 100
    compress: bool = True
    prune_sparsity: float = 0.5
    prune_epochs: int | None = None  # None -> curriculum retrain budget
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineResult:
    data: PreparedData
    stages: list[StageDataset]
    run: CurriculumRun
    model_config: ModelConfig
    test: SequenceBatch
    metrics: dict[str, MetricsReport]
    compression: dict
    ensemble: EnsembleBuild | None
    pruned: IdsModel | None = None

    @property
    def model(self) -> IdsModel:
        return self.run.model


def run_pipeline(data: PreparedData, plan: StagePlan, opts: PipelineOptions) -> PipelineResult:
    """Curriculum with un-learning, then compression and stacking, all scored on the test blocks."""
    cc = opts.curriculum
    W = data.window
    stages = make_stage_datasets(plan, data.train, W, data.validation, stride=W,
                                 bootstrap_fraction=cc.bootstrap_fraction, seed=opts.seed)
    model_cfg = ModelConfig(n_features=data.train.n_features, window=W, seed=opts.seed, **opts.model_overrides)
    run = run_curriculum(plan, stages, cc, model_cfg=model_cfg)
    test = windowize_runs(data.test, W, W)
    metrics = {"curriculum": evaluate_batch(run.model, test, opts.threshold)}

    compression: dict = {}
    pruned = None
    if opts.compress:
        qm = quantize(run.model)
        pq = quantized_forward(qm, test.windows[:, :, run.model.active_features])
        metrics["quantized"] = compute_metrics(pq, test.labels, opts.threshold)
        epochs = cc.retrain_budget if opts.prune_epochs is None else opts.prune_epochs
        last = stages[-1]
        pruned, mask = prune_magnitude(run.model, opts.prune_sparsity, last.train, epochs, cc, last.validation)
        metrics["pruned"] = evaluate_batch(pruned, test, opts.threshold)
        compression = {
            "audit": parameter_count(run.model).to_dict(),
            "dense": size_report(qm).to_dict(),
            "pruned_sparse": size_report(quantize(pruned), sparse=True).to_dict(),
            "target_sparsity": mask.target_sparsity,
            "achieved_sparsity": mask.achieved_sparsity,
            "accuracy_delta_quantized": metrics["quantized"].accuracy - metrics["curriculum"].accuracy,
            "accuracy_delta_pruned": metrics["pruned"].accuracy - metrics["curriculum"].accuracy,
        }

    ens = None
    if opts.ensemble:
        ens = build_ensemble(run.model, stages[-1].train, model_cfg, cc,
                             ForestConfig(n_trees=opts.forest_trees, seed=opts.seed),
                             BoostConfig(n_rounds=opts.boost_rounds, seed=opts.seed),
                             opts.oof_folds, opts.oof_epochs)
        base = ens.ensemble.base_probabilities(test)
        for j, name in enumerate(("nn", "forest", "boosted")):
            metrics[f"base_{name}"] = compute_metrics(base[:, j], test.labels, opts.threshold)
        metrics["ensemble"] = compute_metrics(ensemble_predict(ens.ensemble, test), test.labels, opts.threshold)
    return PipelineResult(data, stages, run, model_cfg, test, metrics, compression, ens, pruned)
