"""Out-of-fold stacking of the sequence network with the two tree ensembles."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from ..curriculum import CurriculumConfig, fit_epochs
from ..data_pipeline import SequenceBatch
from ..errors import FeatureCountMismatch, FoldTooSmall, InvalidConfig, IoFailure, SingleClassInput
from ..model import IdsModel, ModelConfig, build_model, canonical_json, load_model, model_forward
from .trees import (
    BoostConfig, BoostedTrees, DecisionTree, Forest, ForestConfig, train_boosted, train_forest,
)

ENSEMBLE_FORMAT_VERSION = "curricuids.ensemble/1"
BASE_NAMES = ("nn", "forest", "boosted")
PROB_CLIP = 1e-6


class Predictor(Protocol):
    def __call__(self, batch: SequenceBatch) -> np.ndarray: ...


# a learner fits on a batch and returns a predictor
Learner = Callable[[SequenceBatch], Predictor]


def forest_learner(cfg: ForestConfig) -> Learner:
    def fit(batch: SequenceBatch) -> Predictor:
        f = train_forest(batch.means(), batch.labels, cfg)
        return lambda b: f.predict_proba(b.means())
    return fit


def boosted_learner(cfg: BoostConfig) -> Learner:
    def fit(batch: SequenceBatch) -> Predictor:
        bt = train_boosted(batch.means(), batch.labels, cfg)
        return lambda b: bt.predict_proba(b.means())
    return fit


def nn_learner(model_cfg: ModelConfig, cfg: CurriculumConfig, epochs: int,
               active_features: list[int] | None = None) -> Learner:
    """Fresh network per call, trained on the given rows only."""
    def fit(batch: SequenceBatch) -> Predictor:
        m = build_model(model_cfg if active_features is None
                        else _with_width(model_cfg, len(active_features)))
        if active_features is not None:
            m.active_features = list(active_features)
        fit_epochs(m, batch, None, epochs, cfg, (len(batch), 5), early_stop=False)
        return lambda b: model_forward(m, b.windows[:, :, m.active_features])
    return fit


def _with_width(cfg: ModelConfig, n: int) -> ModelConfig:
    return replace(cfg, n_features=n)


# ---------------------------------------------------------------------------
# out-of-fold predictions

@dataclass
class OOFMatrix:
    matrix: np.ndarray  # [n, n_bases]
    folds: np.ndarray  # fold id per row
    base_names: list[str]
    train_rows: list[np.ndarray] = field(default_factory=list)  # rows each fold's bases saw

    def audit(self) -> bool:
        """True when no row was scored by a base trained on it."""
        for k, rows in enumerate(self.train_rows):
            scored = np.flatnonzero(self.folds == k)
            if np.intersect1d(scored, rows).size:
                return False
        return bool(np.isfinite(self.matrix).all()) and len(self.train_rows) == int(self.folds.max()) + 1


def stratified_folds(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    y = np.asarray(y)
    if k < 2:
        raise FoldTooSmall("need at least 2 folds")
    if len(y) < k:
        raise FoldTooSmall(f"{len(y)} rows cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(y), dtype=np.int64)
    offset = 0
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return folds


def build_oof(batch: SequenceBatch, learners: dict[str, Learner], k_folds: int = 5,
              seed: int = 0, folds: np.ndarray | None = None) -> OOFMatrix:
    """Out-of-fold probabilities; ``folds`` overrides the seeded stratified assignment."""
    if folds is None:
        folds = stratified_folds(batch.labels, k_folds, seed)
    else:
        folds = np.asarray(folds, dtype=np.int64)
        if folds.shape != (len(batch),):
            raise InvalidConfig("one fold id per row required")
        k_folds = int(folds.max()) + 1
    names = list(learners)
    out = np.full((len(batch), len(names)), np.nan)
    train_rows = []
    for k in range(k_folds):
        held = np.flatnonzero(folds == k)
        rest = np.flatnonzero(folds != k)
        if held.size == 0:
            raise FoldTooSmall(f"fold {k} is empty")
        if len(np.unique(batch.labels[rest])) < 2:
            raise SingleClassInput(f"training rows outside fold {k} hold one class")
        train, test = batch.subset(rest), batch.subset(held)
        for j, name in enumerate(names):
            out[held, j] = learners[name](train)(test)
        train_rows.append(rest)
    return OOFMatrix(out, folds, names, train_rows)


# ---------------------------------------------------------------------------
# meta-learner

def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    return np.log(p) - np.log1p(-p)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class MetaLearner:
    weights: np.ndarray
    bias: float
    iterations: int = 0

    def predict(self, probs: np.ndarray) -> np.ndarray:
        return _sigmoid(_logit(probs) @ self.weights + self.bias)


def train_meta(probs: np.ndarray, y, max_iter: int = 20000, tol: float = 1e-9) -> MetaLearner:
    """Logistic regression on base logits by full-batch gradient descent from zero.

    The step is 1/L with L the Lipschitz bound of the mean log-loss gradient.
    ``y`` may hold soft targets in [0, 1].
    """
    Z = _logit(probs)
    y = np.asarray(y, dtype=np.float64).ravel()
    A = np.hstack([Z, np.ones((Z.shape[0], 1))])
    L = 0.25 * np.linalg.eigvalsh(A.T @ A / len(y)).max()
    step = 1.0 / L if L > 0 else 1.0
    theta = np.zeros(A.shape[1])
    it = 0
    for it in range(1, max_iter + 1):
        grad = A.T @ (_sigmoid(A @ theta) - y) / len(y)
        theta -= step * grad
        if np.abs(grad).max() < tol:
            break
    return MetaLearner(theta[:-1].copy(), float(theta[-1]), it)


# ---------------------------------------------------------------------------
# the stacked ensemble

@dataclass
class StackedEnsemble:
    nn: IdsModel
    forest: Forest
    boosted: BoostedTrees
    meta: MetaLearner
    oof_folds: int
    nn_checkpoint: str | None = None

    def base_probabilities(self, batch: SequenceBatch) -> np.ndarray:
        if batch.n_features != self.forest.n_features:
            raise FeatureCountMismatch(f"trees expect {self.forest.n_features} features, got {batch.n_features}")
        means = batch.means()
        return np.column_stack([
            model_forward(self.nn, batch.windows[:, :, self.nn.active_features]),
            self.forest.predict_proba(means),
            self.boosted.predict_proba(means),
        ])


def stack_train(oof: OOFMatrix, y, nn: IdsModel, forest: Forest, boosted: BoostedTrees) -> StackedEnsemble:
    if list(oof.base_names) != list(BASE_NAMES):
        raise InvalidConfig(f"OOF columns must be {BASE_NAMES}, got {oof.base_names}")
    meta = train_meta(oof.matrix, y)
    return StackedEnsemble(nn, forest, boosted, meta, int(oof.folds.max()) + 1)


def ensemble_predict(e: StackedEnsemble, batch: SequenceBatch) -> np.ndarray:
    return e.meta.predict(e.base_probabilities(batch))


@dataclass
class EnsembleBuild:
    ensemble: StackedEnsemble
    oof: OOFMatrix


def build_ensemble(nn: IdsModel, train: SequenceBatch, model_cfg: ModelConfig,
                   cfg: CurriculumConfig, forest_cfg: ForestConfig | None = None,
                   boost_cfg: BoostConfig | None = None, k_folds: int = 5,
                   oof_epochs: int = 10) -> EnsembleBuild:
    """OOF matrix, full-data trees and the meta-learner around a trained network.

    Fold networks start from a fresh initialization with the final network's
    feature set, so no fold model has seen its held-out rows.
    """
    forest_cfg = forest_cfg or ForestConfig(seed=cfg.seed)
    boost_cfg = boost_cfg or BoostConfig(seed=cfg.seed)
    learners = {
        "nn": nn_learner(model_cfg, cfg, oof_epochs, nn.active_features),
        "forest": forest_learner(forest_cfg),
        "boosted": boosted_learner(boost_cfg),
    }
    oof = build_oof(train, learners, k_folds, cfg.seed)
    forest = train_forest(train.means(), train.labels, forest_cfg)
    boosted = train_boosted(train.means(), train.labels, boost_cfg)
    return EnsembleBuild(stack_train(oof, train.labels, nn, forest, boosted), oof)


# ---------------------------------------------------------------------------
# checkpoints

def ensemble_to_dict(e: StackedEnsemble, nn_checkpoint: str) -> dict:
    return {
        "format_version": ENSEMBLE_FORMAT_VERSION,
        "nn_checkpoint": nn_checkpoint,
        "forest": {"features_per_split": e.forest.features_per_split, "n_features": e.forest.n_features,
                   "tree_seeds": e.forest.tree_seeds, "trees": [t.to_dict() for t in e.forest.trees]},
        "boosted": {"learning_rate": e.boosted.learning_rate, "base_score": e.boosted.base_score,
                    "n_features": e.boosted.n_features, "trees": [t.to_dict() for t in e.boosted.trees]},
        "meta": {"weights": e.meta.weights.tolist(), "bias": e.meta.bias, "base_names": list(BASE_NAMES)},
        "oof_folds": e.oof_folds,
    }


def save_ensemble(e: StackedEnsemble, path, nn_checkpoint: str) -> str:
    """Write the ensemble; ``nn_checkpoint`` is stored as given (relative to ``path``'s directory)."""
    text = canonical_json(ensemble_to_dict(e, nn_checkpoint))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return text


def load_ensemble(path) -> StackedEnsemble:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if d.get("format_version") != ENSEMBLE_FORMAT_VERSION:
        raise InvalidConfig(f"unsupported ensemble format {d.get('format_version')!r}")
    nn_path = os.path.join(os.path.dirname(os.fspath(path)), d["nn_checkpoint"])
    nn, _ = load_model(nn_path)
    fd, bd = d["forest"], d["boosted"]
    forest = Forest([DecisionTree.from_dict(t) for t in fd["trees"]], int(fd["features_per_split"]),
                    int(fd["n_features"]), list(fd.get("tree_seeds", [])))
    boosted = BoostedTrees([DecisionTree.from_dict(t) for t in bd["trees"]], float(bd["learning_rate"]),
                           float(bd["base_score"]), int(bd["n_features"]))
    meta = MetaLearner(np.array(d["meta"]["weights"], dtype=np.float64), float(d["meta"]["bias"]))
    return StackedEnsemble(nn, forest, boosted, meta, int(d["oof_folds"]), d["nn_checkpoint"])
