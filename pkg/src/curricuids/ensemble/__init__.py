"""Tree ensembles and out-of-fold stacking."""

from .stacking import (
    BASE_NAMES, EnsembleBuild, MetaLearner, OOFMatrix, StackedEnsemble, boosted_learner,
    build_ensemble, build_oof, ensemble_predict, forest_learner, load_ensemble, nn_learner,
    save_ensemble, stack_train, stratified_folds, train_meta,
)
from .trees import (
    BoostConfig, BoostedTrees, DecisionTree, Forest, ForestConfig, grow_classification_tree,
    grow_gradient_tree, train_boosted, train_forest,
)

__all__ = [
    "BASE_NAMES", "EnsembleBuild", "MetaLearner", "OOFMatrix", "StackedEnsemble", "boosted_learner",
    "build_ensemble", "build_oof", "ensemble_predict", "forest_learner", "load_ensemble", "nn_learner",
    "save_ensemble", "stack_train", "stratified_folds", "train_meta",
    "BoostConfig", "BoostedTrees", "DecisionTree", "Forest", "ForestConfig",
    "grow_classification_tree", "grow_gradient_tree", "train_boosted", "train_forest",
]
