"""Local surrogate (LIME) explanations and the drop-set rule for feature un-learning."""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyList, IoFailure, ShapeMismatch

DROP_THRESHOLD = -0.01
# kernel width per sqrt(feature count); 0.75 (the usual tabular default) leaves
# the surrogate too global to stay linear around a steep sigmoid
KERNEL_WIDTH_FACTOR = 0.35
REPORT_SCHEMA = "curricuids.explanation/1"


@dataclass
class LimeConfig:
    num_samples: int = 1000
    kernel_width: float | None = None  # None -> KERNEL_WIDTH_FACTOR * sqrt(F)
    top_k: int = 10
    ridge_lambda: float = 1e-3
    seed: int = 0

    def width_for(self, n_features: int) -> float:
        return self.kernel_width if self.kernel_width is not None else KERNEL_WIDTH_FACTOR * math.sqrt(n_features)


@dataclass
class Explanation:
    instance_id: int | str
    predicted_probability: float
    feature_weights: list[tuple[int, float]]
    intercept: float
    local_fidelity_r2: float
    degenerate: bool = False
    instance_values: list[float] = field(default_factory=list)

    def weight_of(self, feature: int) -> float:
        for f, w in self.feature_weights:
            if f == feature:
                return w
        return 0.0


@dataclass
class ImportanceSummary:
    mean_weight: np.ndarray
    frequency: np.ndarray
    n_instances: int


def _weighted_ridge(Z: np.ndarray, y: np.ndarray, w: np.ndarray, lam: float):
    """Weighted ridge with an unpenalized intercept; returns (coef, intercept, r2)."""
    sw = w.sum()
    zbar = w @ Z / sw
    ybar = w @ y / sw
    Zc = Z - zbar
    yc = y - ybar
    A = (Zc * w[:, None]).T @ Zc + lam * np.eye(Z.shape[1])
    coef = np.linalg.solve(A, (Zc * w[:, None]).T @ yc)
    intercept = ybar - zbar @ coef
    resid = y - (Z @ coef + intercept)
    ss_tot = w @ (yc * yc)
    r2 = 1.0 - (w @ (resid * resid)) / ss_tot if ss_tot > 0 else 0.0
    return coef, float(intercept), float(r2)


def lime_explain(predict: Callable[[np.ndarray], np.ndarray], instance, train_stats,
                 cfg: LimeConfig | None = None, instance_id: int | str = 0) -> Explanation:
    """Fit a locally weighted linear surrogate around ``instance``.

    ``predict`` maps an ``[n, F]`` array of feature vectors to probabilities.
    ``train_stats`` is ``(means, stddevs)``; perturbations are Gaussian with
    those standard deviations, and the surrogate is fit on the standardized
    offsets so weights are per standard deviation of each feature.
    """
    cfg = cfg or LimeConfig()
    x = np.asarray(instance, dtype=np.float64).ravel()
    _, sd = (np.asarray(s, dtype=np.float64).ravel() for s in train_stats)
    F = x.shape[0]
    if sd.shape[0] != F:
        raise ShapeMismatch(f"instance has {F} features, stats have {sd.shape[0]}")
    sd = np.where(sd > 0, sd, 1.0)
    n = max(cfg.num_samples, F + 2)
    rng = np.random.default_rng(cfg.seed)
    Z = rng.standard_normal((n, F))
    Z[0] = 0.0  # the instance itself
    samples = x + Z * sd
    y = np.asarray(predict(samples), dtype=np.float64).ravel()
    if y.shape[0] != n:
        raise ShapeMismatch(f"predict returned {y.shape[0]} values for {n} samples")
    p0 = float(y[0])
    if np.ptp(y) < 1e-12:
        return Explanation(instance_id, p0, [], p0, 0.0, True, x.tolist())
    width = cfg.width_for(F)
    kw = np.exp(-(Z * Z).sum(axis=1) / width ** 2)
    coef, intercept, r2 = _weighted_ridge(Z, y, kw, cfg.ridge_lambda)
    order = sorted(range(F), key=lambda j: (-abs(coef[j]), j))[:cfg.top_k]
    return Explanation(instance_id, p0, [(int(j), float(coef[j])) for j in order],
                       intercept, r2, False, x.tolist())


def aggregate_importance(explanations: Sequence[Explanation], F: int) -> ImportanceSummary:
    if not explanations:
        raise EmptyList("no explanations to aggregate")
    total = np.zeros(F)
    freq = np.zeros(F)
    for e in explanations:
        for j, w in e.feature_weights:
            total[j] += w
            freq[j] += 1
    n = len(explanations)
    return ImportanceSummary(total / n, freq / n, n)


def select_drop_set(s: ImportanceSummary, threshold: float = DROP_THRESHOLD) -> list[int]:
    """Features whose mean signed weight falls below ``threshold``.

    The full feature set is never returned: if every feature qualifies, the
    one with the highest mean survives.
    """
    drop = [int(j) for j in np.flatnonzero(s.mean_weight < threshold)]
    if drop and len(drop) == len(s.mean_weight):
        keep = int(np.argmax(s.mean_weight))
        warnings.warn(f"every feature is below {threshold}; retaining feature {keep}",
                      RuntimeWarning, stacklevel=2)
        drop.remove(keep)
    return drop


# ---------------------------------------------------------------------------
# reports

def _threshold_expr(name: str, value: float, weight: float) -> str:
    op = ">" if weight > 0 else "<="
    return f"{name} {op} {value:.4g}"


def explanation_to_dict(e: Explanation, feature_names: Sequence[str]) -> dict:
    values = e.instance_values
    return {
        "schema": REPORT_SCHEMA,
        "instance_id": e.instance_id,
        "probability": {"attack": e.predicted_probability, "normal": 1.0 - e.predicted_probability},
        "weights": [{"feature": int(j), "name": feature_names[j], "weight": w,
                     "threshold_expr": _threshold_expr(feature_names[j],
                                                       values[j] if values else float("nan"), w)}
                    for j, w in e.feature_weights],
        "values": {feature_names[j]: v for j, v in enumerate(values)},
        "intercept": e.intercept,
        "local_fidelity_r2": e.local_fidelity_r2,
        "degenerate": e.degenerate,
    }


def explanation_from_dict(d: dict) -> Explanation:
    return Explanation(d["instance_id"], float(d["probability"]["attack"]),
                       [(int(w["feature"]), float(w["weight"])) for w in d["weights"]],
                       float(d["intercept"]), float(d["local_fidelity_r2"]),
                       bool(d.get("degenerate", False)), [float(v) for v in d["values"].values()])


def render_text(e: Explanation, feature_names: Sequence[str]) -> str:
    p = e.predicted_probability
    lines = ["Prediction probabilities",
             f"  attack: {p:.2f}, normal: {1.0 - p:.2f}",
             "",
             "Feature contributions"]
    if not e.feature_weights:
        lines.append("  no local structure: predictions are constant around this instance")
    else:
        exprs = [_threshold_expr(feature_names[j], e.instance_values[j], w) for j, w in e.feature_weights]
        width = max(len(s) for s in exprs)
        for (j, w), expr in zip(e.feature_weights, exprs):
            side = "attack" if w > 0 else "normal"
            lines.append(f"  {expr:<{width}}  {w:+.4f}  ({side})")
        lines.append(f"  local fidelity R^2: {e.local_fidelity_r2:.3f}")
    lines += ["", "Feature values"]
    if e.instance_values:
        width = max(len(n) for n in feature_names)
        for name, v in zip(feature_names, e.instance_values):
            lines.append(f"  {name:<{width}}  {v:.4g}")
    return "\n".join(lines) + "\n"


def render_explanation(e: Explanation, feature_names: Sequence[str], out: str | os.PathLike) -> dict:
    """Write ``out`` (JSON) and a sibling ``.txt`` rendering; returns the JSON document."""
    doc = explanation_to_dict(e, feature_names)
    base, _ = os.path.splitext(os.fspath(out))
    try:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        with open(base + ".txt", "w", encoding="utf-8") as fh:
            fh.write(render_text(e, feature_names))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return doc


# ---------------------------------------------------------------------------
# sequence models

def window_predictor(predict_windows: Callable[[np.ndarray], np.ndarray], window: np.ndarray):
    """Adapt a window classifier to LIME's per-feature vectors.

    The explained vector is the window's per-feature mean; a perturbed vector
    shifts every timestep of the window by its offset from that mean.
    """
    window = np.asarray(window, dtype=np.float64)
    center = window.mean(axis=0)

    def predict(vectors: np.ndarray) -> np.ndarray:
        shifts = vectors - center
        return predict_windows(window[None, :, :] + shifts[:, None, :])

    return center, predict


def explain_windows(predict_windows: Callable[[np.ndarray], np.ndarray], windows: np.ndarray,
                    stddevs: np.ndarray, cfg: LimeConfig, ids: Sequence | None = None) -> list[Explanation]:
    """One explanation per window, each seeded from ``cfg.seed`` plus its position."""
    out = []
    for i, w in enumerate(windows):
        center, predict = window_predictor(predict_windows, w)
        sub = LimeConfig(cfg.num_samples, cfg.kernel_width, cfg.top_k, cfg.ridge_lambda, cfg.seed + i)
        out.append(lime_explain(predict, center, (center, stddevs), sub,
                                ids[i] if ids is not None else i))
    return out


def config_dict(cfg: LimeConfig) -> dict:
    return asdict(cfg)
