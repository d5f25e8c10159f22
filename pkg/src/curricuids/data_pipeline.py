"""Ingestion, cleaning, scaling/reduction, splitting, windowing and staging.

Also hosts the synthetic flow generator used for desk-scale experiments.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import (
    AllRowsRemoved, DimensionMismatch, EmptyTrainSet, InvalidConfig, MissingFile,
    MissingLabelColumn, RaggedRow, SingleClassInput, UnknownDatasetKind,
)

log = logging.getLogger(__name__)

NORMAL_PATTERNS = ("normal", "benign")
DEFAULT_OUTLIER_Z = 4.0
OSCILLATION_SHIFT = 0.2
BROAD_SHIFT = 0.5


# ---------------------------------------------------------------------------
# tables

@dataclass
class RawTable:
    column_names: list[str]
    rows: list[list]
    label_column: str
    # per categorical column: category -> code, frozen once fitted
    encoders: dict[str, dict[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.label_column not in self.column_names:
            raise MissingLabelColumn(f"label column {self.label_column!r} not in header")
        for i, row in enumerate(self.rows):
            if len(row) != len(self.column_names):
                raise RaggedRow(f"row {i} has {len(row)} cells, header has {len(self.column_names)}")

    @property
    def label_index(self) -> int:
        return self.column_names.index(self.label_column)

    def column(self, name: str) -> list:
        j = self.column_names.index(name)
        return [r[j] for r in self.rows]

    def numeric_columns(self) -> list[int]:
        """Columns whose cells are all numbers, excluding the label and encoded categoricals."""
        out = []
        for j, name in enumerate(self.column_names):
            if j == self.label_index or name in self.encoders:
                continue
            if all(c is None or isinstance(c, float) for c in (r[j] for r in self.rows)):
                out.append(j)
        return out


def _parse_cell(text: str):
    text = text.strip()
    if text == "":
        return None
    try:
        v = float(text)
    except ValueError:
        return text
    if not math.isfinite(v):
        return None
    return v


def load_table(path: str | os.PathLike, label_column: str) -> RawTable:
    if not os.path.isfile(path):
        raise MissingFile(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingLabelColumn(f"{path} has no header row") from None
        if label_column not in header:
            raise MissingLabelColumn(f"label column {label_column!r} not in header of {path}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise RaggedRow(f"{path}:{lineno}: {len(raw)} cells, header has {len(header)}")
            rows.append([_parse_cell(c) for c in raw])
    li = header.index(label_column)
    for r in rows:
        # labels stay text even when numeric-looking
        v = r[li]
        r[li] = "" if v is None else (v if isinstance(v, str) else _num_text(v))
    return RawTable(header, rows, label_column)


def _num_text(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(v)


def clean_table(t: RawTable, outlier_z: float = DEFAULT_OUTLIER_Z,
                encoders: dict[str, dict[str, int]] | None = None,
                drop_outliers: bool = True) -> RawTable:
    """Zero-fill, dedup, drop z-score outliers, integer-encode categoricals.

    ``encoders`` (from a previously cleaned training table) freezes category
    codes; unseen categories then map to -1.
    """
    li = t.label_index
    num_cols = t.numeric_columns()
    cat_cols = [j for j in range(len(t.column_names)) if j != li and j not in num_cols]

    rows = []
    for r in t.rows:
        r = list(r)
        for j in num_cols:
            if r[j] is None:
                r[j] = 0.0
        for j in cat_cols:
            if r[j] is None:
                r[j] = ""
        rows.append(r)

    seen = set()
    deduped = []
    for r in rows:
        key = tuple(r)
        if key in seen:
            continue
        seen.add(key)
        deduped.append(r)
    rows = deduped

    if drop_outliers and num_cols:
        # trim to a fixed point so a second pass removes nothing
        while rows:
            vals = np.array([[r[j] for j in num_cols] for r in rows], dtype=np.float64)
            sd = vals.std(axis=0)
            sd[sd == 0] = np.inf
            keep = (np.abs(vals - vals.mean(axis=0)) / sd <= outlier_z).all(axis=1)
            if keep.all():
                break
            rows = [r for r, k in zip(rows, keep) if k]

    if not rows:
        raise AllRowsRemoved("cleaning removed every row")

    fitted = {k: dict(v) for k, v in (encoders or t.encoders).items()}
    frozen = encoders is not None
    for j in cat_cols:
        name = t.column_names[j]
        if name in t.encoders and all(isinstance(r[j], float) for r in rows):
            continue  # already encoded by an earlier pass
        codes = fitted.setdefault(name, {})
        for r in rows:
            cell = r[j] if isinstance(r[j], str) else _num_text(r[j])
            if cell not in codes:
                if frozen:
                    r[j] = -1.0
                    continue
                codes[cell] = len(codes)
            r[j] = float(codes[cell])
    return RawTable(list(t.column_names), rows, t.label_column, fitted)


# ---------------------------------------------------------------------------
# feature matrices

@dataclass
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    tags: list[str] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise DimensionMismatch(f"X {self.X.shape} vs y {self.y.shape}")
        if len(self.feature_names) != self.X.shape[1]:
            raise DimensionMismatch("feature_names length differs from column count")
        if self.tags is not None and len(self.tags) != len(self.y):
            raise DimensionMismatch("tags length differs from row count")

    def __len__(self):
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        tags = None if self.tags is None else [self.tags[i] for i in idx]
        return FeatureMatrix(self.X[idx], self.y[idx], list(self.feature_names), tags)


def is_normal_tag(tag: str) -> bool:
    low = str(tag).strip().lower()
    return low in ("0", "") or any(p in low for p in NORMAL_PATTERNS)


def table_to_matrix(t: RawTable) -> FeatureMatrix:
    """Numeric view of a cleaned table; label 0 for normal/benign tags, else 1."""
    li = t.label_index
    cols = [j for j in range(len(t.column_names)) if j != li]
    X = np.array([[r[j] for j in cols] for r in t.rows], dtype=np.float64).reshape(len(t.rows), len(cols))
    tags = [str(r[li]) for r in t.rows]
    y = np.array([0 if is_normal_tag(g) else 1 for g in tags], dtype=np.int64)
    return FeatureMatrix(X, y, [t.column_names[j] for j in cols], tags)


@dataclass
class Preprocessor:
    means: np.ndarray
    stddevs: np.ndarray
    projection: np.ndarray | None
    retained_variance: float
    feature_names: list[str]
    zero_variance: list[int] = field(default_factory=list)
    explained_variance_ratio: np.ndarray | None = None

    @property
    def n_inputs(self) -> int:
        return self.means.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.n_inputs if self.projection is None else self.projection.shape[1]

    def output_names(self) -> list[str]:
        if self.projection is None:
            return list(self.feature_names)
        return [f"pc{i + 1}" for i in range(self.projection.shape[1])]

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "stddevs": self.stddevs.tolist(),
            "projection": None if self.projection is None else self.projection.tolist(),
            "retained_variance": self.retained_variance,
            "feature_names": list(self.feature_names),
            "zero_variance": list(self.zero_variance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessor":
        proj = d.get("projection")
        return cls(np.array(d["means"], dtype=np.float64), np.array(d["stddevs"], dtype=np.float64),
                   None if proj is None else np.array(proj, dtype=np.float64),
                   float(d["retained_variance"]), list(d["feature_names"]),
                   list(d.get("zero_variance", [])))


def fit_preprocessor(train: FeatureMatrix, retained_variance: float = 0.95,
                     reducer: str = "pca", max_components: int | None = None) -> Preprocessor:
    """Standard scaling from the training rows, then variance-threshold PCA.

    ``reducer="none"`` keeps the scaled columns (identity projection), which
    preserves feature identity for explanation-driven pruning.
    """
    if len(train) == 0:
        raise EmptyTrainSet("cannot fit a preprocessor on zero rows")
    if not 0.0 < retained_variance <= 1.0:
        raise InvalidConfig(f"retained_variance must be in (0, 1], got {retained_variance}")
    X = train.X
    means = X.mean(axis=0)
    sd = X.std(axis=0)
    zero_var = [int(j) for j in np.flatnonzero(sd <= 1e-12)]
    sd[zero_var] = 1.0
    if reducer == "none":
        return Preprocessor(means, sd, None, 1.0, list(train.feature_names), zero_var)
    if reducer != "pca":
        raise InvalidConfig(f"unknown reducer {reducer!r}")
    Z = (X - means) / sd
    cov = Z.T @ Z / max(len(train), 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    # deterministic sign: largest-magnitude loading positive
    flip = np.sign(evecs[np.abs(evecs).argmax(axis=0), np.arange(evecs.shape[1])])
    evecs = evecs * np.where(flip == 0, 1.0, flip)
    total = evals.sum()
    if total <= 0:
        n_comp = 1
        ratio = np.zeros_like(evals)
    else:
        ratio = evals / total
        cum = np.cumsum(ratio)
        n_comp = int(np.searchsorted(cum, retained_variance - 1e-12) + 1)
        n_comp = min(n_comp, len(evals))
        if retained_variance >= 1.0:
            # every direction that carries variance
            n_comp = max(n_comp, int((evals > 1e-12 * evals[0]).sum()))
    if max_components is not None:
        n_comp = max(1, min(n_comp, max_components))
    return Preprocessor(means, sd, evecs[:, :n_comp], retained_variance,
                        list(train.feature_names), zero_var, ratio[:n_comp])


def transform(p: Preprocessor, m: FeatureMatrix) -> FeatureMatrix:
    if m.n_features != p.n_inputs:
        raise DimensionMismatch(f"preprocessor fit on {p.n_inputs} features, got {m.n_features}")
    Z = (m.X - p.means) / p.stddevs
    if p.projection is not None:
        Z = Z @ p.projection
    return FeatureMatrix(Z, m.y.copy(), p.output_names(), None if m.tags is None else list(m.tags))


def lda_ranking(m: FeatureMatrix) -> list[tuple[str, float]]:
    """Per-feature Fisher score (between-class over within-class variance), descending.

    Informational only; the reducer itself is PCA.
    """
    if len(set(m.y.tolist())) < 2:
        raise SingleClassInput("LDA ranking needs both classes")
    a, b = m.X[m.y == 0], m.X[m.y == 1]
    within = a.var(axis=0) + b.var(axis=0)
    score = (a.mean(axis=0) - b.mean(axis=0)) ** 2 / np.where(within > 0, within, np.inf)
    order = np.argsort(-score, kind="stable")
    return [(m.feature_names[j], float(score[j])) for j in order]


# ---------------------------------------------------------------------------
# splitting

@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    test_fraction: float = 0.2
    validation_fraction_of_train: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-9:
            raise InvalidConfig("train and test fractions must sum to 1")
        if not 0.0 <= self.validation_fraction_of_train < 1.0:
            raise InvalidConfig("validation fraction must be in [0, 1)")


def _split_class(idx: np.ndarray, frac: float, rng: np.random.Generator):
    idx = idx[rng.permutation(len(idx))]
    k = int(round(frac * len(idx)))
    return idx[:k], idx[k:]


def stratified_split_indices(y: np.ndarray, spec: SplitSpec):
    """Per-class shuffled split into sorted (train, validation, test) index arrays."""
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise SingleClassInput("stratified split needs both classes")
    rng = np.random.default_rng(spec.seed)
    tr, va, te = [], [], []
    for c in classes:
        members = np.flatnonzero(y == c)
        test, rest = _split_class(members, spec.test_fraction, rng)
        val, train = _split_class(rest, spec.validation_fraction_of_train, rng)
        tr.append(train)
        va.append(val)
        te.append(test)
    return tuple(np.sort(np.concatenate(parts)) for parts in (tr, va, te))


def stratified_split(m: FeatureMatrix, spec: SplitSpec):
    tr, va, te = stratified_split_indices(m.y, spec)
    return m.subset(tr), m.subset(va), m.subset(te)


# ---------------------------------------------------------------------------
# windows

@dataclass
class FlowRecord:
    features: np.ndarray
    label: int
    stage_tag: str


@dataclass
class SequenceBatch:
    windows: np.ndarray  # [batch, W, n_features]
    labels: np.ndarray  # [batch]
    tags: list[str] | None = None

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.windows.ndim != 3 or self.windows.shape[0] != self.labels.shape[0]:
            raise DimensionMismatch(f"windows {self.windows.shape} vs labels {self.labels.shape}")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.windows.shape[2]

    def subset(self, idx) -> "SequenceBatch":
        idx = np.asarray(idx, dtype=np.int64)
        tags = None if self.tags is None else [self.tags[i] for i in idx]
        return SequenceBatch(self.windows[idx], self.labels[idx], tags)

    def select_features(self, cols) -> "SequenceBatch":
        return SequenceBatch(self.windows[:, :, list(cols)], self.labels, self.tags)

    def means(self) -> np.ndarray:
        """Per-window mean feature vectors, the tabular view used by trees and LIME."""
        return self.windows.mean(axis=1)

    @staticmethod
    def concat(batches: Sequence["SequenceBatch"]) -> "SequenceBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            raise DimensionMismatch("nothing to concatenate")
        tags = None
        if all(b.tags is not None for b in batches):
            tags = [t for b in batches for t in b.tags]
        return SequenceBatch(np.concatenate([b.windows for b in batches]),
                             np.concatenate([b.labels for b in batches]), tags)


def window_count(n: int, W: int, stride: int) -> int:
    return (n - W) // stride + 1 if n >= W else 0


def windowize(records: Sequence[FlowRecord], W: int, stride: int = 1) -> SequenceBatch:
    if W < 1 or stride < 1:
        raise InvalidConfig("window length and stride must be >= 1")
    n = len(records)
    count = window_count(n, W, stride)
    nf = len(records[0].features) if n else 0
    if count == 0:
        return SequenceBatch(np.zeros((0, W, nf)), np.zeros(0, dtype=np.int64), [])
    feats = np.array([r.features for r in records], dtype=np.float64)
    starts = np.arange(count) * stride
    windows = np.stack([feats[s:s + W] for s in starts])
    last = starts + W - 1
    return SequenceBatch(windows, np.array([records[i].label for i in last], dtype=np.int64),
                         [records[i].stage_tag for i in last])


def records_from_matrix(m: FeatureMatrix) -> list[FlowRecord]:
    tags = m.tags if m.tags is not None else [str(v) for v in m.y]
    return [FlowRecord(m.X[i], int(m.y[i]), tags[i]) for i in range(len(m))]


def tag_runs(tags: Sequence[str]) -> list[tuple[int, int]]:
    """Half-open ``(start, stop)`` spans of consecutive identical tags."""
    runs = []
    start = 0
    for i in range(1, len(tags) + 1):
        if i == len(tags) or tags[i] != tags[start]:
            runs.append((start, i))
            start = i
    return runs


def windowize_runs(m: FeatureMatrix, W: int, stride: int = 1) -> SequenceBatch:
    """Window each run of identical stage tags separately so windows never mix tags."""
    recs = records_from_matrix(m)
    parts = [windowize(recs[a:b], W, stride) for a, b in tag_runs([r.stage_tag for r in recs])]
    parts = [p for p in parts if len(p)]
    if not parts:
        return SequenceBatch(np.zeros((0, W, m.n_features)), np.zeros(0, dtype=np.int64), [])
    return SequenceBatch.concat(parts)


def block_index(tags: Sequence[str], W: int) -> np.ndarray:
    """Row indices of non-overlapping W-length blocks inside each tag run, shape [n_blocks, W]."""
    blocks = []
    for a, b in tag_runs(list(tags)):
        for s in range(a, b - W + 1, W):
            blocks.append(np.arange(s, s + W))
    return np.array(blocks, dtype=np.int64).reshape(-1, W)


# ---------------------------------------------------------------------------
# stage plans

class DatasetKind(str, Enum):
    EdgeIIoT = "edge-iiot"
    CicAptIIoT2024 = "cic-apt-iiot-2024"
    CicIoV2024 = "cic-iov-2024"
    Custom = "custom"


@dataclass
class Stage:
    index: int
    name: str
    patterns: list[str]


@dataclass
class StagePlan:
    dataset_kind: DatasetKind
    stages: list[Stage]

    def __post_init__(self):
        if [s.index for s in self.stages] != list(range(1, len(self.stages) + 1)):
            raise InvalidConfig("stage indices must be 1..K in order")
        if not self.stages or not all(is_normal_tag(p) for p in self.stages[0].patterns):
            raise InvalidConfig("stage 1 must contain only the normal/benign pattern")

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def matches(self, tag: str) -> list[int]:
        low = str(tag).strip().lower()
        hits = []
        for s in self.stages:
            if s.index == 1:
                if is_normal_tag(tag):
                    hits.append(1)
            elif any(p.lower() in low for p in s.patterns):
                hits.append(s.index)
        return hits

    def stage_of(self, tag: str) -> int | None:
        hits = self.matches(tag)
        if len(hits) > 1:
            raise InvalidConfig(f"tag {tag!r} matches several stages {hits}")
        return hits[0] if hits else None

    def assign(self, tags: Sequence[str]) -> tuple[np.ndarray, list[str]]:
        """Stage index per tag (0 = unmatched) plus the sorted unmatched tag names."""
        cache: dict[str, int] = {}
        out = np.zeros(len(tags), dtype=np.int64)
        for i, t in enumerate(tags):
            if t not in cache:
                cache[t] = self.stage_of(t) or 0
            out[i] = cache[t]
        unmatched = sorted(t for t, s in cache.items() if s == 0)
        if unmatched:
            log.warning("stage plan leaves %d label(s) unmatched: %s", len(unmatched), unmatched)
        return out, unmatched

    def to_dict(self) -> dict:
        return {"dataset_kind": self.dataset_kind.value,
                "stages": {str(s.index): {"name": s.name, "patterns": list(s.patterns)}
                           for s in self.stages}}

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        """Accepts the full form or a bare override ``{index: [patterns]}``."""
        kind = DatasetKind(d.get("dataset_kind", "custom"))
        raw = d.get("stages", {k: v for k, v in d.items() if k != "dataset_kind"})
        stages = []
        for k in sorted(raw, key=int):
            v = raw[k]
            if isinstance(v, dict):
                stages.append(Stage(int(k), v.get("name", f"stage {k}"), list(v["patterns"])))
            else:
                stages.append(Stage(int(k), "normal" if int(k) == 1 else f"stage {k}", list(v)))
        return cls(kind, stages)


def build_stage_plan(kind) -> StagePlan:
    try:
        kind = DatasetKind(kind) if not isinstance(kind, DatasetKind) else kind
    except ValueError:
        raise UnknownDatasetKind(f"unknown dataset kind {kind!r}") from None
    normal = Stage(1, "normal", ["normal"])
    if kind is DatasetKind.EdgeIIoT:
        stages = [normal,
                  Stage(2, "simple", ["OS Fingerprinting", "Port Scanning", "Vulnerability Scanner"]),
                  Stage(3, "medium", ["XSS", "SQL Injection", "Password", "Uploading"]),
                  Stage(4, "complex", ["Backdoor", "DDoS", "MITM", "Ransomware"])]
    elif kind is DatasetKind.CicAptIIoT2024:
        stages = [normal, Stage(2, "attack", ["attack"])]
    elif kind is DatasetKind.CicIoV2024:
        stages = [normal,
                  Stage(2, "spoofing", ["GAS", "RPM", "SPEED", "STEERING_WHEEL"]),
                  Stage(3, "dos", ["DoS"])]
    else:
        raise UnknownDatasetKind("custom plans are loaded from a JSON override file")
    return StagePlan(kind, stages)


def load_stage_plan(path: str | os.PathLike) -> StagePlan:
    if not os.path.isfile(path):
        raise MissingFile(f"no such plan file: {path}")
    with open(path, encoding="utf-8") as fh:
        return StagePlan.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# synthetic flows

@dataclass
class SynthConfig:
    n_per_stage: int = 3000
    n_features: int = 16
    noise: float = 1.0
    seed: int = 0
    n_decoys: int = 2
    session_length: int = 40
    decoy_flip: float = 0.25


@dataclass
class SynthTruth:
    feature_names: list[str]
    decoy_features: list[int]
    groups: list[list[int]]
    stage_groups: dict[int, list[int]]
    stage_modes: dict[int, str]


def _ar1(rng: np.random.Generator, n: int, k: int, phi: float, scale: float) -> np.ndarray:
    """AR(1) noise with stationary standard deviation ``scale``."""
    eps = rng.normal(0.0, scale * math.sqrt(1.0 - phi * phi), size=(n, k))
    out = np.empty((n, k))
    out[0] = rng.normal(0.0, scale, size=k)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + eps[t]
    return out


def synthesize_dataset(config: SynthConfig, plan: StagePlan) -> tuple[list[FlowRecord], SynthTruth]:
    """Sessions of normal and attack flows with a stage-dependent signature.

    Normal traffic is positively autocorrelated noise. Attack stage k alters
    k-1 disjoint feature groups: the first attack stage by a large level
    shift, the middle ones by a moderate shift that needs averaging across a
    window, the last one by sign-alternating dynamics with only a small
    level shift, which only a model reading temporal order separates well.
    The first attack stage also nudges every signal feature upward, so each
    of them leans toward "attack" from the start of training.
    The trailing ``n_decoys`` features carry label-dependent signs with
    random flips, so they correlate negatively with the label.
    """
    c = config
    if c.n_features < 8 or c.n_per_stage < c.session_length or c.n_decoys < 0 \
            or c.noise < 0 or c.session_length < 2 or not 0.0 <= c.decoy_flip < 0.5:
        raise InvalidConfig(f"invalid synthetic config: {c}")
    n_attack_stages = plan.n_stages - 1
    n_signal = c.n_features - c.n_decoys
    n_groups = max(1, sum(range(1, n_attack_stages + 1)))
    if n_signal < n_groups:
        raise InvalidConfig("not enough non-decoy features for the stage groups")
    groups = [list(map(int, g)) for g in np.array_split(np.arange(n_signal), n_groups)]
    stage_groups: dict[int, list[int]] = {}
    stage_modes: dict[int, str] = {}
    g = 0
    for s in plan.stages[1:]:
        k = s.index - 1
        stage_groups[s.index] = [f for grp in groups[g:g + k] for f in grp]
        g += k
        if s.index == 2:
            stage_modes[s.index] = "level"
        elif s.index == plan.n_stages:
            stage_modes[s.index] = "oscillation"
        else:
            stage_modes[s.index] = "drift"

    rng = np.random.default_rng(c.seed)
    L = c.session_length
    decoys = list(range(n_signal, c.n_features))
    signal = list(range(n_signal))
    names = [f"f{j:02d}" for j in range(n_signal)] + [f"decoy{j}" for j in range(len(decoys))]

    sessions: list[tuple[str, int]] = []
    for s in plan.stages:
        n_sess = c.n_per_stage // L
        if s.index == 1:
            sessions += [("normal", 1)] * n_sess
        else:
            pats = s.patterns
            sessions += [(pats[i % len(pats)], s.index) for i in range(n_sess)]
    order = rng.permutation(len(sessions))

    records: list[FlowRecord] = []
    for si in order:
        tag, stage = sessions[si]
        label = 0 if stage == 1 else 1
        x = _ar1(rng, L, c.n_features, 0.5, c.noise)
        if stage > 1:
            cols = stage_groups[stage]
            mode = stage_modes[stage]
            if mode == "level":
                x[:, signal] += BROAD_SHIFT
                x[:, cols] += 2.5 - BROAD_SHIFT
            elif mode == "drift":
                x[:, cols] += 0.9
            else:
                x[:, cols] = _ar1(rng, L, len(cols), -0.85, c.noise) + OSCILLATION_SHIFT
        if decoys:
            # one sign per session and decoy: attacks lean negative, flipped at random
            lean = np.where(rng.random(len(decoys)) < c.decoy_flip, 1.0, -1.0)
            if not label:
                lean = -lean
            mag = np.abs(rng.normal(0.0, 1.0, size=(L, len(decoys)))) * max(c.noise, 1e-3) + 0.2
            x[:, decoys] = lean * mag
        for t in range(L):
            records.append(FlowRecord(x[t].copy(), label, tag))
    truth = SynthTruth(names, decoys, groups, stage_groups, stage_modes)
    return records, truth


def records_to_matrix(records: Sequence[FlowRecord], feature_names: list[str]) -> FeatureMatrix:
    X = np.array([r.features for r in records], dtype=np.float64).reshape(len(records), len(feature_names))
    return FeatureMatrix(X, np.array([r.label for r in records]), list(feature_names),
                         [r.stage_tag for r in records])


def write_csv(path: str | os.PathLike, m: FeatureMatrix, label_column: str = "Attack_type") -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(m.feature_names) + [label_column])
        tags = m.tags if m.tags is not None else [str(v) for v in m.y]
        for row, tag in zip(m.X, tags):
            w.writerow([repr(float(v)) for v in row] + [tag])
