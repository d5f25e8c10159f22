import math
import os

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from curricuids.data_pipeline import (
    FeatureMatrix, FlowRecord, RawTable, SplitSpec, StagePlan, SynthConfig, build_stage_plan,
    clean_table, fit_preprocessor, load_stage_plan, load_table, records_to_matrix,
    stratified_split, stratified_split_indices, synthesize_dataset, table_to_matrix, transform,
    window_count, windowize, windowize_runs,
)
from curricuids.errors import (
    AllRowsRemoved, DimensionMismatch, EmptyTrainSet, InvalidConfig, MissingFile,
    MissingLabelColumn, RaggedRow, SingleClassInput, UnknownDatasetKind,
)


def write(tmp_path, text, name="t.csv"):
    p = os.path.join(tmp_path, name)
    with open(p, "w", encoding="utf-8") as fh:
        fh.write(text)
    return p


# ----------------------------------------------------------------------- loading

def test_load_three_rows(tmp_path):
    p = write(tmp_path, "a,b,Attack_type\n1,2,Normal\n3,,DDoS\n5,6,XSS\n")
    t = load_table(p, "Attack_type")
    assert len(t.rows) == 3
    assert t.rows[1][1] is None
    assert t.column("Attack_type") == ["Normal", "DDoS", "XSS"]


def test_load_errors(tmp_path):
    with pytest.raises(MissingLabelColumn):
        load_table(write(tmp_path, "a,b\n1,2\n"), "Attack_type")
    with pytest.raises(RaggedRow):
        load_table(write(tmp_path, "a,b,c,d,e,Attack_type\n1,2,3,4,Normal\n"), "Attack_type")
    with pytest.raises(MissingFile):
        load_table(os.path.join(tmp_path, "nope.csv"), "Attack_type")


def test_raw_table_invariants():
    with pytest.raises(RaggedRow):
        RawTable(["a", "y"], [[1.0]], "y")
    with pytest.raises(MissingLabelColumn):
        RawTable(["a"], [], "y")


# ---------------------------------------------------------------------- cleaning

def test_missing_numeric_becomes_zero():
    t = clean_table(RawTable(["a", "b", "y"], [[1.0, None, "n"], [2.0, 3.0, "n"]], "y"))
    assert t.rows[0][1] == 0.0


def test_duplicates_removed():
    t = clean_table(RawTable(["a", "y"], [[1.0, "n"], [1.0, "n"], [2.0, "n"]], "y"))
    assert len(t.rows) == 2


def test_outlier_example_population_z():
    # mean 200, population sd 400, so z(1000) = 2.0 exactly
    rows = [[v, float(i), "n"] for i, v in enumerate([0.0, 0.0, 0.0, 0.0, 1000.0])]
    t = RawTable(["x", "id", "y"], rows, "y")
    vals = np.array([0, 0, 0, 0, 1000.0])
    z = abs(1000 - vals.mean()) / vals.std()
    assert z == 2.0
    assert len(clean_table(t, outlier_z=4.0).rows) == 5
    kept = clean_table(t, outlier_z=1.9).rows
    assert len(kept) == 4 and all(r[0] == 0.0 for r in kept)


def test_categorical_encoding_frozen():
    train = clean_table(RawTable(["proto", "y"], [["tcp", "n"], ["udp", "a"], ["tcp", "a"]], "y"))
    assert train.encoders["proto"] == {"tcp": 0, "udp": 1}
    assert [r[0] for r in train.rows] == [0.0, 1.0, 0.0]
    test = clean_table(RawTable(["proto", "y"], [["icmp", "n"], ["udp", "n"]], "y"),
                       encoders=train.encoders)
    assert [r[0] for r in test.rows] == [-1.0, 1.0]


def test_all_rows_removed():
    with pytest.raises(AllRowsRemoved):
        clean_table(RawTable(["a", "y"], [], "y"))


cell = st.one_of(st.none(), st.floats(-50, 50, allow_nan=False),
                 st.sampled_from(["tcp", "udp", "http"]))


@st.composite
def raw_tables(draw):
    n_cols = draw(st.integers(1, 4))
    kinds = draw(st.lists(st.sampled_from(["num", "cat"]), min_size=n_cols, max_size=n_cols))
    rows = []
    for _ in range(draw(st.integers(1, 25))):
        row = []
        for k in kinds:
            if k == "num":
                row.append(draw(st.one_of(st.none(), st.floats(-50, 50, allow_nan=False).map(round))))
            else:
                row.append(draw(st.sampled_from([None, "tcp", "udp", "http"])))
        row.append(draw(st.sampled_from(["Normal", "DDoS", "XSS"])))
        rows.append([float(c) if isinstance(c, int) else c for c in row])
    return RawTable([f"c{j}" for j in range(n_cols)] + ["y"], rows, "y")


@given(raw_tables(), st.floats(0.5, 5.0))
def test_clean_idempotent(t, z):
    try:
        once = clean_table(t, outlier_z=z)
    except AllRowsRemoved:
        # a tight z can trim to nothing; idempotence concerns surviving tables
        assume(False)
    twice = clean_table(once, outlier_z=z)
    assert twice.rows == once.rows
    assert twice.encoders == once.encoders


def test_table_to_matrix_labels():
    t = clean_table(RawTable(["a", "y"], [[1.0, "Normal"], [2.0, "DDoS"], [3.0, "BENIGN"]], "y"))
    m = table_to_matrix(t)
    assert m.y.tolist() == [0, 1, 0]
    assert m.feature_names == ["a"]


def test_feature_matrix_invariants():
    with pytest.raises(DimensionMismatch):
        FeatureMatrix(np.zeros((3, 2)), np.zeros(2), ["a", "b"])
    with pytest.raises(DimensionMismatch):
        FeatureMatrix(np.zeros((3, 2)), np.zeros(3), ["a"])


# ------------------------------------------------------------------ preprocessing

def fm(X, y=None):
    X = np.asarray(X, dtype=float)
    y = np.arange(len(X)) % 2 if y is None else y
    return FeatureMatrix(X, y, [f"f{j}" for j in range(X.shape[1])])


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_transform_standardizes_fit_data(seed, F):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, F)) * rng.uniform(0.1, 20, size=F) + rng.normal(size=F) * 5
    p = fit_preprocessor(fm(X), reducer="none")
    Z = transform(p, fm(X)).X
    assert np.abs(Z.mean(axis=0)).max() < 1e-6
    assert np.abs(Z.std(axis=0) - 1).max() < 1e-6


@given(st.integers(0, 10_000), st.floats(0.5, 1.0))
def test_projection_orthonormal(seed, var):
    X = np.random.default_rng(seed).normal(size=(30, 5)) @ np.random.default_rng(seed + 1).normal(size=(5, 5))
    p = fit_preprocessor(fm(X), var)
    P = p.projection
    assert np.allclose(P.T @ P, np.eye(P.shape[1]), atol=1e-6)


def test_identical_columns_one_component():
    x = np.random.default_rng(0).normal(size=20)
    p = fit_preprocessor(fm(np.column_stack([x, x])), 0.95)
    assert p.n_outputs == 1


def test_full_variance_keeps_every_component():
    X = np.random.default_rng(1).normal(size=(50, 4))
    assert fit_preprocessor(fm(X), 1.0).n_outputs == 4


def unit_diagonal_with_spectrum(lam):
    """Correlation matrix with the given eigenvalues (sum 3) built by two Givens rotations."""
    a, b, c = lam
    R = np.diag([a, b, c])

    def rotate(M, i, j):
        # choose theta so the rotated (i, i) entry becomes 1
        di, dj = M[i, i], M[j, j]
        cos2 = (1 - dj) / (di - dj)
        co, si = math.sqrt(cos2), math.sqrt(1 - cos2)
        G = np.eye(3)
        G[i, i] = G[j, j] = co
        G[i, j], G[j, i] = -si, si
        return G.T @ M @ G
    R = rotate(R, 0, 2)  # diag -> (1, b, a + c - 1)
    R = rotate(R, 2, 1)  # diag -> (1, 1, 1)
    return R


def test_known_spectrum_two_components():
    lam = np.array([4.0, 1.0, 0.01]) * 3 / 5.01
    R = unit_diagonal_with_spectrum(lam)
    assert np.allclose(np.diag(R), 1.0, atol=1e-12)
    assert np.allclose(np.sort(np.linalg.eigvals(R).real)[::-1], lam, atol=1e-12)
    # data whose population covariance is exactly R
    Z = np.random.default_rng(2).normal(size=(200, 3))
    Z -= Z.mean(axis=0)
    C = Z.T @ Z / len(Z)
    w, V = np.linalg.eigh(C)
    Z = Z @ V @ np.diag(w ** -0.5) @ V.T
    w, V = np.linalg.eigh(R)
    X = Z @ V @ np.diag(np.sqrt(w)) @ V.T
    p = fit_preprocessor(fm(X), 0.9)
    assert p.n_outputs == 2
    # 4/5.01 < 0.9 <= 5/5.01
    assert np.allclose(p.explained_variance_ratio, [4 / 5.01, 1 / 5.01], atol=1e-9)


def test_transform_hand_case():
    X = np.array([[1.0, 2.0], [3.0, 6.0], [5.0, 4.0]])
    p = fit_preprocessor(fm(X), 1.0)
    x = np.array([[2.0, 3.0]])
    mu = np.array([3.0, 4.0])
    sd = np.array([math.sqrt(8 / 3), math.sqrt(8 / 3)])
    expect = (x - mu) / sd @ p.projection
    assert np.allclose(transform(p, fm(x, np.array([0]))).X, expect, atol=1e-9)
    ident = fit_preprocessor(fm(X), reducer="none")
    assert np.allclose(transform(ident, fm(mu[None], np.array([0]))).X, 0.0)


def test_preprocessor_errors():
    with pytest.raises(EmptyTrainSet):
        fit_preprocessor(fm(np.zeros((0, 2)), np.zeros(0, dtype=int)))
    with pytest.raises(InvalidConfig):
        fit_preprocessor(fm(np.ones((3, 2))), 0.0)
    p = fit_preprocessor(fm(np.random.default_rng(0).normal(size=(5, 2))))
    with pytest.raises(DimensionMismatch):
        transform(p, fm(np.zeros((2, 3))))


# ----------------------------------------------------------------------- splits

def test_split_balanced_exact():
    y = np.array([0] * 50 + [1] * 50)
    m = fm(np.arange(100.0)[:, None], y)
    tr, va, te = stratified_split(m, SplitSpec(seed=3))
    assert np.bincount(te.y).tolist() == [10, 10]
    again = stratified_split(m, SplitSpec(seed=3))
    assert np.array_equal(tr.X, again[0].X) and np.array_equal(te.X, again[2].X)


def test_split_unbalanced_counts():
    y = np.array([0] * 60 + [1] * 37)
    tr, va, te = stratified_split_indices(y, SplitSpec(seed=0))
    # test round(0.2 * n_c); validation round(0.1 * rest)
    assert np.bincount(y[te]).tolist() == [12, 7]
    assert np.bincount(y[va]).tolist() == [5, 3]
    assert np.bincount(y[tr]).tolist() == [43, 27]
    for c, n in ((0, 60), (1, 37)):
        assert abs(np.sum(y[tr] == c) + np.sum(y[va] == c) - 0.8 * n) <= 1


@given(st.integers(2, 120), st.integers(1, 119), st.integers(0, 10_000),
       st.sampled_from([0.7, 0.8, 0.9]), st.floats(0.0, 0.3))
def test_split_partition(n, k, seed, frac, vfrac):
    k = min(k, n - 1)
    y = np.array([1] * k + [0] * (n - k))
    spec = SplitSpec(frac, round(1 - frac, 10), vfrac, seed)
    parts = stratified_split_indices(y, spec)
    allidx = np.concatenate(parts)
    assert len(allidx) == n and len(np.unique(allidx)) == n
    for c in (0, 1):
        nc = int(np.sum(y == c))
        assert abs(np.sum(y[parts[2]] == c) - spec.test_fraction * nc) <= 1


def test_split_single_class():
    with pytest.raises(SingleClassInput):
        stratified_split_indices(np.zeros(10), SplitSpec())


# ---------------------------------------------------------------------- windows

RECS = [FlowRecord(np.array([float(i), -float(i)]), i % 2, f"t{i}") for i in range(50)]


def test_window_examples():
    assert len(windowize(RECS[:10], 10, 1)) == 1
    assert len(windowize(RECS[:12], 10, 1)) == 3
    b = windowize(RECS[:7], 1)
    assert len(b) == 7
    assert b.labels.tolist() == [r.label for r in RECS[:7]]


def test_window_count_exhaustive():
    for n in range(1, 51):
        for W in range(1, 51):
            for s in range(1, 51):
                expect = len(range(0, n - W + 1, s))
                b = windowize(RECS[:n], W, s)
                assert len(b) == expect == window_count(n, W, s), (n, W, s)


@given(st.integers(1, 50), st.integers(1, 20), st.integers(1, 10))
def test_window_label_is_last_record(n, W, s):
    b = windowize(RECS[:n], W, s)
    for i in range(len(b)):
        last = i * s + W - 1
        assert b.labels[i] == RECS[last].label and b.tags[i] == RECS[last].stage_tag
        assert np.array_equal(b.windows[i, -1], RECS[last].features)


def test_window_runs_never_mix_tags():
    X = np.arange(24.0).reshape(12, 2)
    tags = ["normal"] * 5 + ["DoS"] * 7
    m = FeatureMatrix(X, [0] * 5 + [1] * 7, ["a", "b"], tags)
    b = windowize_runs(m, 3)
    assert len(b) == 3 + 5
    for w, t in zip(b.windows, b.tags):
        rows = (w[:, 0] / 2).astype(int)
        assert {tags[r] for r in rows} == {t}


def test_window_invalid():
    with pytest.raises(InvalidConfig):
        windowize(RECS, 0)


# ------------------------------------------------------------------ stage plans

def test_stage_plan_examples():
    edge = build_stage_plan("edge-iiot")
    assert "Port Scanning" in edge.stages[1].patterns
    assert edge.n_stages == 4
    iov = build_stage_plan("cic-iov-2024")
    assert iov.stages[1].patterns == ["GAS", "RPM", "SPEED", "STEERING_WHEEL"]
    assert build_stage_plan("cic-apt-iiot-2024").n_stages == 2
    with pytest.raises(UnknownDatasetKind):
        build_stage_plan("kdd99")


EDGE_TAGS = ["Normal", "OS_Fingerprinting", "Port_Scanning", "Vulnerability_scanner", "XSS",
             "SQL_injection", "Password", "Uploading", "Backdoor", "DDoS_UDP", "DDoS_ICMP",
             "DDoS_TCP", "DDoS_HTTP", "MITM", "Ransomware"]


def test_every_tag_matches_at_most_one_stage():
    plan = build_stage_plan("edge-iiot")
    for tag in EDGE_TAGS:
        assert len(plan.matches(tag.replace("_", " "))) <= 1


def test_unmatched_reported(caplog):
    plan = build_stage_plan("cic-iov-2024")
    stages, unmatched = plan.assign(["BENIGN", "DoS", "fuzzing", "RPM", "fuzzing"])
    assert stages.tolist() == [1, 3, 0, 2, 0]
    assert unmatched == ["fuzzing"]
    assert "fuzzing" in caplog.text


def test_ambiguous_tag_rejected():
    plan = StagePlan.from_dict({"1": ["normal"], "2": ["scan"], "3": ["port"]})
    with pytest.raises(InvalidConfig):
        plan.stage_of("port scan")


def test_plan_invariants_and_override(tmp_path):
    with pytest.raises(InvalidConfig):
        StagePlan.from_dict({"1": ["normal"], "3": ["x"]})
    with pytest.raises(InvalidConfig):
        StagePlan.from_dict({"1": ["ddos"], "2": ["x"]})
    p = write(tmp_path, '{"1": ["normal"], "2": ["scan", "probe"]}', "plan.json")
    plan = load_stage_plan(p)
    assert plan.n_stages == 2 and plan.stage_of("Port SCAN") == 2
    assert StagePlan.from_dict(plan.to_dict()).to_dict() == plan.to_dict()


# -------------------------------------------------------------------- synthetic

def test_synth_zero_noise_separable(iov_plan):
    recs, truth = synthesize_dataset(SynthConfig(n_per_stage=200, noise=0.0, seed=1), iov_plan)
    m = records_to_matrix(recs, truth.feature_names)
    g1 = truth.groups[0]
    normal = m.X[np.array(m.tags) == "normal"][:, g1]
    stage2 = np.array([iov_plan.stage_of(t) == 2 for t in m.tags])
    assert np.all(normal == 0.0)
    assert np.all(m.X[stage2][:, g1] == 2.5)


def test_synth_deterministic(iov_plan):
    a, _ = synthesize_dataset(SynthConfig(n_per_stage=120, seed=9), iov_plan)
    b, _ = synthesize_dataset(SynthConfig(n_per_stage=120, seed=9), iov_plan)
    assert all(x.features.tobytes() == y.features.tobytes() and x.stage_tag == y.stage_tag
               for x, y in zip(a, b))
    assert len(a) == len(b) == 3 * 120


def test_synth_truth_layout(iov_plan):
    _, truth = synthesize_dataset(SynthConfig(n_per_stage=80, seed=0), iov_plan)
    assert truth.decoy_features == [14, 15]
    assert len(truth.stage_groups[2]) < len(truth.stage_groups[3])
    assert not set(truth.stage_groups[2]) & set(truth.stage_groups[3])
    assert truth.stage_modes == {2: "level", 3: "oscillation"}
