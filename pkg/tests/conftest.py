import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from curricuids.data_pipeline import FeatureMatrix, build_stage_plan, is_normal_tag
from curricuids.model import ModelConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(n_features=5, **over):
    """Small dims so full-model gradient checks stay cheap."""
    base = dict(n_features=n_features, window=4, conv_channels=3, encoder_dim=3, gru_layers=1,
                gru_units=3, lstm_layers=1, lstm_units=3, attention_dim=4, seed=0)
    base.update(over)
    return ModelConfig(**base)


def tagged_matrix(blocks, rng, n_features=4, shift=3.0):
    """Rows in runs of one tag each; attack rows are shifted on feature 0."""
    X, y, tags = [], [], []
    for tag, n in blocks:
        label = 0 if is_normal_tag(tag) else 1
        x = rng.normal(size=(n, n_features))
        if label:
            x[:, 0] += shift
        X.append(x)
        y += [label] * n
        tags += [tag] * n
    return FeatureMatrix(np.vstack(X), np.array(y), [f"c{j}" for j in range(n_features)], tags)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def iov_plan():
    return build_stage_plan("cic-iov-2024")


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and return the outcome."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])

    def emit(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        lines.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
