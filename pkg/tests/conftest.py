import numpy as np
import pytest

from opensetmia.dataset import generate_synthetic_population, make_splits
from opensetmia.model import ClassifierSpec, TrainConfig, train_classifier

ACCEPTANCE_LINES: list[str] = []


class LinearModel:
    """Label-only black box ``argmax(X @ W + b)`` for boundary oracles."""

    def __init__(self, W, b):
        self.W = np.atleast_2d(np.asarray(W, dtype=np.float64))
        self.b = np.asarray(b, dtype=np.float64)
        self.n_classes = self.W.shape[1]
        self.feature_dim = self.W.shape[0]

    def predict_proba(self, X):
        z = np.atleast_2d(X) @ self.W + self.b
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict_labels(self, X):
        return np.argmax(np.atleast_2d(X) @ self.W + self.b, axis=1)


@pytest.fixture(scope="session")
def small_pop():
    return generate_synthetic_population(12, 12, 8, 0.15, seed=5)


@pytest.fixture(scope="session")
def small_splits(small_pop):
    return make_splits(small_pop, 4, seed=5)


@pytest.fixture(scope="session")
def small_target(small_splits):
    spec = ClassifierSpec.mlp(8, len(small_splits.target_train.identities), hidden=(32,))
    cfg = TrainConfig.from_preset("overfitting", seed=5).with_epochs(60)
    return train_classifier(small_splits.target_train, small_splits.target_val, spec, cfg)


@pytest.fixture
def record_acceptance():
    def record(number, passed, detail):
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
