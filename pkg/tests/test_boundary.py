import math

import numpy as np
import pytest
from conftest import LinearModel

from opensetmia._util import ContractError
from opensetmia.boundary import BoundarySearchConfig, boundary_distances, estimate_boundary_distance
from opensetmia.dataset import Dataset

WIDE = BoundarySearchConfig(domain=(-1.0, 1.0))


def _f1_model():
    # class 1 iff f1 > 0: boundary hyperplane f1 = 0
    return LinearModel([[-1.0, 1.0], [0.0, 0.0]], [0.0, 0.0])


def test_linear_oracle_example():
    d = estimate_boundary_distance(_f1_model(), [0.3, 0.0], WIDE)
    assert d == pytest.approx(0.3, rel=0.05)


def test_already_misclassified_is_zero():
    assert estimate_boundary_distance(_f1_model(), [0.3, 0.0], WIDE, label=0) == 0.0


def test_tolerance_convergence_is_monotone():
    errs = []
    for tol in (1e-1, 1e-2, 1e-3, 1e-4):
        cfg = BoundarySearchConfig(domain=(-1.0, 1.0), bin_search_tol=tol)
        errs.append(estimate_boundary_distance(_f1_model(), [0.3, 0.0], cfg, sample_id="p") - 0.3)
    assert all(e >= 0 for e in errs)
    assert all(a >= b for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-3


def test_no_start_found_returns_inf():
    class Constant:
        feature_dim = 2

        def predict_labels(self, X):
            return np.zeros(len(np.atleast_2d(X)), dtype=int)

    cfg = BoundarySearchConfig(init_trials=2, blend_steps=3)
    assert estimate_boundary_distance(Constant(), [0.5, 0.5], cfg) == math.inf


def test_non_finite_features_rejected():
    with pytest.raises(ContractError):
        estimate_boundary_distance(_f1_model(), [np.nan, 0.0], WIDE)


@pytest.mark.parametrize(
    "kw", [dict(init_trials=0), dict(step_decay=1.0), dict(bin_search_tol=0.0), dict(domain=(1.0, 0.0))]
)
def test_config_validation(kw):
    with pytest.raises(ContractError):
        BoundarySearchConfig(**kw)


def test_config_json_roundtrip():
    cfg = BoundarySearchConfig(seed=4, domain=(-2, 3))
    assert BoundarySearchConfig.from_json(cfg.to_json()) == cfg


def test_per_sample_seeding_matches_serial():
    rng = np.random.default_rng(0)
    X = rng.uniform(0.1, 0.9, size=(6, 2))
    model = LinearModel([[1.0, -1.0], [-1.0, 1.0]], [0.0, 0.0])
    d = Dataset([f"s{i}" for i in range(6)], [0] * 6, X)
    batch = boundary_distances(model, d, BoundarySearchConfig(max_iters=5))
    single = [estimate_boundary_distance(model, x, BoundarySearchConfig(max_iters=5), sample_id=f"s{i}")
              for i, x in enumerate(X)]
    reversed_order = boundary_distances(model, d.take(np.arange(5, -1, -1)), BoundarySearchConfig(max_iters=5))
    assert np.array_equal(batch, single)
    assert np.array_equal(batch, reversed_order[::-1])


def test_members_are_farther_from_boundary(small_splits, small_target):
    cfg = BoundarySearchConfig(max_iters=10, grad_queries=50)
    members = boundary_distances(small_target, small_splits.target_train, cfg)
    nonmembers = boundary_distances(small_target, small_splits.eval_nonmember, cfg)
    assert members.mean() > nonmembers.mean()
