"""Black-box membership inference strategies.

* metric (Yeom et al.): member iff the cross-entropy loss is <= tau
* neural network (Salem et al.): a 64/32/2 perceptron on sorted confidences
* label-only (Choquette-Choo et al.): member iff the boundary distance >= tau_d

Every attack scores an :class:`AttackInputs` batch and returns boolean
member decisions, so ensembles and evaluation treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._util import ContractError
from .boundary import BoundarySearchConfig, boundary_distances
from .dataset import Dataset
from .model import (
    ClassifierSpec,
    TrainConfig,
    TrainedClassifier,
    checkpoint_from_dict,
    checkpoint_to_dict,
    cross_entropies,
    fit_arrays,
)
from .records import PredictionRecord, record_arrays, records_from_arrays

METHODS = ("yeom", "salem", "label-only")
SALEM_HIDDEN = (64, 32)


@dataclass
class AttackInputs:
    """Columnar view of prediction records, plus optional boundary distances."""

    sample_ids: tuple[str, ...]
    confidences: np.ndarray
    true_labels: np.ndarray
    predicted_labels: np.ndarray
    membership: np.ndarray | None = None
    distances: np.ndarray | None = None

    def __len__(self):
        return len(self.sample_ids)

    @classmethod
    def from_records(cls, records: Sequence[PredictionRecord], distances=None):
        conf, true, pred, memb = record_arrays(records)
        membership = None if np.any(memb < 0) else memb
        if distances is not None:
            distances = np.asarray(distances, dtype=np.float64)
        return cls(tuple(r.sample_id for r in records), conf, true, pred, membership, distances)

    def records(self) -> list[PredictionRecord]:
        memb = self.membership if self.membership is not None else [None] * len(self)
        return [
            PredictionRecord(sid, tuple(c.tolist()), int(t), int(p), None if m is None else int(m))
            for sid, c, t, p, m in zip(self.sample_ids, self.confidences, self.true_labels, self.predicted_labels, memb)
        ]

    def take(self, idx) -> "AttackInputs":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return AttackInputs(
            tuple(self.sample_ids[i] for i in idx),
            self.confidences[idx],
            self.true_labels[idx],
            self.predicted_labels[idx],
            None if self.membership is None else self.membership[idx],
            None if self.distances is None else self.distances[idx],
        )

    def concat(self, other: "AttackInputs") -> "AttackInputs":
        def cat(a, b):
            return None if a is None or b is None else np.concatenate([a, b])

        return AttackInputs(
            self.sample_ids + other.sample_ids,
            np.vstack([self.confidences, other.confidences]),
            np.concatenate([self.true_labels, other.true_labels]),
            np.concatenate([self.predicted_labels, other.predicted_labels]),
            cat(self.membership, other.membership),
            cat(self.distances, other.distances),
        )

    def require_membership(self) -> np.ndarray:
        if self.membership is None:
            raise ContractError("records with unknown membership cannot be used here")
        return self.membership


def query_records(target, dataset: Dataset, membership=None) -> list[PredictionRecord]:
    """Query the target on every sample of ``dataset``."""
    if dataset.feature_dim != target.feature_dim:
        raise ContractError(f"target expects {target.feature_dim} features, dataset has {dataset.feature_dim}")
    probs = target.predict_proba(dataset.features)
    true = [target.class_index(c) for c in dataset.individual_ids]
    if membership is not None and not isinstance(membership, (list, tuple, np.ndarray)):
        membership = [membership] * len(dataset)
    return records_from_arrays(dataset.sample_ids, probs, true, membership)


def build_attack_training_set(target, members: Dataset, nonmembers: Dataset) -> list[PredictionRecord]:
    """Members labelled 1, non-members labelled 0, both as target outputs."""
    if len(members) == 0 or len(nonmembers) == 0:
        raise ContractError("attack training set needs both members and non-members")
    if len(members) != len(nonmembers):
        raise ContractError(f"unbalanced attack set: {len(members)} members vs {len(nonmembers)} non-members")
    return query_records(target, members, 1) + query_records(target, nonmembers, 0)


def attack_inputs(target, dataset: Dataset, membership=None, search: BoundarySearchConfig | None = None):
    """Records for ``dataset`` plus boundary distances when ``search`` is given."""
    inputs = AttackInputs.from_records(query_records(target, dataset, membership))
    if search is not None:
        inputs.distances = boundary_distances(target, dataset, search)
    return inputs


# --- threshold calibration -------------------------------------------------


@dataclass
class Calibration:
    threshold: float
    objective: float
    sweep: list[dict] = field(default_factory=list)


def calibrate_threshold(
    scores,
    truth,
    grid,
    objective="accuracy",
    higher_is_member=False,
    target_tpr=0.5,
) -> Calibration:
    """Pick the grid threshold that maximizes ``objective`` on labelled scores.

    ``objective="accuracy"`` maximizes membership accuracy; ``"fpr_at_tpr"``
    minimizes FPR among thresholds reaching ``target_tpr``. Ties go to the
    smallest threshold. Decisions are inclusive: ``score <= tau`` is a member
    for loss-like scores, ``score >= tau`` for distance-like ones.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ContractError("threshold grid is empty")
    if truth.all() or not truth.any():
        raise ContractError("calibration scores must contain both members and non-members")
    if objective not in ("accuracy", "fpr_at_tpr"):
        raise ContractError(f"unknown objective {objective!r}")
    pos = np.sort(scores[truth])
    neg = np.sort(scores[~truth])
    P, N = pos.size, neg.size
    if higher_is_member:
        tp = P - np.searchsorted(pos, grid, side="left")
        fp = N - np.searchsorted(neg, grid, side="left")
    else:
        tp = np.searchsorted(pos, grid, side="right")
        fp = np.searchsorted(neg, grid, side="right")
    correct = tp + (N - fp)
    order = np.argsort(grid, kind="stable")
    if objective == "accuracy":
        # lexsort: last key is primary
        best = np.lexsort((grid, -correct))[0]
        value = correct[best] / (P + N)
    else:
        ok = tp >= target_tpr * P
        if not ok.any():
            raise ContractError(f"no threshold reaches TPR {target_tpr}")
        cand = np.flatnonzero(ok)
        best = cand[np.lexsort((grid[cand], fp[cand]))[0]]
        value = fp[best] / N
    sweep = [
        {"tau": float(grid[i]), "accuracy": float(correct[i] / (P + N)), "tpr": float(tp[i] / P), "fpr": float(fp[i] / N)}
        for i in order
    ]
    return Calibration(float(grid[best]), float(value), sweep)


def _grid(scores):
    finite = np.unique(scores[np.isfinite(scores)])
    return finite if finite.size else np.array([np.inf])


# --- metric attack -----------------------------------------------------------


def yeom_losses(inputs: AttackInputs) -> np.ndarray:
    """Cross-entropy against the true class, or the predicted class for unknown identities."""
    labels = np.where(inputs.true_labels >= 0, inputs.true_labels, inputs.predicted_labels)
    return cross_entropies(inputs.confidences, labels)


def yeom_decide(loss, tau) -> bool:
    return bool(loss <= tau)


@dataclass
class MetricAttack:
    threshold: float
    mode: str = "sweep"
    sweep: list[dict] = field(default_factory=list)

    method = "yeom"
    higher_is_member = False

    @classmethod
    def fit(cls, inputs: AttackInputs, mode="sweep", objective="accuracy", reference_losses=None):
        """``sweep`` calibrates on labelled inputs; ``mean-train-loss`` uses the
        average loss of ``reference_losses`` (the target's training members)."""
        losses = yeom_losses(inputs)
        if mode == "mean-train-loss":
            ref = losses[inputs.require_membership() == 1] if reference_losses is None else np.asarray(reference_losses)
            return cls(float(np.mean(ref)), mode)
        if mode != "sweep":
            raise ContractError(f"unknown Yeom mode {mode!r}")
        cal = calibrate_threshold(losses, inputs.require_membership(), _grid(losses), objective)
        return cls(cal.threshold, mode, cal.sweep)

    def scores(self, inputs: AttackInputs) -> np.ndarray:
        return yeom_losses(inputs)

    def decide(self, inputs: AttackInputs) -> np.ndarray:
        return self.scores(inputs) <= self.threshold

    def to_json(self):
        return {"method": self.method, "threshold": self.threshold, "mode": self.mode, "sweep": self.sweep}


# --- neural-network attack ---------------------------------------------------


def salem_features(confidences) -> np.ndarray:
    """Confidence vectors sorted in descending order."""
    return -np.sort(-np.asarray(confidences, dtype=np.float64), axis=1)


def train_salem(records: Sequence[PredictionRecord], config: TrainConfig | None = None) -> "SalemAttack":
    if config is None:
        config = TrainConfig.from_preset("overfitting")
    if any(r.membership is None for r in records):
        raise ContractError("Salem training records need known membership")
    records = sorted(records, key=lambda r: r.sample_id)
    inputs = AttackInputs.from_records(records)
    y = inputs.require_membership()
    if y.sum() * 2 != len(y):
        raise ContractError("Salem training records must be balanced")
    X = salem_features(inputs.confidences)
    spec = ClassifierSpec((X.shape[1], *SALEM_HIDDEN, 2))
    return SalemAttack(fit_arrays(X, y, (0, 1), spec, config))


@dataclass
class SalemAttack:
    net: TrainedClassifier

    method = "salem"
    higher_is_member = True
    threshold = 0.5

    @classmethod
    def fit(cls, inputs: AttackInputs, config: TrainConfig | None = None):
        return train_salem(inputs.records(), config)

    def member_confidence(self, confidences) -> np.ndarray:
        return self.net.predict_proba(salem_features(np.atleast_2d(confidences)))[:, 1]

    def scores(self, inputs: AttackInputs) -> np.ndarray:
        return self.member_confidence(inputs.confidences)

    def decide(self, inputs: AttackInputs) -> np.ndarray:
        return self.scores(inputs) >= self.threshold

    def to_json(self):
        return {"method": self.method, "net": checkpoint_to_dict(self.net)}


def salem_decide(attack: SalemAttack, prediction) -> bool:
    return bool(attack.member_confidence(prediction)[0] >= 0.5)


# --- label-only attack -------------------------------------------------------


def label_only_decide(distance, tau_d) -> bool:
    """Member iff the distance reaches tau_d; the +inf sentinel is always a member."""
    return bool(distance >= tau_d)


@dataclass
class LabelOnlyAttack:
    threshold: float
    search: BoundarySearchConfig = field(default_factory=BoundarySearchConfig)
    sweep: list[dict] = field(default_factory=list)

    method = "label-only"
    higher_is_member = True

    @classmethod
    def fit(cls, inputs: AttackInputs, search: BoundarySearchConfig, objective="accuracy"):
        if inputs.distances is None:
            raise ContractError("label-only calibration needs boundary distances")
        cal = calibrate_threshold(
            inputs.distances, inputs.require_membership(), _grid(inputs.distances), objective, higher_is_member=True
        )
        return cls(cal.threshold, search, cal.sweep)

    def scores(self, inputs: AttackInputs) -> np.ndarray:
        if inputs.distances is None:
            raise ContractError("label-only decisions need boundary distances")
        return inputs.distances

    def decide(self, inputs: AttackInputs) -> np.ndarray:
        return self.scores(inputs) >= self.threshold

    def to_json(self):
        return {"method": self.method, "threshold": self.threshold, "config": self.search.to_json(), "sweep": self.sweep}


def fit_attack(method, inputs: AttackInputs, *, train_config=None, search=None, objective="accuracy", yeom_mode="sweep"):
    if method == "yeom":
        return MetricAttack.fit(inputs, yeom_mode, objective)
    if method == "salem":
        return SalemAttack.fit(inputs, train_config)
    if method == "label-only":
        return LabelOnlyAttack.fit(inputs, search or BoundarySearchConfig(), objective)
    raise ContractError(f"unknown attack method {method!r}; expected one of {METHODS}")


def attack_from_json(doc: dict):
    method = doc.get("method")
    if method == "yeom":
        return MetricAttack(float(doc["threshold"]), doc.get("mode", "sweep"), doc.get("sweep", []))
    if method == "salem":
        return SalemAttack(checkpoint_from_dict(doc["net"]))
    if method == "label-only":
        return LabelOnlyAttack(float(doc["threshold"]), BoundarySearchConfig.from_json(doc["config"]), doc.get("sweep", []))
    raise ContractError(f"unknown attack method {method!r}")
