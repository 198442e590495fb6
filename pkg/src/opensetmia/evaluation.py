"""Scoring of membership decisions and the loss-distribution diagnostics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from ._util import ContractError
from .dataset import ExperimentSplits


@dataclass(frozen=True)
class AttackMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    fpr: float
    tpr: float
    tp: int
    fp: int
    tn: int
    fn: int
    auc: float | None = None

    def to_json(self):
        return asdict(self)


def _ratio(num, den) -> Fraction:
    # 0/0 is reported as 0
    return Fraction(num, den) if den else Fraction(0)


def evaluate_decisions(decisions, truth, auc=None) -> AttackMetrics:
    """Confusion-matrix metrics with members as the positive class.

    Counts are combined in exact rational arithmetic and converted to float
    only at the end, so the defining identities hold exactly.
    """
    d = np.asarray(decisions).astype(bool)
    t = np.asarray(truth).astype(bool)
    if d.size == 0:
        raise ContractError("no decisions to evaluate")
    if d.shape != t.shape:
        raise ContractError("decisions and truth differ in length")
    tp = int(np.sum(d & t))
    fp = int(np.sum(d & ~t))
    tn = int(np.sum(~d & ~t))
    fn = int(np.sum(~d & t))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return AttackMetrics(
        accuracy=float(Fraction(tp + tn, tp + fp + tn + fn)),
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
        fpr=float(_ratio(fp, fp + tn)),
        tpr=float(recall),
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        auc=auc,
    )


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float

    def rows(self):
        return [(float(a), float(b), float(c)) for a, b, c in zip(self.thresholds, self.tpr, self.fpr)]


def roc_sweep(scores, truth, higher_is_member=True) -> RocCurve:
    """TPR/FPR at every distinct score plus the two infinite sentinels.

    With ``higher_is_member`` a sample is called a member when
    ``score >= tau``; otherwise when ``score <= tau``. AUC is the trapezoid
    area under the (fpr, tpr) polyline.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth).astype(bool)
    if t.all() or not t.any():
        raise ContractError("ROC needs both members and non-members")
    if not higher_is_member:
        s = -s
    pos, neg = np.sort(s[t]), np.sort(s[~t])
    distinct = np.unique(s)[::-1]
    # leading sentinel sits above every score (nothing admitted), trailing one below (everything)
    taus = np.concatenate([[np.inf], distinct, [-np.inf]])
    tpr = np.concatenate([[0.0], (pos.size - np.searchsorted(pos, distinct, side="left")) / pos.size, [1.0]])
    fpr = np.concatenate([[0.0], (neg.size - np.searchsorted(neg, distinct, side="left")) / neg.size, [1.0]])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    thresholds = taus if higher_is_member else -taus
    return RocCurve(thresholds, tpr, fpr, auc)


@dataclass(frozen=True)
class ScoreDistribution:
    bin_edges: np.ndarray
    probabilities: np.ndarray
    epsilon: float
    counts: np.ndarray = field(default=None, repr=False)


def score_histogram(values, n_bins=30, value_range=None, epsilon=1e-9) -> ScoreDistribution:
    """Uniform-width histogram normalized to a distribution with no empty bin.

    ``epsilon`` is added to every bin's probability before renormalizing so
    KL divergences stay finite. Pass the joint range of the cohorts being
    compared (see :func:`joint_range`) to make their bins line up.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ContractError("cannot histogram an empty sample")
    if n_bins < 2:
        raise ContractError("n_bins must be >= 2")
    if not epsilon > 0:
        raise ContractError("epsilon must be > 0")
    v = v[np.isfinite(v)]
    lo, hi = value_range if value_range is not None else joint_range(v)
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(np.clip(v, lo, hi), bins=edges)
    p = counts / max(counts.sum(), 1) + epsilon
    return ScoreDistribution(edges, p / p.sum(), epsilon, counts)


def joint_range(*cohorts):
    vals = np.concatenate([np.asarray(c, dtype=np.float64).ravel() for c in cohorts])
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return (0.0, 1.0)
    lo, hi = float(vals.min()), float(vals.max())
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


def kl_divergence(P: ScoreDistribution, Q: ScoreDistribution) -> float:
    """sum P log(P/Q) in nats; zero-probability terms of P contribute nothing."""
    if P.bin_edges.shape != Q.bin_edges.shape or not np.array_equal(P.bin_edges, Q.bin_edges):
        raise ContractError("distributions must share bin edges")
    p, q = P.probabilities, Q.probabilities
    if np.any(q <= 0):
        raise ContractError("Q must be strictly positive")
    mask = p > 0
    return float(max(np.sum(p[mask] * np.log(p[mask] / q[mask])), 0.0))


@dataclass(frozen=True)
class EpochPoint:
    epoch: int
    overfit: float
    kl: float
    attack_acc: float


def member_nonmember_losses(inputs, use_predicted=True):
    """Cross-entropy of evaluation members and non-members.

    Non-members have no class in the target, so by default every sample is
    scored against its predicted class and the two cohorts stay comparable.
    With ``use_predicted=False`` members use their true class instead.
    """
    from .model import cross_entropies

    labels = inputs.predicted_labels if use_predicted else np.where(
        inputs.true_labels >= 0, inputs.true_labels, inputs.predicted_labels
    )
    ce = cross_entropies(inputs.confidences, labels)
    y = inputs.require_membership()
    return ce[y == 1], ce[y == 0]


def loss_kl(inputs, n_bins=30, epsilon=1e-9, use_predicted=True) -> float:
    """KL(member CE distribution || non-member CE distribution) on shared bins."""
    mem, non = member_nonmember_losses(inputs, use_predicted)
    rng = joint_range(mem, non)
    return kl_divergence(score_histogram(mem, n_bins, rng, epsilon), score_histogram(non, n_bins, rng, epsilon))


def epoch_study(
    splits: ExperimentSplits,
    spec,
    config,
    checkpoints,
    strategy="yeom",
    *,
    search=None,
    n_bins=30,
    epsilon=1e-9,
) -> list[EpochPoint]:
    """Train once and, at each checkpoint epoch, measure the overfitting
    level, the member/non-member cross-entropy KL on the evaluation set and
    the accuracy of an attack calibrated on the attack set."""
    from .attacks import attack_inputs, fit_attack
    from .boundary import BoundarySearchConfig
    from .model import overfitting_level, train_classifier

    checkpoints = sorted({int(c) for c in checkpoints})
    if not checkpoints:
        raise ContractError("no checkpoints requested")
    if checkpoints[0] < 0 or checkpoints[-1] > config.epochs:
        raise ContractError(f"checkpoints must lie in [0, {config.epochs}]")
    snapshots = {}

    def keep(epoch, model):
        if epoch in checkpoints:
            snapshots[epoch] = model.copy()

    train_classifier(splits.target_train, splits.target_val, spec, config, on_epoch=keep)
    if strategy == "label-only" and search is None:
        search = BoundarySearchConfig(seed=config.seed)
    out = []
    for epoch in checkpoints:
        model = snapshots[epoch]
        s = search if strategy == "label-only" else None
        atk = attack_inputs(model, splits.attack_member, 1, s).concat(attack_inputs(model, splits.attack_nonmember, 0, s))
        ev = attack_inputs(model, splits.eval_member, 1, s).concat(attack_inputs(model, splits.eval_nonmember, 0, s))
        attack = fit_attack(strategy, atk, search=search)
        acc = evaluate_decisions(attack.decide(ev), ev.membership).accuracy
        out.append(
            EpochPoint(
                epoch,
                overfitting_level(model, splits.target_train, splits.target_test),
                loss_kl(ev, n_bins, epsilon),
                acc,
            )
        )
    return out
