"""Ensemble membership inference over disjoint subsets of the known identities.

The attack identities are partitioned, one attack model is fitted per subset
on that subset's records only, and the per-model votes are combined with
rule E: member iff at least ``k`` sub-models vote member (``k=1`` is OR).

A sub-model only speaks for its own identities: it votes member only when
the target's predicted class is one of its subset's classes. With a single
subset the scope is every class and the ensemble reduces to the plain attack.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ._util import ContractError, substream
from .attacks import METHODS, AttackInputs, attack_from_json, attack_inputs, fit_attack
from .boundary import BoundarySearchConfig
from .dataset import ExperimentSplits

RULES = ("or", "k-of-l")


@dataclass(frozen=True)
class EnsemblePlan:
    """Identity partition for the ensemble.

    ``subset_assignment`` maps each member identity to its subset and
    ``nonmember_assignment`` does the same for the attack non-member
    identities (each subset's share). In singleton mode ``pairing`` holds
    the (member identity, non-member identity) pair of every sub-model.
    """

    n_subsets: int
    subset_assignment: dict[int, int]
    nonmember_assignment: dict[int, int] = field(default_factory=dict)
    pairing: tuple[tuple[int, int], ...] | None = None
    seed: int = 0

    @property
    def singleton(self) -> bool:
        return self.pairing is not None

    def subsets(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n_subsets)]
        for ident, j in sorted(self.subset_assignment.items()):
            out[j].append(ident)
        return out

    def nonmember_subsets(self) -> list[list[int]]:
        if self.pairing is not None:
            return [[b] for _, b in self.pairing]
        out: list[list[int]] = [[] for _ in range(self.n_subsets)]
        for ident, j in sorted(self.nonmember_assignment.items()):
            out[j].append(ident)
        return out

    def to_json(self) -> dict:
        return {
            "n_subsets": self.n_subsets,
            "seed": self.seed,
            "subsets": self.subsets(),
            "nonmember_subsets": self.nonmember_subsets(),
            "pairing": None if self.pairing is None else [list(p) for p in self.pairing],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EnsemblePlan":
        assign = {int(i): j for j, ids in enumerate(doc["subsets"]) for i in ids}
        pairing = doc.get("pairing")
        non = {} if pairing else {int(i): j for j, ids in enumerate(doc["nonmember_subsets"]) for i in ids}
        return cls(
            int(doc["n_subsets"]),
            assign,
            non,
            None if pairing is None else tuple((int(a), int(b)) for a, b in pairing),
            int(doc["seed"]),
        )


def _round_robin(ids, n, rng) -> dict[int, int]:
    order = rng.permutation(np.array(sorted(ids), dtype=np.int64))
    return {int(i): k % n for k, i in enumerate(order)}


def partition_identities(attack_ids, n_subsets: int, seed, nonmember_ids=None, singleton=False) -> EnsemblePlan:
    """Seeded shuffle of the identities, then round-robin into ``n_subsets``.

    Subset sizes therefore differ by at most one. When ``nonmember_ids`` is
    given, the non-member identities are dealt the same way so each subset
    gets its share; with ``singleton`` every member identity gets its own
    subset and a distinct non-member partner drawn without replacement.
    """
    attack_ids = sorted(int(i) for i in attack_ids)
    if singleton:
        n_subsets = len(attack_ids)
    if n_subsets < 1:
        raise ContractError("n_subsets must be positive")
    if n_subsets > len(attack_ids):
        raise ContractError(f"{n_subsets} subsets requested but only {len(attack_ids)} identities")
    assign = _round_robin(attack_ids, n_subsets, substream(seed, "ensemble-partition"))
    if singleton:
        if nonmember_ids is None:
            raise ContractError("singleton mode needs the non-member identities to pair with")
        pool = sorted(int(i) for i in nonmember_ids)
        if len(pool) < len(attack_ids):
            raise ContractError(f"{len(attack_ids)} member identities but only {len(pool)} non-member identities to pair")
        partners = substream(seed, "ensemble-pairing").permutation(pool)[: len(attack_ids)]
        by_subset = sorted(assign, key=assign.get)
        pairing = tuple((int(a), int(b)) for a, b in zip(by_subset, partners))
        return EnsemblePlan(n_subsets, assign, {}, pairing, seed)
    non = {}
    if nonmember_ids is not None:
        non_ids = sorted(int(i) for i in nonmember_ids)
        if len(non_ids) < n_subsets:
            raise ContractError(f"{n_subsets} subsets but only {len(non_ids)} non-member identities")
        non = _round_robin(non_ids, n_subsets, substream(seed, "ensemble-nonmembers"))
    return EnsemblePlan(n_subsets, assign, non, None, seed)


@dataclass
class SubModel:
    identities: tuple[int, ...]
    scope: tuple[int, ...]
    attack: object

    def votes(self, inputs: AttackInputs) -> np.ndarray:
        return np.asarray(self.attack.decide(inputs), dtype=bool) & np.isin(inputs.predicted_labels, self.scope)

    def to_json(self) -> dict:
        return {"identities": list(self.identities), "scope": list(self.scope), "attack": self.attack.to_json()}


@dataclass
class EnsembleAttack:
    members: list[SubModel]
    rule: str = "or"
    k: int = 1
    plan: EnsemblePlan | None = None

    def __post_init__(self):
        if not self.members:
            raise ContractError("an ensemble needs at least one sub-model")
        if len({m.attack.method for m in self.members}) != 1:
            raise ContractError("all sub-models must share one strategy")
        if self.rule not in RULES:
            raise ContractError(f"unknown combination rule {self.rule!r}")
        if self.rule == "or" and self.k != 1:
            raise ContractError("rule 'or' implies k=1")
        if not 1 <= self.k <= len(self.members):
            raise ContractError(f"k must lie in [1, {len(self.members)}]")

    @property
    def method(self) -> str:
        return self.members[0].attack.method

    def votes(self, inputs: AttackInputs) -> np.ndarray:
        """(n_samples, n_submodels) boolean vote matrix."""
        return np.column_stack([m.votes(inputs) for m in self.members])

    def decide(self, inputs: AttackInputs) -> np.ndarray:
        return combine_votes(self.votes(inputs), self.k)

    def to_json(self, artifact_paths=None) -> dict:
        doc = {
            "method": self.method,
            "rule": self.rule,
            "k": self.k,
            "plan": None if self.plan is None else self.plan.to_json(),
        }
        if artifact_paths is None:
            doc["members"] = [m.to_json() for m in self.members]
        else:
            doc["members"] = [
                {"identities": list(m.identities), "scope": list(m.scope), "artifact": str(p)}
                for m, p in zip(self.members, artifact_paths)
            ]
        return doc

    @classmethod
    def from_json(cls, doc: dict, load_artifact=None) -> "EnsembleAttack":
        members = []
        for m in doc["members"]:
            attack_doc = m["attack"] if "attack" in m else load_artifact(m["artifact"])
            members.append(SubModel(tuple(m["identities"]), tuple(m["scope"]), attack_from_json(attack_doc)))
        plan = None if doc.get("plan") is None else EnsemblePlan.from_json(doc["plan"])
        return cls(members, doc["rule"], int(doc["k"]), plan)


def combine_votes(votes, k=1) -> np.ndarray:
    """Rule E: member iff at least ``k`` votes are member (k=1 is OR)."""
    votes = np.atleast_2d(np.asarray(votes, dtype=bool))
    return votes.sum(axis=1) >= k


def ensemble_decide(attack: EnsembleAttack, sample: AttackInputs) -> bool:
    """Decision for one sample (a length-1 :class:`AttackInputs`)."""
    if len(sample) != 1:
        raise ContractError("ensemble_decide takes exactly one sample")
    return bool(attack.decide(sample)[0])


def _balance(inputs: AttackInputs) -> AttackInputs:
    """Equal member/non-member counts, keeping the lowest sample ids of the larger side."""
    y = inputs.require_membership()
    n = min(int(y.sum()), int((1 - y).sum()))
    keep = []
    for label in (1, 0):
        idx = np.flatnonzero(y == label)
        idx = idx[np.argsort([inputs.sample_ids[i] for i in idx], kind="stable")][:n]
        keep.extend(idx.tolist())
    return inputs.take(np.sort(np.asarray(keep)))


def train_ensemble(
    splits: ExperimentSplits,
    plan: EnsemblePlan,
    strategy: str,
    target,
    *,
    inputs: AttackInputs | None = None,
    train_config=None,
    search: BoundarySearchConfig | None = None,
    objective="accuracy",
    rule="or",
    k=1,
) -> EnsembleAttack:
    """Fit one ``strategy`` attack per subset of ``plan``.

    Sub-model j sees members from target_val of its identities and
    non-members from attack_nonmember of its share (or of its paired identity
    in singleton mode). ``inputs`` may carry precomputed attack-set records
    (members then non-members, e.g. with boundary distances) to avoid
    re-querying the target.
    """
    if strategy not in METHODS:
        raise ContractError(f"unknown attack method {strategy!r}; expected one of {METHODS}")
    members, nonmembers = splits.attack_member, splits.attack_nonmember
    if set(plan.subset_assignment) != set(members.identities):
        raise ContractError("the plan does not cover exactly the attack member identities")
    if strategy == "label-only" and search is None:
        search = BoundarySearchConfig()
    if inputs is None:
        inputs = attack_inputs(target, members, 1, search if strategy == "label-only" else None)
        inputs = inputs.concat(attack_inputs(target, nonmembers, 0, search if strategy == "label-only" else None))
    identity_of = dict(zip(members.sample_ids, members.individual_ids.tolist()))
    identity_of.update(zip(nonmembers.sample_ids, nonmembers.individual_ids.tolist()))
    try:
        ident = np.array([identity_of[s] for s in inputs.sample_ids], dtype=np.int64)
    except KeyError as exc:
        raise ContractError(f"input record {exc} is not in the attack set") from None
    y = inputs.require_membership()

    subs = []
    for j, (ids, non_ids) in enumerate(zip(plan.subsets(), plan.nonmember_subsets())):
        sel = ((y == 1) & np.isin(ident, ids)) | ((y == 0) & np.isin(ident, non_ids))
        sub = inputs.take(sel)
        sy = sub.membership
        if sy.size == 0 or sy.all() or not sy.any():
            raise ContractError(f"subset {j} has no members or no non-members after restriction")
        if strategy == "salem":
            sub = _balance(sub)
        attack = fit_attack(strategy, sub, train_config=train_config, search=search, objective=objective)
        if plan.n_subsets == 1:
            scope = tuple(range(inputs.confidences.shape[1]))
        else:
            scope = tuple(sorted(target.class_index(i) for i in ids))
        subs.append(SubModel(tuple(ids), scope, attack))
    return EnsembleAttack(subs, rule, k, plan)


def write_votes_csv(path, inputs: AttackInputs, attack: EnsembleAttack):
    """``sample_id,vote_0..vote_{l-1},decision,truth`` per sample."""
    votes = attack.votes(inputs)
    decision = combine_votes(votes, attack.k)
    truth = inputs.membership
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", *[f"vote_{j}" for j in range(votes.shape[1])], "decision", "truth"])
        for i, sid in enumerate(inputs.sample_ids):
            t = "" if truth is None else int(truth[i])
            w.writerow([sid, *votes[i].astype(int).tolist(), int(decision[i]), t])
