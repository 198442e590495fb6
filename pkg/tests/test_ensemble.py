import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opensetmia._util import ContractError
from opensetmia.attacks import AttackInputs, MetricAttack, attack_inputs, fit_attack
from opensetmia.ensemble import (
    EnsembleAttack,
    EnsemblePlan,
    SubModel,
    combine_votes,
    ensemble_decide,
    partition_identities,
    train_ensemble,
    write_votes_csv,
)


def _is_partition(plan, ids):
    subsets = [set(s) for s in plan.subsets()]
    assert set().union(*subsets) == set(ids)
    assert sum(len(s) for s in subsets) == len(ids)
    sizes = [len(s) for s in subsets]
    assert max(sizes) - min(sizes) <= 1


def test_partition_examples():
    ids = range(60)
    six = partition_identities(ids, 6, 0)
    _is_partition(six, ids)
    assert [len(s) for s in six.subsets()] == [10] * 6
    single = partition_identities(ids, 60, 0)
    assert all(len(s) == 1 for s in single.subsets())
    assert partition_identities(ids, 6, 0) == six
    assert partition_identities(ids, 6, 1).subsets() != six.subsets()
    with pytest.raises(ContractError):
        partition_identities(range(5), 6, 0)
    with pytest.raises(ContractError):
        partition_identities(range(5), 0, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31), st.data())
def test_partition_property(n_ids, seed, data):
    n = data.draw(st.integers(1, n_ids))
    _is_partition(partition_identities(range(n_ids), n, seed), range(n_ids))


def test_singleton_pairing_without_replacement():
    plan = partition_identities(range(10), 1, 3, nonmember_ids=range(100, 112), singleton=True)
    assert plan.n_subsets == 10 and plan.singleton
    members = [a for a, _ in plan.pairing]
    partners = [b for _, b in plan.pairing]
    assert sorted(members) == list(range(10))
    assert len(set(partners)) == 10 and set(partners) <= set(range(100, 112))
    again = partition_identities(range(10), 1, 3, nonmember_ids=range(100, 112), singleton=True)
    assert again == plan
    assert EnsemblePlan.from_json(json.loads(json.dumps(plan.to_json()))) == plan
    with pytest.raises(ContractError):
        partition_identities(range(10), 1, 3, nonmember_ids=range(5), singleton=True)


def test_combine_votes_rule_e():
    assert list(combine_votes([[0, 0, 0], [1, 0, 0], [1, 1, 0]])) == [False, True, True]
    assert list(combine_votes([[1, 1], [1, 0]], k=2)) == [True, False]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(st.booleans(), min_size=1, max_size=6), min_size=1, max_size=20).filter(
    lambda rows: len({len(r) for r in rows}) == 1), st.data())
def test_rule_e_monotone_when_adding_submodels(rows, data):
    votes = np.array(rows, dtype=bool)
    extra = np.array(data.draw(st.lists(st.booleans(), min_size=len(rows), max_size=len(rows))))
    before = combine_votes(votes)
    after = combine_votes(np.column_stack([votes, extra]))
    assert np.all(after >= before)


class _Thresh:
    method = "yeom"

    def __init__(self, tau):
        self.tau = tau

    def decide(self, inputs):
        return inputs.confidences.max(axis=1) >= self.tau

    def to_json(self):
        return {"method": "yeom", "threshold": self.tau}


def _inputs(conf, pred):
    conf = np.asarray(conf, dtype=float)
    return AttackInputs(tuple(f"s{i}" for i in range(len(conf))), conf,
                        np.full(len(conf), -1), np.asarray(pred), np.zeros(len(conf), dtype=int))


def test_single_submodel_equals_its_decision():
    rng = np.random.default_rng(0)
    conf = rng.dirichlet(np.ones(3), size=50)
    inp = _inputs(conf, conf.argmax(axis=1))
    sub = SubModel((1, 2, 3), (0, 1, 2), _Thresh(0.5))
    ens = EnsembleAttack([sub])
    assert np.array_equal(ens.decide(inp), sub.attack.decide(inp))
    assert ensemble_decide(ens, inp.take([0])) == bool(sub.attack.decide(inp)[0])


def test_submodel_only_votes_in_scope():
    inp = _inputs([[0.9, 0.1], [0.1, 0.9]], [0, 1])
    sub = SubModel((7,), (0,), _Thresh(0.5))
    assert list(sub.votes(inp)) == [True, False]


def test_ensemble_contract_errors():
    with pytest.raises(ContractError):
        EnsembleAttack([])
    sub = SubModel((1,), (0,), _Thresh(0.5))
    with pytest.raises(ContractError):
        EnsembleAttack([sub], k=2)
    with pytest.raises(ContractError):
        EnsembleAttack([sub], rule="majority")

    class Other(_Thresh):
        method = "salem"

    with pytest.raises(ContractError):
        EnsembleAttack([sub, SubModel((2,), (1,), Other(0.5))])


@pytest.fixture(scope="module")
def attack_set(small_splits, small_target):
    return attack_inputs(small_target, small_splits.attack_member, 1).concat(
        attack_inputs(small_target, small_splits.attack_nonmember, 0)
    )


def test_one_subset_equals_plain_attack(small_splits, small_target, attack_set):
    sp = small_splits
    plan = partition_identities(sp.attack_member.identities, 1, 0, sp.attack_nonmember.identities)
    ens = train_ensemble(sp, plan, "yeom", small_target, inputs=attack_set)
    plain = fit_attack("yeom", attack_set)
    ev = attack_inputs(small_target, sp.eval_member, 1).concat(attack_inputs(small_target, sp.eval_nonmember, 0))
    assert np.array_equal(ens.decide(ev), plain.decide(ev))
    # without precomputed inputs the target is queried and the result is the same
    again = train_ensemble(sp, plan, "yeom", small_target)
    assert np.array_equal(again.decide(ev), ens.decide(ev))


def test_submodels_see_only_their_identities(small_splits, small_target, attack_set):
    sp = small_splits
    plan = partition_identities(sp.attack_member.identities, 2, 0, sp.attack_nonmember.identities)
    ens = train_ensemble(sp, plan, "yeom", small_target, inputs=attack_set)
    assert len(ens.members) == 2
    for sub, ids in zip(ens.members, plan.subsets()):
        assert sub.identities == tuple(ids)
        assert sub.scope == tuple(sorted(small_target.class_index(i) for i in ids))
    # each sub-model's threshold equals one fitted on its own subset of records
    ident = {s: i for s, i in zip(sp.attack_member.sample_ids + sp.attack_nonmember.sample_ids,
                                  np.concatenate([sp.attack_member.individual_ids,
                                                  sp.attack_nonmember.individual_ids]))}
    for sub, ids, non in zip(ens.members, plan.subsets(), plan.nonmember_subsets()):
        sel = [ident[s] in set(ids) | set(non) for s in attack_set.sample_ids]
        assert sub.attack.threshold == MetricAttack.fit(attack_set.take(np.array(sel))).threshold


@pytest.mark.parametrize("strategy", ["yeom", "salem"])
def test_singleton_ensemble_trains(small_splits, small_target, attack_set, strategy, tmp_path):
    from opensetmia.model import TrainConfig

    sp = small_splits
    plan = partition_identities(sp.attack_member.identities, 1, 0, sp.attack_nonmember.identities, singleton=True)
    ens = train_ensemble(sp, plan, strategy, small_target, inputs=attack_set,
                         train_config=TrainConfig.from_preset("overfitting", seed=0).with_epochs(3))
    assert len(ens.members) == len(sp.attack_member.identities)
    back = EnsembleAttack.from_json(json.loads(json.dumps(ens.to_json())))
    assert np.array_equal(back.decide(attack_set), ens.decide(attack_set))
    p = tmp_path / "votes.csv"
    write_votes_csv(p, attack_set, ens)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["sample_id", *[f"vote_{j}" for j in range(len(ens.members))], "decision", "truth"]
    assert len(rows) == len(attack_set) + 1


def test_train_ensemble_errors(small_splits, small_target, attack_set):
    sp = small_splits
    bad = partition_identities(sorted(sp.attack_member.identities)[:-1], 1, 0)
    with pytest.raises(ContractError):
        train_ensemble(sp, bad, "yeom", small_target, inputs=attack_set)
    plan = partition_identities(sp.attack_member.identities, 2, 0)  # no non-member shares
    with pytest.raises(ContractError):
        train_ensemble(sp, plan, "yeom", small_target, inputs=attack_set)
    with pytest.raises(ContractError):
        train_ensemble(sp, plan, "shadow", small_target, inputs=attack_set)
