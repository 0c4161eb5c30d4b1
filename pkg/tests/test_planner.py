import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srlora.bundle import WeightBundle, load_bundle, save_bundle
from srlora.errors import MissingWeight, ZeroMatrix
from srlora.linalg import effective_rank
from srlora.planner import (
    RankPlan,
    WeightKey,
    budget_report,
    make_plan,
    parse_strategy,
    plan_fixed,
    plan_stable,
    round_rank,
    verify_lower_bound,
)
from srlora.presets import identity_bundle, vit_inventory


def orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def with_spectrum(rng, sigma):
    n = len(sigma)
    return orthogonal(rng, n) @ np.diag(sigma) @ orthogonal(rng, n).T


def qvo_bundle(mats, layers=1):
    b = WeightBundle()
    it = iter(mats)
    for layer in range(1, layers + 1):
        for role in ("query", "value", "output"):
            b.add(f"l{layer}.{role}", next(it), layer=layer, role=role)
    return b


def test_identity_bundle_gets_full_width():
    plan = plan_stable(identity_bundle(2, 6))
    assert [e.rank for e in plan.entries] == [6] * 6
    assert all(e.stable_rank == 6.0 for e in plan.entries)
    assert verify_lower_bound(plan, identity_bundle(2, 6))


def test_stable_rank_one_and_a_half_ceils_to_two():
    b = qvo_bundle([np.diag([2.0, 1.0, 1.0])] * 3)
    assert {e.rank for e in plan_stable(b, "ceil").entries} == {2}
    assert {e.rank for e in plan_stable(b, "floor").entries} == {1}
    assert {e.rank for e in plan_stable(b, "nearest").entries} == {2}


def test_geometric_spectra_match_closed_form():
    rng = np.random.default_rng(0)
    n = 16
    rhos = (0.5, 0.9, 0.99)
    mats = [with_spectrum(rng, rho ** np.arange(n)) for rho in rhos]
    plan = plan_stable(qvo_bundle(mats))
    for e, rho in zip(plan.entries, rhos):
        closed = (1 - rho ** (2 * n)) / (1 - rho ** 2)
        assert e.stable_rank == pytest.approx(closed, rel=1e-10)
        assert e.rank == math.ceil(closed)
    # frozen ceilings of the geometric sums for n = 16
    assert [e.rank for e in plan.entries] == [2, 6, 14]


def test_plan_invariants_on_seeded_bundle():
    rng = np.random.default_rng(1)
    mats = [rng.standard_normal((12, 9)) * (i + 1) for i in range(6)]
    b = qvo_bundle(mats, layers=2)
    plan = plan_stable(b)
    for e, w in zip(plan.entries, mats):
        assert e.rank <= min(e.d, e.k)
        assert e.stable_rank <= e.rank < e.stable_rank + 1
        assert e.rank <= effective_rank(w, 1e-12)
    assert plan.total_trainable == sum(e.d * e.rank + e.rank * e.k for e in plan.entries)
    assert verify_lower_bound(plan, b)


def test_keys_in_layer_then_role_order():
    rng = np.random.default_rng(2)
    b = WeightBundle()
    for layer in (2, 1):
        for role in ("output", "key", "value", "query"):
            b.add(f"{layer}.{role}", rng.standard_normal((5, 5)), layer=layer, role=role)
    keys = [(e.layer, e.role) for e in plan_fixed(b, 2).entries]
    assert keys == [(1, "query"), (1, "value"), (1, "output"), (2, "query"), (2, "value"), (2, "output")]


def test_missing_weight_names_key():
    b = identity_bundle(2, 4, roles=("query", "value", "output"))
    b2 = WeightBundle()
    for e in b.entries():
        if not (e.layer == 2 and e.role == "value"):
            b2.add(e.name, e.array, layer=e.layer, role=e.role)
    with pytest.raises(MissingWeight) as info:
        plan_stable(b2)
    assert info.value.key == WeightKey(2, "value")
    assert "value" in str(info.value)


def test_zero_matrix_rejected():
    with pytest.raises(ZeroMatrix):
        plan_stable(qvo_bundle([np.zeros((3, 3))] * 3))


def test_fixed_plan_counts():
    b = WeightBundle()
    for layer in range(1, 13):
        for role in ("query", "value", "output"):
            b.add(f"{layer}.{role}", np.zeros((768, 768)), layer=layer, role=role)
    plan = plan_fixed(b, 8)
    assert plan.total_trainable == 442_368
    assert all(e.stable_rank is None for e in plan.entries)
    assert plan.strategy == "fixed:8"


def test_fixed_rank_one_and_clamping():
    b = identity_bundle(1, 4)
    assert {e.rank for e in plan_fixed(b, 1).entries} == {1}
    plan = plan_fixed(b, 9)
    assert {e.rank for e in plan.entries} == {4}
    assert len(plan.clamped) == 3
    assert len(budget_report(plan)["clamped"]) == 3


def test_fixed_budget_strictly_increasing_until_clamp():
    b = identity_bundle(2, 10)
    totals = [plan_fixed(b, r).total_trainable for r in range(1, 14)]
    assert all(x < y for x, y in zip(totals[:9], totals[1:10]))
    assert len(set(totals[9:])) == 1


def test_budget_report_vit_numbers():
    b = WeightBundle()
    for layer in range(1, 13):
        for role in ("query", "value", "output"):
            b.add(f"{layer}.{role}", np.zeros((768, 768)), layer=layer, role=role)
    for r, target in ((8, 0.52), (256, 16.50)):
        rep = budget_report(plan_fixed(b, r), backbone_total=85_800_000)
        assert abs(100 * rep["trainable_ratio"] - target) <= 0.05
    rep = budget_report(plan_fixed(b, 8), backbone_total=85_800_000)
    assert rep["per_layer"][0] == {"layer": 1, "params": 3 * 12_288,
                                   "ranks": {"query": 8, "value": 8, "output": 8}}


def test_budget_report_empty_plan():
    rep = budget_report(RankPlan("stable", "ceil", 100, []), 100)
    assert rep["trainable_ratio"] == 0
    with pytest.raises(ValueError):
        budget_report(RankPlan("stable", "ceil", 0, []))


def test_head_reported_separately():
    b = identity_bundle(1, 4)
    b.add("head", np.ones((3, 4)), role="classifier")
    rep = budget_report(plan_fixed(b, 2))
    assert rep["head_params"] == 12
    assert rep["trainable_ratio_with_head"] == pytest.approx((rep["total_trainable"] + 12) / rep["backbone_total"])


def test_vit_inventory_total():
    assert sum(math.prod(t.shape) for t in vit_inventory()) == 85_798_656


def test_lower_bound_on_rank_deficient_bundle():
    rng = np.random.default_rng(3)
    mats = [sum(np.outer(rng.standard_normal(16), rng.standard_normal(16)) for _ in range(3))
            for _ in range(3)]
    b = qvo_bundle(mats)
    plan = plan_stable(b)
    assert verify_lower_bound(plan, b)
    assert all(e.stable_rank <= 3 + 1e-9 and e.rank <= 3 for e in plan.entries)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 1e3), st.booleans())
def test_plan_scale_invariance(seed, eta, negate):
    rng = np.random.default_rng(seed)
    mats = [rng.standard_normal((7, 6)) for _ in range(3)]
    eta = -eta if negate else eta
    a = [e.rank for e in plan_stable(qvo_bundle(mats)).entries]
    b = [e.rank for e in plan_stable(qvo_bundle([m * eta for m in mats])).entries]
    assert a == b


def test_serialized_plan_is_deterministic_and_round_trips(tmp_path):
    rng = np.random.default_rng(4)
    save_bundle(qvo_bundle([rng.standard_normal((8, 6)) for _ in range(6)], layers=2), tmp_path)
    one = plan_stable(load_bundle(tmp_path)).to_json()
    two = plan_stable(load_bundle(tmp_path)).to_json()
    assert one == two
    doc = json.loads(one)
    assert list(doc) == ["strategy", "rounding", "backbone_total", "entries", "total_trainable",
                         "trainable_ratio", "head_params", "clamped"]
    assert list(doc["entries"][0]) == ["layer", "role", "d", "k", "stable_rank", "rank"]
    assert RankPlan.from_dict(doc).to_json() == one


def test_parse_strategy_and_rounding():
    assert parse_strategy("stable") == ("stable", None)
    assert parse_strategy("fixed:64") == ("fixed", 64)
    for bad in ("fixed:x", "fixed:0", "adaptive"):
        with pytest.raises(ValueError):
            parse_strategy(bad)
    assert round_rank(2.5, "nearest") == 3
    with pytest.raises(ValueError):
        round_rank(1.0, "banker")
    assert make_plan(identity_bundle(1, 3), "fixed:2").total_trainable == 3 * 12
