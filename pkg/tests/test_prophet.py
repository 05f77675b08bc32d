import math

import numpy as np
import pytest

from prophet_match.prophet import (
    InvalidUpperBound,
    check_optional_stopping,
    check_submartingale,
    expected_offline_value,
    offline_oracle,
    prophet_report,
    mixing_bound_check,
    report_passes,
    reward_mass_bound,
    run_stp,
    stp_value_recursion,
    stp_values,
    threshold_exact,
    threshold_mc,
    thresholds_exact,
    tight_instance,
    z_trace,
)
from prophet_match.scenario import SamplePath, build_tree, chain_tree, random_tree

from .oracles import brute_stp_and_offline, brute_threshold


@pytest.fixture
def chain():
    return chain_tree([[0.5], [0.5]], [[1.0], [2.0]])


def branching():
    return build_tree(
        [
            {"id": 0, "parent": None},
            {"id": 1, "parent": 0, "branch_prob": 0.4, "p": [0.3, 0.2], "r": [1.0, 4.0]},
            {"id": 2, "parent": 0, "branch_prob": 0.6, "p": [0.1, 0.1], "r": [2.0, 0.5]},
            {"id": 3, "parent": 1, "branch_prob": 0.5, "p": [0.2, 0.0], "r": [3.0, 0.0]},
            {"id": 4, "parent": 1, "branch_prob": 0.5, "p": [0.0, 0.4], "r": [0.0, 6.0]},
            {"id": 5, "parent": 2, "branch_prob": 1.0, "p": [0.5, 0.3], "r": [1.0, 1.5]},
        ]
    )


def test_threshold_examples(chain):
    assert threshold_exact(chain, 1, 1.0).value == pytest.approx(2 * 0.5 / 1.5, abs=1e-12)
    assert threshold_exact(chain, 0, 1.0).value == pytest.approx(0.75, abs=1e-12)
    h = threshold_exact(chain, 2, 1.0)
    assert h.value == 0.0 and h.stderr == 0.0


def test_threshold_rejects_small_tbar(chain):
    with pytest.raises(InvalidUpperBound):
        threshold_exact(chain, 1, 0.5)


def test_thresholds_match_brute_force():
    tree = branching()
    tbar = tree.tbar
    hs = thresholds_exact(tree, tbar)
    for nid in tree.nodes:
        assert hs[nid] == pytest.approx(brute_threshold(tree, nid, tbar), abs=1e-12)


def test_threshold_mc_chain_is_exact(chain):
    est = threshold_mc(chain, 1, 1.0, 7, np.random.default_rng(0))
    assert est.value == pytest.approx(2 / 3, abs=1e-12)
    with pytest.raises(ValueError):
        threshold_mc(chain, 1, 1.0, 0, np.random.default_rng(0))


def test_threshold_mc_converges():
    tree = branching()
    exact = threshold_exact(tree, 0, tree.tbar).value
    est = threshold_mc(tree, 0, tree.tbar, 100_000, np.random.default_rng(2))
    assert abs(est.value - exact) <= 3 * est.stderr


def test_threshold_mc_coverage_over_seeds():
    tree = branching()
    exact = threshold_exact(tree, 1, tree.tbar).value
    inside = 0
    for seed in range(200):
        est = threshold_mc(tree, 1, tree.tbar, 400, np.random.default_rng(seed))
        inside += abs(est.value - exact) <= 3 * est.stderr
    assert inside >= 0.99 * 200 - 1  # 3-sigma coverage, one draw of slack


def test_run_stp_examples(chain):
    path = SamplePath((0, 1, 2), (0, None), (0.1, 0.9))
    tr = run_stp(chain, path, 1.0)
    assert tr.accept_period == 1 and tr.reward == 1.0 and tr.sold
    empty = SamplePath((0, 1, 2), (None, None), (0.9, 0.9))
    tr = run_stp(chain, empty, 1.0)
    assert tr.accept_period == 3 and tr.reward == 0.0 and not tr.sold


def test_run_stp_accepts_ties():
    tree = chain_tree([[0.5], [0.5]], [[2 / 3], [2.0]])
    h = threshold_exact(tree, 1, 1.0).value
    assert tree.nodes[1].rewards[0] >= h
    tr = run_stp(tree, SamplePath((0, 1, 2), (0, None), (0.0, 0.9)), 1.0, thresholds={0: 0.0, 1: 2 / 3, 2: 0.0})
    assert tr.accept_period == 1


def test_value_recursion_examples(chain):
    assert stp_value_recursion(chain, 1, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert stp_value_recursion(chain, 0, 1.0) == pytest.approx(1.0, abs=1e-12)
    zero = chain_tree([[0.0], [0.0]], [[1.0], [1.0]])
    assert stp_value_recursion(zero, 1, 1.0) == 0.0
    single = chain_tree([[1.0]], [[10.0]])
    assert stp_value_recursion(single, 1, 1.0) == 10.0


def test_expected_stp_reward_by_enumeration_matches_recursion(chain):
    e_v, e_off, mass = brute_stp_and_offline(chain, 1.0)
    assert e_v == pytest.approx(1.0, abs=1e-12)
    assert e_off == pytest.approx(1.25, abs=1e-12)
    assert mass == pytest.approx(1.5, abs=1e-12)


def test_offline_oracle_examples(chain):
    assert offline_oracle(chain, SamplePath((0, 1, 2), (0, 0), (0.1, 0.1))) == 2.0
    assert offline_oracle(chain, SamplePath((0, 1, 2), (None, None), (0.9, 0.9))) == 0.0
    assert expected_offline_value(chain) == pytest.approx(1.25, abs=1e-12)


def test_reward_mass_bound_examples(chain):
    assert reward_mass_bound(chain) == pytest.approx(1.5, abs=1e-12)
    assert reward_mass_bound(chain_tree([[0.5]], [[0.0]])) == 0.0
    assert reward_mass_bound(chain) >= expected_offline_value(chain)


def test_z_trace_examples(chain):
    path = SamplePath((0, 1, 2), (None, None), (0.9, 0.9))
    tr = run_stp(chain, path, 1.0)
    z = z_trace(chain, tr).z_values
    assert z[0] == pytest.approx(0.75, abs=1e-12)
    assert z[1] == pytest.approx(2 / 3 + 0.5 * (1 - 2 / 3), abs=1e-12)


def test_z_equals_h_when_rewards_below_thresholds():
    tree = chain_tree([[0.5], [0.5]], [[0.1], [0.0]])
    tr = run_stp(tree, SamplePath((0, 1, 2), (None, None), (0.9, 0.9)), 1.0, thresholds={0: 1.0, 1: 1.0, 2: 1.0})
    z = z_trace(tree, tr).z_values
    assert z[:3] == (1.0, 1.0, 1.0)


def test_submartingale_and_optional_stopping_examples(chain):
    assert check_submartingale(chain, 1.0) <= 1e-9
    assert check_optional_stopping(chain, 1.0) == pytest.approx((1.0, 1.0), abs=1e-12)
    zero = chain_tree([[0.0], [0.0]], [[0.0], [0.0]])
    assert check_submartingale(zero, 0.0) == 0.0
    assert check_optional_stopping(zero, 0.0) == (0.0, 0.0)


def test_random_trees_against_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(40):
        tree = random_tree(rng, int(rng.integers(1, 4)), int(rng.integers(1, 3)), max_branches=2)
        tbar = tree.tbar
        e_v, e_off, mass = brute_stp_and_offline(tree, tbar)
        rep = prophet_report(tree, tbar)
        assert rep["e_v_stp"] == pytest.approx(e_v, abs=1e-12)
        assert rep["e_v_off"] == pytest.approx(e_off, abs=1e-12)
        assert rep["reward_mass_bound"] == pytest.approx(mass, abs=1e-12)
        assert stp_values(tree, tbar)[tree.root] == pytest.approx(e_v, abs=1e-12)
        assert report_passes(rep)


def test_corrupted_thresholds_trip_submartingale(chain):
    bad = {0: 2.0, 1: 2 / 3, 2: 0.0}
    assert check_submartingale(chain, 1.0, bad) > 1.0
    e_v, e_z = check_optional_stopping(chain, 1.0, bad)
    assert e_v == pytest.approx(e_z, abs=1e-12)
    assert not report_passes(prophet_report(chain, 1.0, bad))


def test_mixing_bound_examples():
    assert mixing_bound_check(1.0, 1.0, [0.5], [3.0])
    assert mixing_bound_check(2.0, 3.0, [], [])
    with pytest.raises(ValueError):
        mixing_bound_check(1.0, 0.5, [0.5], [1.0])
    with pytest.raises(ValueError):
        mixing_bound_check(-1.0, 1.0, [0.5], [1.0])


@pytest.mark.parametrize("eps", [0.5, 0.1, 0.01])
def test_tight_instance_ratio(eps):
    tree = tight_instance(eps)
    v = stp_values(tree, tree.tbar)[tree.root]
    r = reward_mass_bound(tree)
    assert v / r == pytest.approx(1 / (2 - eps), abs=1e-9)
    e_v, _, mass = brute_stp_and_offline(tree, 1.0)
    assert e_v / mass == pytest.approx(1 / (2 - eps), abs=1e-9)


def test_tight_instance_monotone_and_domain():
    ratios = []
    for eps in (0.9, 0.5, 0.2, 0.1, 0.01, 0.001):
        tree = tight_instance(eps)
        ratios.append(stp_values(tree, 1.0)[tree.root] / reward_mass_bound(tree))
    assert all(a > b for a, b in zip(ratios, ratios[1:]))
    assert min(ratios) >= 0.5
    assert tight_instance(0.999999).tbar == 1.0
    for eps in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            tight_instance(eps)


def test_report_fields(chain):
    rep = prophet_report(chain)
    assert rep["ratio"] == pytest.approx(0.8, abs=1e-12)
    assert rep["ratio_to_bound"] == pytest.approx(1 / 1.5, abs=1e-12)
    assert rep["guarantee"] == 0.5
    tight = prophet_report(tight_instance(0.01))
    assert tight["ratio_to_bound"] == pytest.approx(1 / 1.99, abs=1e-9)
    assert math.isclose(tight["ratio"], 1 / 1.9801, abs_tol=1e-9)
