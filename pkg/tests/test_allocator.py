import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from kvbits.allocator import (
    AllocationProblem,
    Component,
    InfeasibleBudgetError,
    allocate_kv_joint,
    allocate_kv_separate,
    budget_for,
    check_kkt,
    closed_form_bits,
    continuous_allocate,
    greedy_allocate,
    make_problem,
    marginal_gain_table,
    objective,
    predict_gain,
    realized_gain,
)
from kvbits.distortion import DistortionModel
from kvbits.sensitivity import SensitivityMap, synth_lognormal

KIVI_K = DistortionModel(17.87, 5.09)
KIVI_V = DistortionModel(4.65, 4.55)
TURBO_K = DistortionModel(1.5, 3.57)
TURBO_V = DistortionModel(1.5, 3.58)
UNIT = DistortionModel(1.0, 2.0)


def equal_map(L=4, H=8):
    ones = np.ones((L, H))
    return SensitivityMap(L, H, ones, ones)


def enumerate_optimum(problem):
    """Plain-Python exhaustive search, independent of the evaluator's version."""
    best = None
    for bits in itertools.product(range(problem.b_min, problem.b_max + 1), repeat=problem.n):
        if sum(bits) != problem.budget:
            continue
        j = sum(c.weight * c.model.alpha * c.model.beta ** (-b) for c, b in zip(problem.components, bits))
        if best is None or j < best[0]:
            best = (j, bits)
    return best


def two_class_oracle(mk, mv, avg):
    """Continuous split of two equal-weight classes: equal marginals with b_K + b_V = 2*avg."""

    def gap(bk):
        bv = 2 * avg - bk
        return mk.alpha * math.log(mk.beta) * mk.beta ** (-bk) - mv.alpha * math.log(mv.beta) * mv.beta ** (-bv)

    bk = brentq(gap, 0.0, 2 * avg, xtol=1e-14)
    return bk, 2 * avg - bk


# -- continuous ---------------------------------------------------------------


def test_equal_weights_give_uniform():
    p = make_problem([2.0] * 7, UNIT, avg_bits=3)
    np.testing.assert_allclose(continuous_allocate(p).bits, 3.0, atol=1e-12)


def test_e_and_inverse_e():
    p = make_problem([math.e, 1 / math.e], DistortionModel(1.0, math.e), avg_bits=3)
    np.testing.assert_allclose(continuous_allocate(p).bits, [4.0, 2.0], atol=1e-12)


def test_one_log_unit_gets_080_bits():
    w = [math.e, 1.0, 1.0 / math.e]  # log-mean 0, first sits one unit above
    p = make_problem(w, DistortionModel(1.36, 3.48), avg_bits=4)
    extra = continuous_allocate(p).bits[0] - 4
    assert extra == pytest.approx(1 / math.log(3.48), rel=1e-12)
    assert round(extra, 2) == 0.80


def test_kivi_two_class_split():
    sens = equal_map()
    kv = allocate_kv_separate(sens, KIVI_K, KIVI_V, 2.5, b_min=1, b_max=8, method="continuous")
    bk, bv = two_class_oracle(KIVI_K, KIVI_V, 2.5)
    assert kv.mean_bits_k == pytest.approx(bk, abs=1e-9)
    assert kv.mean_bits_v == pytest.approx(bv, abs=1e-9)
    assert round(kv.mean_bits_k, 2) == 2.86 and round(kv.mean_bits_v, 2) == 2.14
    assert check_kkt(kv.problem, kv.allocation).ok()


def test_closed_form_used_when_no_bound_binds():
    w = np.exp(np.random.default_rng(1).normal(0, 0.5, 40))
    p = make_problem(w, DistortionModel(1.2, 3.6), avg_bits=4, b_min=1, b_max=8)
    a = continuous_allocate(p)
    np.testing.assert_array_equal(a.bits, closed_form_bits(w, 3.6, 4.0))


def test_bounds_are_respected_and_budget_met():
    w = np.exp(np.random.default_rng(2).normal(0, 2.0, 50))
    p = make_problem(w, DistortionModel(1.0, 3.0), avg_bits=3, b_min=2, b_max=5)
    a = continuous_allocate(p)
    assert a.bits.min() >= 2 and a.bits.max() <= 5
    assert abs(a.bits.sum() - p.budget) < 1e-9 * p.n
    report = check_kkt(p, a)
    assert report.ok() and report.num_free < p.n


def test_budget_at_extremes():
    w = [1.0, 5.0, 0.2]
    lo = continuous_allocate(make_problem(w, UNIT, budget=6, b_min=2, b_max=6))
    hi = continuous_allocate(make_problem(w, UNIT, budget=18, b_min=2, b_max=6))
    np.testing.assert_array_equal(lo.bits, [2, 2, 2])
    np.testing.assert_array_equal(hi.bits, [6, 6, 6])


def test_infeasible_budgets_named():
    with pytest.raises(InfeasibleBudgetError, match="below N\\*b_min"):
        make_problem([1, 1], UNIT, budget=3, b_min=2)
    with pytest.raises(InfeasibleBudgetError, match="exceeds N\\*b_max"):
        make_problem([1, 1], UNIT, budget=17, b_max=8)
    with pytest.raises(InfeasibleBudgetError, match="b_max"):
        make_problem([1], UNIT, budget=9, b_max=9)
    with pytest.raises(InfeasibleBudgetError, match="b_min"):
        make_problem([1], UNIT, budget=3, b_min=4, b_max=3)


def test_budget_rounds_half_to_even():
    assert budget_for(2.5, 1) == 2
    assert budget_for(3.5, 1) == 4
    assert budget_for(2.25, 2) == 4


# -- greedy -------------------------------------------------------------------


def test_greedy_single_component():
    p = make_problem([3.0], UNIT, budget=5)
    np.testing.assert_array_equal(greedy_allocate(p).bits, [5])


def test_greedy_equal_weights_uniform():
    p = make_problem([1.0] * 10, DistortionModel(1.36, 3.48), avg_bits=4, b_min=2)
    np.testing.assert_array_equal(greedy_allocate(p).bits, [4] * 10)


def test_greedy_eight_one():
    p = make_problem([8, 1], UNIT, budget=5, b_min=1, b_max=4)
    a = greedy_allocate(p)
    np.testing.assert_array_equal(a.bits, [4, 1])
    assert a.objective == 1.0
    assert objective(p, [3, 2]) == 1.25
    assert objective(p, [2, 3]) == 2.125
    assert objective(p, [1, 4]) == 4.0625
    assert enumerate_optimum(p) == (1.0, (4, 1))


def test_greedy_ties_go_to_lowest_id():
    comps = (Component("b", 1.0, UNIT), Component("a", 1.0, UNIT))
    a = greedy_allocate(AllocationProblem(comps, budget=3, b_min=1, b_max=4))
    np.testing.assert_array_equal(a.bits, [1, 2])


def test_greedy_integer_invariants():
    sens = synth_lognormal(6, 4, 0.0, 1.5, seed=5)
    kv = allocate_kv_separate(sens, KIVI_K, KIVI_V, 3.25, b_min=2, b_max=6)
    b = kv.allocation.bits
    assert b.dtype.kind == "i" and b.min() >= 2 and b.max() <= 6
    assert b.sum() == kv.problem.budget == budget_for(3.25, 48)


# -- key/value allocation -----------------------------------------------------


def test_separate_symmetric_sides():
    sens = synth_lognormal(4, 4, 0.0, 1.0, seed=9)
    sym = SensitivityMap(4, 4, sens.weights_k, sens.weights_k)
    kv = allocate_kv_separate(sym, UNIT, UNIT, 4, b_min=2, b_max=8, method="continuous")
    assert kv.mean_bits_k == pytest.approx(kv.mean_bits_v, abs=1e-12)


def test_turbo_continuous_split_is_near_equal():
    kv = allocate_kv_separate(equal_map(), TURBO_K, TURBO_V, 2.5, b_min=2, method="continuous")
    assert abs(kv.mean_bits_k - 2.5) < 0.01 and abs(kv.mean_bits_v - 2.5) < 0.01


def test_kivi_greedy_is_the_integer_optimum():
    # every spare bit is worth more on a key head at 2 bits (0.554) than on a
    # value head at 2 bits (0.175), and the value gain beats a key going 3 -> 4
    # (0.109); so the integer optimum is all keys at 3, values at 2
    kv = allocate_kv_separate(equal_map(), KIVI_K, KIVI_V, 2.5, b_min=2, b_max=8)
    assert kv.mean_bits_k == 3.0 and kv.mean_bits_v == 2.0
    assert kv.mean_bits_k > kv.mean_bits_v

    small = allocate_kv_separate(equal_map(1, 2), KIVI_K, KIVI_V, 2.5, b_min=2, b_max=8)
    assert enumerate_optimum(small.problem)[1] == tuple(small.allocation.bits)


def test_joint_equal_weights_uniform():
    kv = allocate_kv_joint(equal_map(), DistortionModel(1.36, 3.48), 4)
    assert np.all(kv.bits_k == 4) and np.all(kv.bits_v == 4)
    assert kv.problem.n == 32


def test_joint_uses_summed_weights():
    sens = SensitivityMap(1, 2, [[1.0, 2.5]], [[3.0, 1.5]])
    kv = allocate_kv_joint(sens, UNIT, 3, b_min=1, method="continuous")
    np.testing.assert_array_equal(kv.bits_k, kv.bits_v)
    assert kv.bits_k[0, 0] == pytest.approx(3.0, abs=1e-9)


# -- gain prediction and diagnostics ------------------------------------------


def test_predict_gain_examples():
    assert predict_gain([2.0] * 5) == 1.0
    assert predict_gain([1, 4]) == pytest.approx(1.25, rel=1e-15)


def test_predict_gain_lognormal():
    sens = synth_lognormal(1000, 100, 0.0, 1.0, seed=11)
    assert predict_gain(sens.weights_k.ravel()) == pytest.approx(math.exp(0.5), rel=0.02)


def test_realized_gain_examples():
    assert realized_gain(make_problem([3.0] * 4, UNIT, avg_bits=3)) == 1.0
    p = make_problem([math.e, 1 / math.e], DistortionModel(0.7, math.e), avg_bits=3)
    assert realized_gain(p) == pytest.approx((math.e + 1 / math.e) / 2, rel=1e-12)


def test_all_floored_ratio_is_one():
    w = np.exp(np.random.default_rng(3).normal(0, 1, 20))
    assert realized_gain(make_problem(w, UNIT, avg_bits=2, b_min=2)) == 1.0


def test_marginal_gain_table_ties_and_exclusion():
    comps = [Component(1, 2.0, UNIT), Component(0, 2.0, UNIT), Component(2, 9.0, UNIT)]
    table = marginal_gain_table(comps, [3, 3, 8])
    assert [row[0] for row in table] == [0, 1]
    assert table[0][1] == table[1][1]


def test_marginal_gain_inverts_with_beta():
    def order(beta):
        m = DistortionModel(1.0, beta)
        return [cid for cid, _ in marginal_gain_table([Component(1, 10.0, m), Component(2, 1.0, m)], [3, 1])]

    assert order(3.0) == [1, 2]  # 10/9 > 1
    assert order(4.0) == [2, 1]  # 10/16 < 1


# -- properties ---------------------------------------------------------------

weights_st = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False)
model_st = st.builds(DistortionModel, st.floats(0.05, 20.0), st.floats(1.2, 6.0))


@st.composite
def small_problems(draw):
    n = draw(st.integers(1, 6))
    b_min = draw(st.integers(1, 5))
    b_max = b_min + draw(st.integers(0, 3))
    comps = tuple(Component(i, draw(weights_st), draw(model_st)) for i in range(n))
    budget = draw(st.integers(n * b_min, n * b_max))
    return AllocationProblem(comps, budget, b_min, b_max)


@settings(max_examples=300, deadline=None)
@given(small_problems())
def test_greedy_matches_brute_force(problem):
    best, _ = enumerate_optimum(problem)
    assert greedy_allocate(problem).objective == pytest.approx(best, rel=1e-12)


@st.composite
def continuous_problems(draw):
    n = draw(st.integers(1, 30))
    b_min = draw(st.integers(1, 4))
    b_max = draw(st.integers(b_min + 1, 8))
    shared = draw(st.booleans())
    m = draw(model_st)
    comps = tuple(Component(i, draw(weights_st), m if shared else draw(model_st)) for i in range(n))
    budget = draw(st.integers(n * b_min, n * b_max))
    return AllocationProblem(comps, budget, b_min, b_max)


@settings(max_examples=300, deadline=None)
@given(continuous_problems())
def test_continuous_satisfies_kkt(problem):
    a = continuous_allocate(problem)
    assert check_kkt(problem, a).ok()


@settings(max_examples=100, deadline=None)
@given(continuous_problems())
def test_continuous_beats_greedy_and_rounding(problem):
    j = continuous_allocate(problem).objective
    assert j <= greedy_allocate(problem).objective * (1 + 1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=2, max_size=40), st.floats(1.5, 6.0), st.floats(2.0, 7.0))
def test_gain_identity(logw, beta, avg):
    w = np.exp(logw)
    p = make_problem(w, DistortionModel(1.0, beta), budget=budget_for(avg, len(w)), b_min=1, b_max=8)
    b = continuous_allocate(p).bits
    assume(b.min() > 1 and b.max() < 8)
    assert realized_gain(p) == pytest.approx(predict_gain(w), rel=1e-10)


@settings(max_examples=200, deadline=None)
@given(small_problems(), st.data())
def test_more_weight_never_fewer_bits(problem, data):
    i = data.draw(st.integers(0, problem.n - 1))
    factor = data.draw(st.floats(1.0, 100.0))
    comps = list(problem.components)
    c = comps[i]
    comps[i] = Component(c.id, c.weight * factor, c.model)
    heavier = AllocationProblem(tuple(comps), problem.budget, problem.b_min, problem.b_max)
    assert greedy_allocate(heavier).bits[i] >= greedy_allocate(problem).bits[i]


def test_spread_scaling():
    w = np.exp(np.random.default_rng(4).normal(0, 0.5, 16))
    spreads = {}
    for beta in (3.6, 5.1):
        b = continuous_allocate(make_problem(w, DistortionModel(1.0, beta), avg_bits=4)).bits
        spreads[beta] = b.max() - b.min()
        expected = (np.log(w).max() - np.log(w).min()) / math.log(beta)
        assert spreads[beta] == pytest.approx(expected, rel=1e-12)
    assert spreads[3.6] > spreads[5.1]


@settings(max_examples=100, deadline=None)
@given(continuous_problems(), st.randoms(use_true_random=False))
def test_permutation_equivariance(problem, rnd):
    order = list(range(problem.n))
    rnd.shuffle(order)
    shuffled = AllocationProblem(tuple(problem.components[i] for i in order), problem.budget, problem.b_min, problem.b_max)
    np.testing.assert_array_equal(greedy_allocate(shuffled).bits, greedy_allocate(problem).bits[order])
    np.testing.assert_allclose(continuous_allocate(shuffled).bits, continuous_allocate(problem).bits[order], atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(continuous_problems(), st.floats(1e-3, 1e3))
def test_weight_scaling_invariance(problem, c):
    scaled = AllocationProblem(
        tuple(Component(x.id, x.weight * c, x.model) for x in problem.components),
        problem.budget,
        problem.b_min,
        problem.b_max,
    )
    np.testing.assert_allclose(continuous_allocate(scaled).bits, continuous_allocate(problem).bits, atol=1e-9)
    # greedy compares products of rounded floats, so exact near-ties may flip;
    # the optimum value is what must be invariant
    assert greedy_allocate(scaled).objective == pytest.approx(greedy_allocate(problem).objective * c, rel=1e-12)
