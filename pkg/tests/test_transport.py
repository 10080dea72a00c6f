import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from n2nsdf.transport import ContractViolation, auction_assignment, emd_loss, min_cost_assignment


def brute_force(A, B):
    m = len(A)
    C = np.linalg.norm(A[:, None] - B[None], axis=2)
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(m)):
        c = C[np.arange(m), perm].sum()
        if c < best:
            best, best_perm = c, perm
    return best, np.array(best_perm)


def test_identical_sets_cost_zero():
    A = np.random.default_rng(0).normal(size=(17, 3))
    asg = min_cost_assignment(A, A)
    assert asg.total_cost == 0.0
    np.testing.assert_array_equal(asg.perm, np.arange(17))


def test_single_pair_cost():
    asg = min_cost_assignment([[0.0, 0.0, 0.0]], [[3.0, 4.0, 0.0]])
    assert asg.total_cost == 5.0


@pytest.mark.parametrize("seed", range(100))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 7))
    A, B = rng.normal(size=(m, 3)), rng.normal(size=(m, 3))
    best, _ = brute_force(A, B)
    assert min_cost_assignment(A, B).total_cost == pytest.approx(best, rel=1e-12, abs=1e-12)


def test_translation_cost_equals_offset_length():
    A = np.random.default_rng(1).normal(size=(40, 3))
    t = np.array([0.003, -0.002, 0.001])
    loss, _ = emd_loss(A + t, A)
    assert loss == pytest.approx(np.linalg.norm(t), rel=1e-9)


def test_zero_loss_has_zero_gradient():
    A = np.random.default_rng(2).normal(size=(10, 3))
    loss, grad = emd_loss(A, A[::-1])
    assert loss == 0.0
    assert np.all(grad == 0)


def test_subgradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    _, grad = emd_loss(A, B)
    h = 1e-7
    fd = np.zeros_like(A)
    for i in range(8):
        for k in range(3):
            Ap, Am = A.copy(), A.copy()
            Ap[i, k] += h
            Am[i, k] -= h
            fd[i, k] = (emd_loss(Ap, B)[0] - emd_loss(Am, B)[0]) / (2 * h)
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-3


@pytest.mark.parametrize("seed", range(20))
def test_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 9))
    A, B, C = (rng.normal(size=(m, 3)) for _ in range(3))
    ab, ba = emd_loss(A, B)[0], emd_loss(B, A)[0]
    assert ab == pytest.approx(ba, rel=1e-12)
    assert emd_loss(A, C)[0] <= ab + emd_loss(B, C)[0] + 1e-12
    assert emd_loss(A, A[rng.permutation(m)])[0] == 0.0
    assert ab > 0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-10, 10)), st.randoms(use_true_random=False))
def test_cost_is_invariant_to_permuting_either_side(A, rnd):
    B = A[::-1] + 0.5
    p = list(range(6))
    rnd.shuffle(p)
    base = min_cost_assignment(A, B).total_cost
    assert min_cost_assignment(A[p], B).total_cost == pytest.approx(base, rel=1e-9, abs=1e-9)
    assert min_cost_assignment(A, B[p]).total_cost == pytest.approx(base, rel=1e-9, abs=1e-9)


def test_duplicate_targets_resolve_to_lowest_permutation():
    A = np.array([[0.0, 0, 0], [0.0, 0, 0], [5.0, 0, 0]])
    B = np.array([[1.0, 0, 0], [5.0, 0, 0], [1.0, 0, 0]])
    asg = min_cost_assignment(A, B)
    np.testing.assert_array_equal(asg.perm, [0, 2, 1])


def test_unequal_sizes_violate_the_contract():
    with pytest.raises(ContractViolation):
        min_cost_assignment(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(ContractViolation):
        min_cost_assignment(np.zeros((0, 3)), np.zeros((0, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_auction_is_near_optimal_at_small_m(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 7))
    A, B = rng.normal(size=(m, 3)), rng.normal(size=(m, 3))
    best, _ = brute_force(A, B)
    asg = min_cost_assignment(A, B, solver="auction")
    assert sorted(asg.perm) == list(range(m))
    assert asg.total_cost <= best + 1e-6


def test_auction_agrees_with_exact_solver_on_integer_costs():
    rng = np.random.default_rng(9)
    C = rng.integers(0, 50, size=(60, 60)).astype(float)
    perm = auction_assignment(C, eps_final=1.0 / 61)
    r, c = linear_sum_assignment(C)
    assert C[np.arange(60), perm].sum() == C[r, c].sum()
