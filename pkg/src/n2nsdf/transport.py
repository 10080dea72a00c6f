"""Earth Mover's Distance between equal-size point batches.

Cost is the plain Euclidean distance (not squared). The exact solver is a
shortest-augmenting-path linear assignment; an epsilon-scaling auction is
available for very large batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

AUCTION_THRESHOLD = 2048


class ContractViolation(ValueError):
    pass


@dataclass
class Assignment:
    perm: np.ndarray  # perm[i] = index in B matched to A[i]
    total_cost: float


def _check(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ContractViolation(f"expected two (m, d) batches, got {A.shape} and {B.shape}")
    if len(A) != len(B):
        raise ContractViolation(f"batch sizes differ: {len(A)} vs {len(B)}")
    if len(A) < 1:
        raise ContractViolation("batches must hold at least one point")
    return A, B


def _canonical_ties(perm: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Among duplicate target points, hand out the smallest indices to the earliest sources.

    Swapping two identical targets never changes the cost, so this is the
    lexicographically smallest optimal permutation for that kind of tie.
    """
    _, group = np.unique(B, axis=0, return_inverse=True)
    group = group.ravel()
    if group.max() + 1 == len(B):
        return perm
    out = perm.copy()
    g_of_source = group[perm]
    for g in np.unique(g_of_source[np.bincount(group)[g_of_source] > 1]):
        src = np.nonzero(g_of_source == g)[0]
        out[src] = np.sort(perm[src])
    return out


def auction_assignment(C: np.ndarray, eps_final: float | None = None) -> np.ndarray:
    """Epsilon-scaling Jacobi auction for a square min-cost assignment.

    The result is within ``m * eps_final`` of the optimum.
    """
    C = np.asarray(C, dtype=np.float64)
    m = len(C)
    span = float(C.max() - C.min()) if m else 0.0
    if m == 1 or span == 0.0:
        return np.arange(m)
    if eps_final is None:
        eps_final = span * 1e-7 / m
    benefit = -C
    prices = np.zeros(m)
    eps = span / 4.0
    rows = np.arange(m)
    while True:
        owner = np.full(m, -1)
        assign = np.full(m, -1)
        while True:
            free = np.nonzero(assign < 0)[0]
            if len(free) == 0:
                break
            vals = benefit[free] - prices
            top2 = np.argpartition(-vals, 1, axis=1)[:, :2]
            v = vals[np.arange(len(free))[:, None], top2]
            first = np.where(v[:, 0] >= v[:, 1], 0, 1)
            j1 = top2[np.arange(len(free)), first]
            v1 = v[np.arange(len(free)), first]
            v2 = v[np.arange(len(free)), 1 - first]
            bids = prices[j1] + (v1 - v2) + eps
            best = np.full(m, -np.inf)
            np.maximum.at(best, j1, bids)
            win = bids == best[j1]
            # one winner per object: the lowest-index bidder among equal bids
            order = np.lexsort((free[win], j1[win]))
            wj, wi = j1[win][order], free[win][order]
            keep = np.ones(len(wj), bool)
            keep[1:] = wj[1:] != wj[:-1]
            wj, wi = wj[keep], wi[keep]
            prev = owner[wj]
            assign[prev[prev >= 0]] = -1
            owner[wj] = wi
            assign[wi] = wj
            prices[wj] = best[wj]
        if eps <= eps_final:
            break
        eps = max(eps / 5.0, eps_final)
    return assign


def min_cost_assignment(A, B, solver: str = "auto") -> Assignment:
    """Globally optimal bijection A -> B under Euclidean cost.

    ``solver`` is ``"exact"``, ``"auction"`` or ``"auto"`` (auction above
    ``AUCTION_THRESHOLD`` points).
    """
    A, B = _check(A, B)
    C = cdist(A, B)
    use_auction = solver == "auction" or (solver == "auto" and len(A) > AUCTION_THRESHOLD)
    if use_auction:
        perm = auction_assignment(C)
    else:
        rows, perm = linear_sum_assignment(C)
    perm = _canonical_ties(np.asarray(perm, dtype=np.int64), B)
    return Assignment(perm, float(C[np.arange(len(A)), perm].sum()))


def emd_loss(A, B, solver: str = "auto", return_assignment: bool = False):
    """Mean matched distance and its subgradient w.r.t. ``A``, assignment held fixed.

    Coincident matched pairs get a zero subgradient.
    """
    A, B = _check(A, B)
    asg = min_cost_assignment(A, B, solver=solver)
    diff = A - B[asg.perm]
    dist = np.linalg.norm(diff, axis=1)
    m = len(A)
    safe = np.where(dist > 0, dist, 1.0)
    grad = diff / safe[:, None] * (dist > 0)[:, None] / m
    loss = asg.total_cost / m
    if return_assignment:
        return loss, grad, asg
    return loss, grad
