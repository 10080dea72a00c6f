"""Loss terms: pull operator, noise-to-noise EMD, geometric consistency, fast-mode stabilisers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import diffkit as dk
from .diffkit import Tape
from .field import FieldParams, record_field
from .transport import min_cost_assignment
from .parallel import workers

EPS_GRAD = 1e-8


class DegenerateGradient(FloatingPointError):
    """The field gradient vanished at one or more queries."""

    def __init__(self, message, indices):
        super().__init__(message)
        self.indices = indices


@dataclass
class LossWeights:
    lam: float = 0.1        # geometric consistency weight
    lam2: float = 0.001     # eikonal weight (fast mode)
    pull_ramp: int = 1000   # pull-loss weight falls linearly 1 -> 0 over this many iterations
    fast_gc: bool = False   # also add lam * GC in fast mode

    def __post_init__(self):
        if self.lam < 0 or self.lam2 < 0:
            raise ValueError("loss weights must be >= 0")

    def lam1(self, it: int) -> float:
        if self.pull_ramp <= 0 or it >= self.pull_ramp:
            return 0.0
        return 1.0 - it / self.pull_ramp


@dataclass
class PullRecord:
    pulled: dk.Var    # (B, 3)
    d: dk.Var         # (B,)
    grad: dk.Var      # (B, 3)
    gnorm: dk.Var     # (B, 1)
    queries: np.ndarray
    kept: np.ndarray  # indices of queries that survived the degenerate-gradient check


def record_pull(tape: Tape, params: FieldParams, q, detach_direction: bool = False,
                on_degenerate: str = "raise") -> PullRecord:
    """q - f(q) * grad f(q) / |grad f(q)| on the tape."""
    q = np.asarray(q, dtype=params.dtype)
    d, g = record_field(tape, params, q)
    gn_val = np.linalg.norm(g.value, axis=1)
    kept = np.arange(len(q))
    bad = gn_val < EPS_GRAD
    if bad.any():
        if on_degenerate == "raise":
            raise DegenerateGradient(f"|grad f| < {EPS_GRAD} at {int(bad.sum())} queries", np.nonzero(bad)[0])
        kept = np.nonzero(~bad)[0]
        d, g, q = dk.take(d, kept), dk.take(g, kept), q[kept]
    gn = dk.norm(g, axis=1, keepdims=True)
    direction = tape.const(g.value / gn.value) if detach_direction else g / gn
    pulled = tape.const(q) - dk.reshape(d, (-1, 1)) * direction
    return PullRecord(pulled, d, g, gn, q, kept)


def pull(params: FieldParams, q, detach_direction: bool = False) -> np.ndarray:
    """Pull queries toward the zero level set: (3,) -> (3,), (B, 3) -> (B, 3)."""
    q = np.asarray(q)
    single = q.ndim == 1
    rec = record_pull(Tape(record=False), params, np.atleast_2d(q), detach_direction)
    out = rec.pulled.value
    return out[0] if single else out


# ---------------------------------------------------------------------------
# terms recorded on a tape

def record_emd(pulled: dk.Var, targets) -> dk.Var:
    """Mean matched distance between pulled points and targets (matching held fixed)."""
    targets = np.asarray(targets, dtype=pulled.value.dtype)
    if len(targets) != len(pulled.value):
        raise ValueError(f"EMD needs equal sizes, got {len(pulled.value)} and {len(targets)}")
    if len(targets) == 0:
        return pulled.tape.const(np.zeros((), dtype=targets.dtype))
    asg = min_cost_assignment(pulled.value, targets)
    return dk.mean(dk.norm(pulled - targets[asg.perm], axis=1))


def record_gc(d: dk.Var, queries, pulled_set) -> dk.Var:
    """mean(max(0, |f(q)| - dist(q, pulled_set))).

    With ``pulled_set`` a recorded Var the distance stays differentiable: the
    KD-tree only picks the nearest index. An array is treated as constant.
    """
    queries = np.asarray(queries)
    if len(queries) == 0:
        return d.tape.const(np.zeros((), dtype=d.value.dtype))
    if isinstance(pulled_set, dk.Var):
        _, nn = cKDTree(np.asarray(pulled_set.value, dtype=np.float64)).query(queries, k=1, workers=workers())
        nearest = dk.norm(queries.astype(d.value.dtype) - dk.take(pulled_set, nn), axis=1)
    else:
        dist, _ = cKDTree(np.asarray(pulled_set, dtype=np.float64)).query(queries, k=1, workers=workers())
        nearest = dist.astype(d.value.dtype)
    return dk.mean(dk.relu(dk.absolute(d) - nearest))


def record_pull_loss(pulled: dk.Var, nearest_targets) -> dk.Var:
    nearest_targets = np.asarray(nearest_targets, dtype=pulled.value.dtype)
    return dk.mean(dk.sum(dk.square(pulled - nearest_targets), axis=1))


def record_eikonal(gnorm: dk.Var) -> dk.Var:
    return dk.mean(dk.square(gnorm - 1.0))


# ---------------------------------------------------------------------------
# value-level versions

def noise2noise_term(params: FieldParams, query_batch, target_batch) -> float:
    tape = Tape()
    rec = record_pull(tape, params, query_batch)
    return float(record_emd(rec.pulled, target_batch).value)


def gc_penalty(params: FieldParams, query_batch, pulled_set) -> float:
    tape = Tape(record=False)
    d, _ = record_field(tape, params, np.asarray(query_batch, dtype=params.dtype), with_grad=False)
    return float(record_gc(d, query_batch, pulled_set).value)


def pull_loss(params: FieldParams, queries, nearest_targets) -> float:
    rec = record_pull(Tape(record=False), params, queries)
    return float(record_pull_loss(rec.pulled, nearest_targets).value)


def eikonal_loss(params: FieldParams, queries) -> float:
    tape = Tape(record=False)
    _, g = record_field(tape, params, np.asarray(queries, dtype=params.dtype))
    return float(np.mean((np.linalg.norm(g.value, axis=1) - 1.0) ** 2))


# ---------------------------------------------------------------------------
# combined objective

def _split_pull(rec: PullRecord, n: int) -> tuple[PullRecord, PullRecord]:
    """Cut a pull over concatenated query sets back into the first ``n`` and the rest."""
    first = rec.kept < n

    def part(rows, kept):
        return PullRecord(dk.take(rec.pulled, rows), dk.take(rec.d, rows), dk.take(rec.grad, rows),
                          dk.take(rec.gnorm, rows), rec.queries[rows], kept)

    a, b = np.nonzero(first)[0], np.nonzero(~first)[0]
    return part(a, rec.kept[a]), part(b, rec.kept[b] - n)

@dataclass
class Batch:
    queries: np.ndarray
    targets: np.ndarray
    pull_queries: np.ndarray | None = None   # fast mode only
    pull_targets: np.ndarray | None = None


@dataclass
class LossRecord:
    tape: Tape
    loss: dk.Var
    terms: dict
    skipped: int = 0


def total_loss(mode: str, params: FieldParams, batch: Batch, weights: LossWeights, it: int,
               detach_direction: bool = False, on_degenerate: str = "drop") -> LossRecord:
    """mlp: EMD + lam * GC.  fast: EMD + lam1(it) * pull + lam2 * eikonal (+ lam * GC if fast_gc).

    Degenerate-gradient queries are dropped together with the same number of
    targets so the EMD batches keep equal size.
    """
    tape = Tape()
    extra = batch.pull_queries if mode == "fast" and batch.pull_queries is not None else np.zeros((0, 3))
    if len(extra):
        # one pass through the field for both query sets
        both = record_pull(tape, params, np.concatenate([batch.queries, extra]), detach_direction, on_degenerate)
        rec, prec = _split_pull(both, len(batch.queries))
    else:
        rec, prec = record_pull(tape, params, batch.queries, detach_direction, on_degenerate), None
    targets = np.asarray(batch.targets)[: len(rec.kept)]
    emd = record_emd(rec.pulled, targets)
    terms = {"emd": emd}
    loss = emd
    use_gc = mode == "mlp" or weights.fast_gc
    gc = record_gc(rec.d, rec.queries, rec.pulled)
    terms["gc"] = gc
    if use_gc and weights.lam > 0:
        loss = loss + weights.lam * gc
    if mode == "fast":
        lam1 = weights.lam1(it)
        if prec is not None:
            eik = record_eikonal(prec.gnorm)
            terms["eik"] = eik
            if lam1 > 0:
                pl = record_pull_loss(prec.pulled, np.asarray(batch.pull_targets)[prec.kept])
                terms["pull"] = pl
                loss = loss + lam1 * pl
            else:
                terms["pull"] = tape.const(np.zeros((), dtype=params.dtype))
            if weights.lam2 > 0:
                loss = loss + weights.lam2 * eik
    elif mode != "mlp":
        raise ValueError(f"unknown mode {mode!r}")
    return LossRecord(tape, loss, terms, skipped=len(batch.queries) - len(rec.kept))
