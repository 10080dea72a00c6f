"""Optimisation loops: field training for both modes and the network-free point harness."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .diffkit import NumericFailure, SparseRows
from .field import (ConfigError, FieldParams, HashGridConfig, MlpConfig, init_field,
                    load_checkpoint, save_checkpoint)
from .objective import Batch, LossWeights, total_loss
from .sampling import PAIRINGS, ObservationSet, build_pools, sample_pair

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "total", "emd", "gc", "pull", "eik", "ms", "gnorm")


class TrainingDiverged(FloatingPointError):
    """Non-finite loss or gradient; ``params`` holds the last good state."""

    def __init__(self, message, it, params, record=None):
        super().__init__(message)
        self.iter = it
        self.params = params
        self.record = record or {}


@dataclass
class TrainConfig:
    mode: str = "mlp"
    iterations: int | None = None      # None: 100_000 (mlp) / 10_000 (fast)
    batch: int = 250
    lr: float = 1e-3
    lr_hash: float = 1e-2
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    log_path: str | None = None
    mlp: MlpConfig | None = None       # None: mode default
    grid: HashGridConfig | None = None
    queries_per_point: int = 25
    k_scale: int = 50
    sigma_scale: float = 0.25          # query spread as a fraction of the k-th neighbour distance
    far_fraction: float | None = None  # None: 0 (mlp) / 0.1 (fast)
    pull_batch: int | None = None      # fast-mode pull/eikonal batch, None: = batch
    clip_grad: float | None = None     # e.g. 10.0; off by default
    detach_direction: bool = False
    lr_final: float = 1.0              # lr multiplier reached linearly at the last iteration
    pairing: str = "shared"            # query/target batch pairing, see sampling.sample_pair

    def resolved(self) -> "TrainConfig":
        c = TrainConfig(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        if c.mode not in ("mlp", "fast"):
            raise ConfigError(f"mode: expected 'mlp' or 'fast', got {c.mode!r}")
        if c.iterations is None:
            c.iterations = 100_000 if c.mode == "mlp" else 10_000
        if c.mlp is None:
            c.mlp = MlpConfig() if c.mode == "mlp" else MlpConfig(hidden_layers=3, width=64)
        if c.mode == "fast" and c.grid is None:
            c.grid = HashGridConfig()
        if c.mode == "mlp":
            c.grid = None
        if c.far_fraction is None:
            c.far_fraction = 0.1 if c.mode == "fast" else 0.0
        if c.pull_batch is None:
            c.pull_batch = c.batch
        if c.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if c.batch < 1:
            raise ConfigError("batch must be >= 1")
        if c.lr <= 0 or c.lr_hash <= 0:
            raise ConfigError("lr must be > 0")
        if c.pairing not in PAIRINGS:
            raise ConfigError(f"pairing: expected one of {PAIRINGS}, got {c.pairing!r}")
        return c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, **rec):
        if self.rows and rec["iter"] <= self.rows[-1]["iter"]:
            raise ValueError("log iterations must increase")
        self.rows.append(rec)

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r["iter"]] + [repr(float(r[k])) for k in LOG_COLUMNS[1:]])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path) as fh:
            for r in csv.DictReader(fh):
                out.rows.append({k: (int(v) if k == "iter" else float(v)) for k, v in r.items()})
        return out


class Adam:
    """Adam with lazy (touched-rows-only) updates for row-sparse gradients."""

    def __init__(self, params: FieldParams, lrs: dict, betas=(0.9, 0.999), eps=1e-8):
        self.lrs = lrs
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    def step(self, params: FieldParams, grads: dict, scale: float = 1.0):
        self.t += 1
        b1, b2 = self.b1, self.b2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.arrays.items():
            g = grads[k]
            lr = self.lrs[k] * scale
            if isinstance(g, SparseRows):
                g = g.coalesce()
                rows, gv = g.rows, g.values.astype(p.dtype, copy=False)
                m = np.take(self.m[k], rows, axis=0)
                m *= b1
                m += (1 - b1) * gv
                v = np.take(self.v[k], rows, axis=0)
                v *= b2
                v += (1 - b2) * gv * gv
                self.m[k][rows] = m
                self.v[k][rows] = v
                upd = np.sqrt(v / c2)
                upd += self.eps
                np.divide(m / c1, upd, out=upd)
                upd *= lr
                p[rows] -= upd
            else:
                g = g.astype(p.dtype, copy=False)
                m, v = self.m[k], self.v[k]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load(self, st):
        self.t = int(st["t"])
        self.m = {k: np.array(v) for k, v in st["m"].items()}
        self.v = {k: np.array(v) for k, v in st["v"].items()}


def grad_norm(grads: dict) -> float:
    s = 0.0
    for g in grads.values():
        vals = g.coalesce().values if isinstance(g, SparseRows) else g
        s += float(np.sum(np.square(vals, dtype=np.float64)))
    return float(np.sqrt(s))


def _scale_grads(grads, s):
    return {k: g * s for k, g in grads.items()}


def _save_state(path_prefix: Path, params, opt: Adam, rng, it, cfg):
    extra = {"iter": it, "rng": rng.bit_generator.state, "config": cfg.to_dict()}
    save_checkpoint(params, str(path_prefix) + ".ckpt", extra=_jsonable(extra))
    np.savez(str(path_prefix) + ".opt.npz", t=opt.t,
             **{f"m::{k}": v for k, v in opt.m.items()}, **{f"v::{k}": v for k, v in opt.v.items()})


def _jsonable(x):
    return json.loads(json.dumps(x, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def load_state(path_prefix):
    """(params, adam-state dict, rng state, next iteration) from a training checkpoint."""
    params, extra = load_checkpoint(str(path_prefix) + ".ckpt", with_extra=True)
    z = np.load(str(path_prefix) + ".opt.npz")
    st = {"t": int(z["t"]), "m": {}, "v": {}}
    for k in z.files:
        if k.startswith("m::"):
            st["m"][k[3:]] = z[k]
        elif k.startswith("v::"):
            st["v"][k[3:]] = z[k]
    return params, st, extra["rng"], int(extra["iter"])


def train(S: ObservationSet, cfg: TrainConfig, init: FieldParams | None = None,
          resume: str | None = None, progress_every: int = 0, callback=None):
    """Fit a field to the observation set; returns ``(params, TrainLog)``.

    ``resume`` is a checkpoint prefix written by a previous run with the same
    config; the continued run reproduces the uninterrupted one. ``callback``
    is called as ``callback(it, params)`` after every update.
    """
    cfg = cfg.resolved()
    if S.n < 1 or S.min_size() < 1:
        raise ConfigError("training needs a non-empty observation set")
    params = init.copy() if init is not None else init_field(cfg.mlp, cfg.grid, seed=cfg.seed)
    lrs = {k: (cfg.lr_hash if k.startswith("hash.") else cfg.lr) for k in params.arrays}
    opt = Adam(params, lrs, cfg.betas, cfg.adam_eps)
    trainlog = TrainLog()
    if cfg.iterations == 0:
        return params, trainlog

    ss = np.random.SeedSequence(cfg.seed)
    pool_seed, stream_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    pools = build_pools(S, cfg.queries_per_point, cfg.k_scale, pool_seed, cfg.far_fraction, cfg.sigma_scale)
    rng = np.random.default_rng(stream_seed)
    start = 0
    if resume is not None:
        params, st, rng_state, start = load_state(resume)
        opt.load(st)
        rng.bit_generator.state = rng_state
        prev = Path(str(resume) + ".log.csv")
        if prev.exists():
            trainlog = TrainLog.read_csv(prev)

    ckdir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)

    for it in range(start, cfg.iterations):
        t0 = time.perf_counter()
        q, tgt, i, _, _ = sample_pair(pools, S, cfg.batch, rng, cfg.pairing)
        batch = Batch(q, tgt)
        if cfg.mode == "fast":
            pool = pools[i]
            pi = rng.choice(len(pool), size=min(cfg.pull_batch, len(pool)), replace=False)
            batch.pull_queries = pool.queries[pi]
            batch.pull_targets = S.clouds[i][pool.nearest_in_source[pi]]
        try:
            rec = total_loss(cfg.mode, params, batch, cfg.weights, it, cfg.detach_direction)
            loss = float(rec.loss.value)
            if not np.isfinite(loss):
                raise NumericFailure("non-finite loss")
            grads = {k: g.coalesce() if isinstance(g, SparseRows) else g
                     for k, g in rec.tape.backward(rec.loss).items()}
            gn = grad_norm(grads)
            if not np.isfinite(gn):
                raise NumericFailure("non-finite gradient")
        except NumericFailure as exc:
            diag = {"iter": it, "error": str(exc), "node": getattr(exc, "node", None),
                    "op": getattr(exc, "op", None)}
            if ckdir is not None:
                _save_state(ckdir / "last_good", params, opt, rng, it, cfg)
                (ckdir / "diverged.json").write_text(json.dumps(diag, indent=2))
            raise TrainingDiverged(f"training diverged at iteration {it}: {exc}", it, params, diag) from exc
        if cfg.clip_grad is not None and gn > cfg.clip_grad:
            grads = _scale_grads(grads, cfg.clip_grad / gn)
        frac = it / max(cfg.iterations - 1, 1)
        opt.step(params, grads, scale=1.0 + (cfg.lr_final - 1.0) * frac)
        terms = {k: float(v.value) for k, v in rec.terms.items()}
        trainlog.append(iter=it, total=loss, emd=terms.get("emd", 0.0), gc=terms.get("gc", 0.0),
                        pull=terms.get("pull", 0.0) * cfg.weights.lam1(it), eik=terms.get("eik", 0.0),
                        ms=(time.perf_counter() - t0) * 1e3, gnorm=gn)
        if callback is not None:
            callback(it, params)
        if progress_every and (it + 1) % progress_every == 0:
            log.info("iter %d loss %.6f emd %.6f gc %.6f", it + 1, loss, terms.get("emd", 0.0), terms.get("gc", 0.0))
        if ckdir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            prefix = ckdir / f"iter_{it + 1:07d}"
            _save_state(prefix, params, opt, rng, it + 1, cfg)
            trainlog.write_csv(str(prefix) + ".log.csv")
    if cfg.log_path:
        trainlog.write_csv(cfg.log_path)
    return params, trainlog


# ---------------------------------------------------------------------------
# network-free harness

def _chamfer_sq_grad(X, S):
    """Gradient of the summed squared Chamfer distance w.r.t. X."""
    _, a = cKDTree(S).query(X)
    _, b = cKDTree(X).query(S)
    g = 2.0 * (X - S[a])
    np.add.at(g, b, 2.0 * (X[b] - S))
    return g


def direct_point_optimization(S: ObservationSet, m: int, iters: int = 2000, lr: float = 0.01,
                              seed: int = 0, loss: str = "emd", obs_per_step: int = 1,
                              init: np.ndarray | None = None) -> np.ndarray:
    """Optimise a free point set G' against randomly drawn observations.

    Each step draws ``obs_per_step`` observations (m random points each when a
    cloud is larger than m), averages the EMD subgradients -- or squared
    Chamfer gradients with ``loss="chamfer"`` -- and takes an Adam step whose
    rate decays linearly to zero.
    """
    if S.min_size() < m:
        raise ConfigError(f"every observation needs at least m={m} points")
    if loss not in ("emd", "chamfer"):
        raise ConfigError(f"loss: expected 'emd' or 'chamfer', got {loss!r}")
    rng = np.random.default_rng(seed)

    def draw(cloud):
        return cloud if len(cloud) == m else cloud[rng.choice(len(cloud), m, replace=False)]

    X = draw(S.clouds[int(rng.integers(S.n))]).copy() if init is None else np.array(init, dtype=np.float64)
    m1 = np.zeros_like(X)
    v1 = np.zeros_like(X)
    b1, b2 = 0.9, 0.999
    for t in range(1, iters + 1):
        g = np.zeros_like(X)
        for _ in range(obs_per_step):
            T = draw(S.clouds[int(rng.integers(S.n))])
            if loss == "emd":
                r, c = linear_sum_assignment(cdist(X, T))
                diff = X - T[c]
                dist = np.linalg.norm(diff, axis=1, keepdims=True)
                g += np.where(dist > 0, diff / np.where(dist > 0, dist, 1.0), 0.0)
            else:
                g += _chamfer_sq_grad(X, T)
        g /= obs_per_step
        m1 = b1 * m1 + (1 - b1) * g
        v1 = b2 * v1 + (1 - b2) * g * g
        rate = lr * (1.0 - (t - 1) / iters)
        X -= rate * (m1 / (1 - b1 ** t)) / (np.sqrt(v1 / (1 - b2 ** t)) + 1e-8)
    return X
