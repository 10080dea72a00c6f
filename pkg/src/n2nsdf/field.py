"""The signed distance field: a softplus MLP, optionally fed by a hash grid."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import diffkit as dk
from .diffkit import DualVec3, NumericFailure, Tape

PRIMES = (1, 2654435761, 805459861)
# corner offsets in (x, y, z) order, corner c has bit d set when offset along d is 1
_CORNERS = np.array([[(c >> d) & 1 for d in range(3)] for c in range(8)], dtype=np.int64)

CHECKPOINT_MAGIC = b"N2NSDF\x00\x00"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class MlpConfig:
    hidden_layers: int = 8
    width: int = 256
    activation: str = "softplus"
    beta: float = 100.0
    geometric_init_radius: float = 0.5

    def validate(self):
        if self.hidden_layers < 1:
            raise ConfigError("mlp.hidden_layers must be >= 1")
        if self.width < 4:
            raise ConfigError("mlp.width must be >= 4")
        if not 0 < self.geometric_init_radius <= 1:
            raise ConfigError("mlp.geometric_init_radius must lie in (0, 1]")
        if self.activation != "softplus":
            raise ConfigError(f"mlp.activation: unsupported activation {self.activation!r}")
        if self.beta <= 0:
            raise ConfigError("mlp.beta must be > 0")


@dataclass
class HashGridConfig:
    levels: int = 14
    table_size: int = 2 ** 19
    feature_dim: int = 2
    base_resolution: int = 16
    finest_resolution: int = 2048

    def validate(self):
        if self.levels < 1:
            raise ConfigError("grid.levels must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ConfigError("grid.table_size must be a power of two")
        if self.feature_dim < 1:
            raise ConfigError("grid.feature_dim must be >= 1")
        if not 1 <= self.base_resolution <= self.finest_resolution:
            raise ConfigError("grid.base_resolution must be in [1, finest_resolution]")

    def resolutions(self) -> list[int]:
        if self.levels == 1:
            return [self.base_resolution]
        b = math.exp((math.log(self.finest_resolution) - math.log(self.base_resolution)) / (self.levels - 1))
        # tiny slack so floor() does not lose the exact endpoints to rounding
        return [int(math.floor(self.base_resolution * b ** l + 1e-9)) for l in range(self.levels)]

    def is_dense(self, res: int) -> bool:
        return (res + 1) ** 3 <= self.table_size


@dataclass
class FieldParams:
    mlp: MlpConfig
    grid: HashGridConfig | None
    arrays: dict = dc_field(default_factory=dict)

    @property
    def mode(self) -> str:
        return "mlp" if self.grid is None else "fast"

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def names(self) -> list[str]:
        return list(self.arrays)

    def hash_names(self) -> list[str]:
        return [k for k in self.arrays if k.startswith("hash.")]

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(self.mlp, self.grid, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "FieldParams":
        return self.astype(self.dtype)

    def with_arrays(self, arrays: dict) -> "FieldParams":
        return FieldParams(self.mlp, self.grid, dict(arrays))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())


def _mlp_layer_dims(mlp: MlpConfig, in_dim: int) -> list[tuple[int, int]]:
    dims = [in_dim] + [mlp.width] * mlp.hidden_layers + [1]
    return list(zip(dims[:-1], dims[1:]))


def init_field(mlp_cfg: MlpConfig, grid_cfg: HashGridConfig | None = None, seed: int = 0,
               dtype=np.float32) -> FieldParams:
    """Geometrically initialised field, f(q) ~ |q| - r at start.

    The usual random draw (output weights around sqrt(pi / width), bias -r)
    is followed by a least-squares refit of the output layer.

    The first layer's hash-feature columns get the same draw as the coordinate
    columns; hash features start uniform in [-1e-4, 1e-4].
    """
    mlp_cfg.validate()
    if grid_cfg is not None:
        grid_cfg.validate()
    rng = np.random.default_rng(seed)
    arrays = {}
    n_feat = 0
    if grid_cfg is not None:
        for l, res in enumerate(grid_cfg.resolutions()):
            rows = (res + 1) ** 3 if grid_cfg.is_dense(res) else grid_cfg.table_size
            arrays[f"hash.{l}"] = rng.uniform(-1e-4, 1e-4, size=(rows, grid_cfg.feature_dim)).astype(dtype)
        n_feat = grid_cfg.levels * grid_cfg.feature_dim
    layers = _mlp_layer_dims(mlp_cfg, n_feat + 3)
    for i, (din, dout) in enumerate(layers):
        if i == len(layers) - 1:
            w = rng.normal(math.sqrt(math.pi) / math.sqrt(din), 1e-4, size=(din, dout))
            b = np.full(dout, -mlp_cfg.geometric_init_radius)
        else:
            w = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(dout), size=(din, dout))
            b = np.zeros(dout)
        arrays[f"mlp.W{i}"] = w.astype(dtype)
        arrays[f"mlp.b{i}"] = b.astype(dtype)
    params = FieldParams(mlp_cfg, grid_cfg, arrays)
    _calibrate_output_layer(params, rng)
    return params


def _calibrate_output_layer(params: FieldParams, rng, n: int = 4096, ridge: float = 1e-5):
    """Refit the output layer so that f(q) ~ |q| - r holds at this width, not only on average.

    A ridge fit pulls the weights toward their random draw; samples reach the
    corners of the [-1, 1]^3 working cube.
    """
    mlp = params.mlp
    last = mlp.hidden_layers
    # uniform in radius so the cone tip at the origin is not starved of samples
    u = rng.normal(size=(n, 3))
    q = u / np.linalg.norm(u, axis=1, keepdims=True) * rng.uniform(0.0, math.sqrt(3.0), size=(n, 1))
    tape = Tape(record=False)
    pv = bind(tape, params.astype(np.float64))
    h = tape.const(q)
    if params.grid is not None:
        # hash features start near zero; their columns keep the random draw
        h = dk.concat([tape.const(np.zeros((n, params.grid.levels * params.grid.feature_dim))), h])
    for i in range(last):
        h = dk.softplus(h @ pv[f"mlp.W{i}"] + pv[f"mlp.b{i}"], mlp.beta)
    phi = np.concatenate([h.value, np.ones((n, 1))], axis=1)
    w0 = np.concatenate([params.arrays[f"mlp.W{last}"][:, 0], params.arrays[f"mlp.b{last}"]]).astype(np.float64)
    y = np.linalg.norm(q, axis=1) - mlp.geometric_init_radius
    A = phi.T @ phi / n + ridge * np.eye(len(w0))
    w = np.linalg.solve(A, phi.T @ y / n + ridge * w0)
    dtype = params.dtype
    params.arrays[f"mlp.W{last}"] = w[:-1, None].astype(dtype)
    params.arrays[f"mlp.b{last}"] = w[-1:].astype(dtype)


# ---------------------------------------------------------------------------
# hash grid

def grid_lookup(q: np.ndarray, res, table_rows, dense):
    """Corner slots, trilinear weights and their q-gradients for several levels at once.

    ``res``, ``table_rows`` and ``dense`` hold one entry per level. Returns
    ``idx`` (L, B, 8), ``w`` (L, B, 8) and ``dw`` (L, 3, B, 8).
    """
    res = np.asarray(res, dtype=np.int64)[:, None, None]
    inside = np.abs(q) <= 1.0
    qc = np.clip(q, -1.0, 1.0)
    x = (qc[None] + 1.0) * (0.5 * res)  # (L, B, 3)
    i0 = np.minimum(np.maximum(np.floor(x).astype(np.int64), 0), res - 1)
    t = (x - i0).astype(q.dtype)
    c = i0[:, :, None, :] + _CORNERS  # (L, B, 8, 3)
    n = res + 1
    idx = c[..., 0] + n * (c[..., 1] + n * c[..., 2])
    hashed = ~np.asarray(dense, dtype=bool)
    if hashed.any():
        cu = c[hashed].astype(np.uint64)
        h = cu[..., 0] * np.uint64(PRIMES[0])
        h ^= cu[..., 1] * np.uint64(PRIMES[1])
        h ^= cu[..., 2] * np.uint64(PRIMES[2])
        mask = (np.asarray(table_rows, dtype=np.uint64)[hashed] - np.uint64(1))[:, None, None]
        idx[hashed] = (h & mask).astype(np.int64)
    # per-axis factors: t for offset 1, (1 - t) for offset 0
    fac = np.where(_CORNERS.astype(bool), t[:, :, None, :], 1.0 - t[:, :, None, :])  # (L, B, 8, 3)
    dfac = np.where(_CORNERS.astype(bool), 1.0, -1.0).astype(q.dtype)  # (8, 3)
    f0, f1, f2 = fac[..., 0], fac[..., 1], fac[..., 2]
    scale = (0.5 * res) * inside  # (L, B, 3); clamped coordinates carry no gradient
    dw = np.stack([
        dfac[:, 0] * f1 * f2 * scale[..., 0:1],
        f0 * dfac[:, 1] * f2 * scale[..., 1:2],
        f0 * f1 * dfac[:, 2] * scale[..., 2:3],
    ], axis=1)
    return idx, (f0 * f1 * f2).astype(q.dtype), dw.astype(q.dtype)


def level_lookup(q: np.ndarray, res: int, table_rows: int, dense: bool):
    """Corner slots, trilinear weights and their q-gradients for one level.

    Returns ``idx`` (B, 8), ``w`` (B, 8) and ``dw`` (3, B, 8).
    """
    idx, w, dw = grid_lookup(q, [res], [table_rows], [dense])
    return idx[0], w[0], dw[0]


def _grid_levels(grid: HashGridConfig, tables):
    res = grid.resolutions()
    return res, [len(t) for t in tables], [grid.is_dense(r) for r in res]


def hash_encode(grid: HashGridConfig, tables: list[np.ndarray], q) -> np.ndarray:
    """Concatenated per-level trilinear features, shape (B, L*F) (or (L*F,) for one point)."""
    q = np.asarray(q, dtype=tables[0].dtype)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    idx, w, _ = grid_lookup(q, *_grid_levels(grid, tables))
    feats = [np.matmul(w[l][:, None, :], tab[idx[l]])[:, 0] for l, tab in enumerate(tables)]
    out = np.concatenate(feats, axis=-1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# recording the field on a tape

def bind(tape: Tape, params: FieldParams) -> dict:
    """Parameter leaves for ``params`` on ``tape`` (created once per tape)."""
    cache = tape.__dict__.setdefault("_bindings", {})
    key = id(params)
    if key not in cache:
        cache[key] = {k: tape.param(k, v) for k, v in params.arrays.items()}
    return cache[key]


def record_field(tape: Tape, params: FieldParams, q: np.ndarray, with_grad: bool = True):
    """Record f(q) and (optionally) grad_q f(q) for a batch of queries.

    Returns ``(d, grad)`` with ``d`` of shape (B,) and ``grad`` (B, 3), both tape
    nodes; ``grad`` is None when ``with_grad`` is False.
    """
    pv = bind(tape, params)
    q = np.asarray(q, dtype=params.dtype)
    mlp = params.mlp
    if with_grad:
        x = DualVec3.seed(tape, q)
    parts_v, parts_t = [], []
    if params.grid is not None:
        tabs = [pv[f"hash.{l}"] for l in range(params.grid.levels)]
        idxs, ws, dws = grid_lookup(q, *_grid_levels(params.grid, [t.value for t in tabs]))
        for tab, idx, w, dw in zip(tabs, idxs, ws, dws):
            if with_grad:
                both = dk.gather_blend(tab, idx, np.concatenate([w[None], dw]))
                parts_v.append(both[0])
                parts_t.append(both[1:])
            else:
                parts_v.append(dk.gather_blend(tab, idx, w[None])[0])
    n_layers = mlp.hidden_layers + 1
    if with_grad:
        if parts_v:
            x = DualVec3(dk.concat(parts_v + [x.value]), dk.concat(parts_t + [x.tangent]))
        for i in range(n_layers):
            x = x.affine(pv[f"mlp.W{i}"], pv[f"mlp.b{i}"])
            if i < n_layers - 1:
                x = x.softplus(mlp.beta)
        d = dk.reshape(x.value, (-1,))
        return d, x.gradient()
    h = dk.concat(parts_v + [tape.const(q)]) if parts_v else tape.const(q)
    for i in range(n_layers):
        h = h @ pv[f"mlp.W{i}"] + pv[f"mlp.b{i}"]
        if i < n_layers - 1:
            h = dk.softplus(h, mlp.beta)
    return dk.reshape(h, (-1,)), None


def _chunks(n, size):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def sdf(params: FieldParams, q, chunk: int = 65536) -> np.ndarray:
    """Signed distance at ``q`` ((3,) -> scalar, (B, 3) -> (B,))."""
    q = np.asarray(q, dtype=params.dtype)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    out = np.empty(len(q), dtype=params.dtype)
    for sl in _chunks(len(q), chunk):
        tape = Tape(record=False)
        d, _ = record_field(tape, params, q[sl], with_grad=False)
        out[sl] = d.value
    return out[0] if single else out


def sdf_and_grad(params: FieldParams, q, chunk: int = 16384):
    """Signed distance and input gradient for a batch, without recording."""
    q = np.atleast_2d(np.asarray(q, dtype=params.dtype))
    d_out = np.empty(len(q), dtype=params.dtype)
    g_out = np.empty((len(q), 3), dtype=params.dtype)
    for sl in _chunks(len(q), chunk):
        tape = Tape(record=False)
        d, g = record_field(tape, params, q[sl], with_grad=True)
        d_out[sl] = d.value
        g_out[sl] = g.value
    return d_out, g_out


# ---------------------------------------------------------------------------
# checkpoint: magic, version, JSON config block, little-endian f32 arrays

def save_checkpoint(params: FieldParams, path, extra: dict | None = None) -> None:
    header = {
        "mlp": asdict(params.mlp),
        "grid": None if params.grid is None else asdict(params.grid),
        "arrays": [[k, list(v.shape)] for k, v in params.arrays.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for v in params.arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path, with_extra: bool = False):
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + n].decode("utf-8"))
    off = 16 + n
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter arrays")
    grid = None if header["grid"] is None else HashGridConfig(**header["grid"])
    params = FieldParams(MlpConfig(**header["mlp"]), grid, arrays)
    if with_extra:
        return params, header.get("extra", {})
    return params


def check_finite(params: FieldParams):
    for k, v in params.arrays.items():
        if not np.all(np.isfinite(v)):
            raise NumericFailure(f"parameter array {k} has non-finite entries", op=k)
