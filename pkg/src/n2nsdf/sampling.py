"""Noise synthesis, query generation around noisy clouds and batch pairing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .field import ConfigError
from .parallel import workers

QUERY_TRUNCATION = 3.0  # queries are kept within this many sigma_p of their source
FRAME_RADIUS = 1.0      # working frame: the unit sphere


@dataclass
class Normalization:
    """x_unit = (x - center) / scale.

    ``fit`` centres on the bounding-box centre and scales the farthest point
    to FRAME_RADIUS, so the data sits inside the unit sphere.
    """

    center: np.ndarray
    scale: float

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), 1.0)

    @classmethod
    def fit(cls, clouds) -> "Normalization":
        pts = np.concatenate([np.asarray(c, dtype=np.float64) for c in clouds])
        center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        scale = float(np.linalg.norm(pts - center, axis=1).max()) / FRAME_RADIUS
        if scale <= 0:
            raise ConfigError("observations are degenerate (all points identical)")
        return cls(center, scale)

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.center) / self.scale

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.scale + self.center

    def to_dict(self):
        return {"center": [float(c) for c in self.center], "scale": self.scale}


@dataclass
class ObservationSet:
    """N >= 1 noisy captures of one shape, all in one shared working frame."""

    clouds: list
    norm: Normalization = field(default_factory=Normalization.identity)

    def __post_init__(self):
        if len(self.clouds) < 1:
            raise ConfigError("an observation set needs at least one cloud")

    @classmethod
    def from_clouds(cls, clouds, normalize: bool = True) -> "ObservationSet":
        clouds = [np.asarray(c, dtype=np.float64) for c in clouds]
        norm = Normalization.fit(clouds) if normalize else Normalization.identity()
        return cls([norm.normalize(c) for c in clouds], norm)

    @property
    def n(self) -> int:
        return len(self.clouds)

    def min_size(self) -> int:
        return min(len(c) for c in self.clouds)


@dataclass
class QueryPool:
    queries: np.ndarray           # (M, 3)
    source_point: np.ndarray      # (M,) index into the source cloud, -1 for far-field samples
    source_cloud: np.ndarray      # (M,)
    nearest_in_source: np.ndarray  # (M,) index of the nearest noisy point in the source cloud
    sigma: np.ndarray             # (n,) per-point scale of the source cloud

    def __len__(self):
        return len(self.queries)

    @property
    def near(self) -> np.ndarray:
        """Indices of queries sampled around a cloud point."""
        return np.nonzero(self.source_point >= 0)[0]


def synthesize_noisy(clean, sigma: float, seed: int) -> np.ndarray:
    """Add isotropic zero-mean Gaussian noise of std ``sigma`` to every point."""
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    clean = np.asarray(clean, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return clean + rng.normal(0.0, 1.0, size=clean.shape) * sigma


def local_scales(cloud, k_scale: int) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbour (itself excluded)."""
    tree = cKDTree(cloud)
    d, _ = tree.query(cloud, k=k_scale + 1, workers=workers())
    return d[:, -1]


def _truncated_normal_3d(rng, n, limit):
    """Standard normal 3-vectors conditioned on norm <= limit (rejection)."""
    out = rng.normal(size=(n, 3))
    bad = np.linalg.norm(out, axis=1) > limit
    while bad.any():
        out[bad] = rng.normal(size=(int(bad.sum()), 3))
        bad = np.linalg.norm(out, axis=1) > limit
    return out


def build_query_pool(cloud, queries_per_point: int = 25, k_scale: int = 50, seed: int = 0,
                     cloud_index: int = 0, far_fraction: float = 0.0,
                     sigma_scale: float = 1.0) -> QueryPool:
    """Gaussian queries around every point, std = distance to the k-th neighbour.

    ``far_fraction`` adds that fraction (relative to the near queries) of
    uniform samples over the [-1, 1]^3 working cube.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    n = len(cloud)
    if n < k_scale + 1:
        raise ConfigError(f"cloud has {n} points, needs more than k_scale={k_scale}")
    if np.ptp(cloud, axis=0).max() == 0:
        raise ConfigError("degenerate cloud: all points identical")
    rng = np.random.default_rng(seed)
    sigma = local_scales(cloud, k_scale) * sigma_scale
    src = np.repeat(np.arange(n), queries_per_point)
    offsets = _truncated_normal_3d(rng, len(src), QUERY_TRUNCATION) * sigma[src, None]
    q = cloud[src] + offsets
    n_far = int(round(far_fraction * len(src)))
    if n_far:
        q = np.concatenate([q, rng.uniform(-FRAME_RADIUS, FRAME_RADIUS, size=(n_far, 3))])
        src = np.concatenate([src, np.full(n_far, -1)])
    tree = cKDTree(cloud)
    _, nearest = tree.query(q, k=1, workers=workers()) if len(q) else (None, np.zeros(0, dtype=np.int64))
    return QueryPool(q, src, np.full(len(q), cloud_index), np.asarray(nearest, dtype=np.int64), sigma)


def build_pools(S: ObservationSet, queries_per_point: int = 25, k_scale: int = 50, seed: int = 0,
                far_fraction: float = 0.0, sigma_scale: float = 1.0) -> list[QueryPool]:
    """One pool per observation, with independent child seeds."""
    seeds = np.random.SeedSequence(seed).spawn(S.n)
    return [build_query_pool(c, queries_per_point, k_scale,
                             int(s.generate_state(1)[0]), i, far_fraction, sigma_scale)
            for i, (c, s) in enumerate(zip(S.clouds, seeds))]


PAIRINGS = ("shared", "independent")


def sample_pair(pools: list[QueryPool], S: ObservationSet, B: int, rng: np.random.Generator,
                pairing: str = "shared"):
    """Query batch from a random source cloud i, target batch from a random cloud j.

    With a single observation the target cloud is the source itself.

    ``shared``: B distinct source points are drawn, one of each point's
    queries is taken, and the targets are the points with the same indices in
    cloud j (clouds of equal size are assumed to be index-aligned captures).
    Both batches stay uniform draws without replacement; the match between
    them is merely local. ``independent`` draws the targets separately, as do
    clouds of unequal size.

    Returns ``(queries, targets, i, j, query_index)``.
    """
    if pairing not in PAIRINGS:
        raise ConfigError(f"pairing: expected one of {PAIRINGS}, got {pairing!r}")
    i = int(rng.integers(S.n))
    j = i if S.n == 1 else int(rng.integers(S.n))
    pool = pools[i]
    near = pool.near
    n_src = len(S.clouds[i])
    if B > len(near) or B > len(S.clouds[j]) or (pairing == "shared" and B > n_src):
        raise ConfigError(f"batch size B={B} exceeds pool ({len(near)}) or cloud ({len(S.clouds[j])}) size")
    if pairing == "shared":
        per_point = len(near) // n_src
        pts = rng.choice(n_src, size=B, replace=False)
        qi = pts * per_point + rng.integers(per_point, size=B)
        if len(S.clouds[j]) == n_src:
            return pool.queries[qi], S.clouds[j][pts], i, j, qi
    else:
        qi = near[rng.choice(len(near), size=B, replace=False)]
    ti = rng.choice(len(S.clouds[j]), size=B, replace=False)
    return pool.queries[qi], S.clouds[j][ti], i, j, qi
