"""Chamfer, point-to-mesh, normal consistency and F-score."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .parallel import workers
from .surfacing import Mesh

CONVENTIONS = ("halved", "pooled")
DEFAULT_SAMPLES = 100_000


class MetricError(ValueError):
    pass


def _cloud(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise MetricError(f"{name}: expected an (n, 3) array, got shape {x.shape}")
    if len(x) == 0:
        raise MetricError(f"{name}: point cloud is empty")
    return x


def nearest_distances(A, B) -> np.ndarray:
    """Distance from every point of A to its nearest point in B."""
    return cKDTree(B).query(A, k=1, workers=workers())[0]


def _chamfer(A, B, power, convention, scale):
    A, B = _cloud(A, "A"), _cloud(B, "B")
    if convention not in CONVENTIONS:
        raise MetricError(f"convention: expected one of {CONVENTIONS}, got {convention!r}")
    da = nearest_distances(A, B) ** power
    db = nearest_distances(B, A) ** power
    if convention == "halved":
        value = 0.5 * (da.mean() + db.mean())
    else:
        value = (da.sum() + db.sum()) / (len(da) + len(db))
    return float(value * scale)


def chamfer_l2(A, B, convention: str = "halved", scale: float = 1.0) -> float:
    """Squared-distance Chamfer.

    ``halved``: (mean_A + mean_B) / 2. ``pooled``: mean over both sides' points
    together. ``scale=1e4`` gives table units.
    """
    return _chamfer(A, B, 2, convention, scale)


def chamfer_l1(A, B, convention: str = "halved", scale: float = 1.0) -> float:
    return _chamfer(A, B, 1, convention, scale)


# ---------------------------------------------------------------------------
# exact point-to-triangle distance

def closest_point_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest point to p[i] on triangle (a[i], b[i], c[i]), all (n, 3).

    Region tests over the vertex, edge and face Voronoi regions.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        nonlocal done
        m = mask & ~done
        if m.any():
            out[m] = value(m)
            done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), lambda m: a[m])
        put((d3 >= 0) & (d4 <= d3), lambda m: b[m])
        put((d6 >= 0) & (d5 <= d6), lambda m: c[m])
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0),
            lambda m: a[m] + (d1[m] / (d1[m] - d3[m]))[:, None] * ab[m])
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0),
            lambda m: a[m] + (d2[m] / (d2[m] - d6[m]))[:, None] * ac[m])
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
            lambda m: b[m] + ((d4[m] - d3[m]) / ((d4[m] - d3[m]) + (d5[m] - d6[m])))[:, None] * (c[m] - b[m]))
        denom = va + vb + vc
        put(np.ones(len(p), dtype=bool),
            lambda m: a[m] + (vb[m] / denom[m])[:, None] * ab[m] + (vc[m] / denom[m])[:, None] * ac[m])
    return out


def point_mesh_distances(A, M: Mesh, k: int = 8, chunk: int = 4096) -> np.ndarray:
    """Exact distance from every point to the mesh surface.

    An upper bound from the k triangles with the nearest centroids limits the
    candidate set: a triangle can only be closer if its centroid lies within
    bound + its circumradius-like extent.
    """
    A = _cloud(A, "A")
    if M.empty:
        raise MetricError("mesh is empty")
    tri = M.vertices[M.triangles]
    cen = tri.mean(axis=1)
    extent = np.linalg.norm(tri - cen[:, None], axis=2).max(axis=1)
    rmax = float(extent.max())
    tree = cKDTree(cen)
    k = min(k, len(cen))
    out = np.empty(len(A))
    for s in range(0, len(A), chunk):
        P = A[s:s + chunk]
        _, idx = tree.query(P, k=k, workers=workers())
        idx = idx.reshape(len(P), k)
        rep = np.repeat(P, k, axis=0)
        t = tri[idx.ravel()]
        d = np.linalg.norm(rep - closest_point_on_triangles(rep, t[:, 0], t[:, 1], t[:, 2]), axis=1)
        bound = d.reshape(len(P), k).min(axis=1)
        cand = tree.query_ball_point(P, bound + rmax)
        lens = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(P))
        flat = np.concatenate([np.asarray(c, dtype=np.int64) for c in cand]) if lens.sum() else np.zeros(0, np.int64)
        owner = np.repeat(np.arange(len(P)), lens)
        t = tri[flat]
        dc = np.linalg.norm(P[owner] - closest_point_on_triangles(P[owner], t[:, 0], t[:, 1], t[:, 2]), axis=1)
        best = bound.copy()
        np.minimum.at(best, owner, dc)
        out[s:s + chunk] = best
    return out


def point_to_mesh(A, M: Mesh) -> float:
    """Mean exact distance from points to the mesh."""
    return float(point_mesh_distances(A, M).mean())


# ---------------------------------------------------------------------------
# surface sampling

def sample_surface(M: Mesh, n: int, seed: int = 0):
    """Area-uniform stratified samples: ``(points, normals)``.

    Sample k falls at cumulative-area position (k + u_k) / n, so every
    triangle receives its area share to within one sample.
    """
    if M.empty:
        raise MetricError("mesh is empty")
    rng = np.random.default_rng(seed)
    area = M.face_areas()
    cdf = np.cumsum(area)
    total = cdf[-1]
    if total <= 0:
        raise MetricError("mesh has zero surface area")
    pos = (np.arange(n) + rng.random(n)) / n * total
    face = np.minimum(np.searchsorted(cdf, pos, side="right"), len(cdf) - 1)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    tri = M.vertices[M.triangles[face]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return pts, M.face_normals()[face]


def normal_consistency(M_pred: Mesh, M_gt: Mesh, n: int = DEFAULT_SAMPLES, seed: int = 0) -> float:
    """Mean |cos| between sampled normals and their nearest counterparts, both ways."""
    pa, na = sample_surface(M_pred, n, seed)
    pb, nb = sample_surface(M_gt, n, seed + 1)
    _, ia = cKDTree(pb).query(pa, workers=workers())
    _, ib = cKDTree(pa).query(pb, workers=workers())
    ca = np.abs(np.einsum("ij,ij->i", na, nb[ia]))
    cb = np.abs(np.einsum("ij,ij->i", nb, na[ib]))
    return float(0.5 * (ca.mean() + cb.mean()))


def precision_recall(M_pred: Mesh, M_gt: Mesh, tau: float, n: int = DEFAULT_SAMPLES, seed: int = 0):
    if tau <= 0:
        raise MetricError("tau must be > 0")
    pa, _ = sample_surface(M_pred, n, seed)
    pb, _ = sample_surface(M_gt, n, seed + 1)
    precision = float(np.mean(nearest_distances(pa, pb) < tau))
    recall = float(np.mean(nearest_distances(pb, pa) < tau))
    return precision, recall


def f_score(M_pred: Mesh, M_gt: Mesh, tau: float = 0.01, n: int = DEFAULT_SAMPLES, seed: int = 0) -> float:
    """Harmonic mean of precision and recall at absolute distance ``tau``."""
    p, r = precision_recall(M_pred, M_gt, tau, n, seed)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def metric_record(metric: str, value: float, convention: str | None = None, scale: float = 1.0) -> dict:
    return {"metric": metric, "convention": convention, "scale": scale, "value": float(value)}
