"""Zero level set extraction and projection of points onto it."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from skimage.measure import marching_cubes

from .field import ConfigError, FieldParams, sdf, sdf_and_grad
from .objective import EPS_GRAD
from .parallel import pool_size

DEGENERATE_AREA = 1e-12
NODE_MARGIN = 1e-3
DEFAULT_BBOX = (np.full(3, -1.05), np.full(3, 1.05))  # the [-1, 1]^3 working cube grown by 5%


@dataclass
class Mesh:
    vertices: np.ndarray   # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    meta: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self._cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return c / np.where(n > 0, n, 1.0)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def _cross(self):
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and how many triangles use each."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        edges, _ = self.edges()
        return int(len(used) - len(edges) + len(self.triangles))

    def is_closed(self) -> bool:
        """Every edge is shared by exactly two triangles."""
        if self.empty:
            return False
        _, counts = self.edges()
        return bool(np.all(counts == 2))

    def transformed(self, scale: float, offset) -> "Mesh":
        return Mesh(self.vertices * scale + np.asarray(offset), self.triangles.copy(), dict(self.meta))


def _check_bbox(bbox):
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bbox)
    if np.any(hi <= lo):
        raise ConfigError("bbox: upper corner must exceed lower corner on every axis")
    return lo, hi


def grid_points(resolution: int, bbox=DEFAULT_BBOX):
    lo, hi = _check_bbox(bbox)
    axes = [np.linspace(lo[d], hi[d], resolution + 1) for d in range(3)]
    return axes, np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def mesh_from_volume(values: np.ndarray, bbox=DEFAULT_BBOX) -> Mesh:
    """Marching cubes over a sampled volume of shape (n+1, n+1, n+1).

    Samples within ``1e-3`` of a cell width from zero are pushed out to that
    margin, keeping their sign. A node lying on the zero set otherwise yields
    collinear zero-area triangles, and removing those opens cracks.
    """
    lo, hi = _check_bbox(bbox)
    vol = np.array(values, dtype=np.float64)
    spacing = (hi - lo) / (np.array(vol.shape) - 1)
    margin = NODE_MARGIN * spacing.min()
    near = np.abs(vol) < margin
    vol[near] = np.where(vol[near] < 0.0, -margin, margin)
    if not (vol.min() < 0.0 < vol.max()):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), {"empty": True})
    verts, faces, _, _ = marching_cubes(vol, level=0.0, spacing=tuple(spacing), method="lewiner",
                                        allow_degenerate=True, gradient_direction="descent")
    mesh = Mesh(verts.astype(np.float64) + lo, faces.astype(np.int64), {"empty": False})
    keep = mesh.face_areas() > DEGENERATE_AREA
    if not keep.all():
        mesh.triangles = mesh.triangles[keep]
    mesh.meta["dropped_degenerate"] = int((~keep).sum())
    return mesh


def evaluate_grid(params: FieldParams, pts, chunk: int = 65536) -> np.ndarray:
    """sdf over slabs of grid points; slabs run on a thread pool, results keep their order."""
    slabs = [pts[s:s + chunk] for s in range(0, len(pts), chunk)]
    n = pool_size()
    if n <= 1 or len(slabs) == 1:
        return np.concatenate([sdf(params, s, chunk=chunk) for s in slabs])
    with ThreadPoolExecutor(n) as ex:
        return np.concatenate(list(ex.map(lambda s: sdf(params, s, chunk=chunk), slabs)))


def extract_mesh(params: FieldParams, resolution: int = 256, bbox=DEFAULT_BBOX,
                 chunk: int = 65536) -> Mesh:
    """Triangle mesh of {f = 0} inside ``bbox``; normals point along grad f."""
    if resolution < 8:
        raise ConfigError(f"resolution must be >= 8, got {resolution}")
    _, pts = grid_points(resolution, bbox)
    vals = evaluate_grid(params, pts, chunk).reshape((resolution + 1,) * 3)
    mesh = mesh_from_volume(vals, bbox)
    mesh.meta["resolution"] = resolution
    return mesh


def mesh_from_function(fn, resolution: int = 128, bbox=DEFAULT_BBOX) -> Mesh:
    """Same as ``extract_mesh`` for any vectorised callable (P, 3) -> (P,)."""
    if resolution < 8:
        raise ConfigError(f"resolution must be >= 8, got {resolution}")
    _, pts = grid_points(resolution, bbox)
    return mesh_from_volume(np.asarray(fn(pts)).reshape((resolution + 1,) * 3), bbox)


def project_to_zero_set(params: FieldParams, points, steps: int = 1, return_flags: bool = False):
    """Apply the pull operator ``steps`` times.

    Points where |grad f| falls below the degeneracy threshold stop moving and
    are flagged. ``params`` may also be any object with its own
    ``sdf_and_grad(points)``, such as an analytic shape.
    """
    evaluate = getattr(params, "sdf_and_grad", None) or (lambda p: sdf_and_grad(params, p))
    x = np.array(points, dtype=np.float64)
    flagged = np.zeros(len(x), dtype=bool)
    for _ in range(steps):
        d, g = evaluate(x)
        d = d.astype(np.float64)
        g = g.astype(np.float64)
        gn = np.linalg.norm(g, axis=1)
        bad = gn < EPS_GRAD
        flagged |= bad
        ok = ~flagged
        x[ok] -= (d[ok] / gn[ok])[:, None] * g[ok]
    return (x, flagged) if return_flags else x
