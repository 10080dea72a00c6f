"""Analytic shapes with exact signed distances, sized to fit the unit sphere."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import ConfigError


def _central_gradient(sdf, p, h=1e-6):
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    g = np.empty_like(p)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (sdf(p + e) - sdf(p - e)) / (2 * h)
    return g


class _Analytic:
    """Lets an analytic shape stand in for a trained field (``sdf_and_grad``)."""

    def sdf_and_grad(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        return self.sdf(p), self.gradient(p)

    def gradient(self, p):
        return _central_gradient(self.sdf, p)


@dataclass(frozen=True)
class Sphere(_Analytic):
    radius: float = 1.0

    def sdf(self, p):
        return np.linalg.norm(p, axis=-1) - self.radius

    def gradient(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        n = np.linalg.norm(p, axis=1, keepdims=True)
        return p / np.where(n > 0, n, 1.0)

    def sample(self, n, seed=0):
        v = np.random.default_rng(seed).normal(size=(n, 3))
        return self.radius * v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass(frozen=True)
class Cube(_Analytic):
    half: float = 0.55

    def sdf(self, p):
        q = np.abs(p) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def sample(self, n, seed=0):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-self.half, self.half, size=(n, 3))
        axis = rng.integers(3, size=n)
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * self.half
        return pts


@dataclass(frozen=True)
class Torus(_Analytic):
    major: float = 0.65
    minor: float = 0.25

    def sdf(self, p):
        ring = np.linalg.norm(p[..., :2], axis=-1) - self.major
        return np.hypot(ring, p[..., 2]) - self.minor

    def sample(self, n, seed=0):
        # tube angle density is proportional to the local circumference
        rng = np.random.default_rng(seed)
        out = np.empty((0, 3))
        while len(out) < n:
            k = 2 * (n - len(out)) + 16
            theta = rng.uniform(0, 2 * np.pi, k)
            keep = rng.random(k) < (self.major + self.minor * np.cos(theta)) / (self.major + self.minor)
            theta = theta[keep]
            phi = rng.uniform(0, 2 * np.pi, len(theta))
            rr = self.major + self.minor * np.cos(theta)
            out = np.concatenate([out, np.stack([rr * np.cos(phi), rr * np.sin(phi),
                                                 self.minor * np.sin(theta)], axis=1)])
        return out[:n]


SHAPES = {"sphere": Sphere, "cube": Cube, "torus": Torus}


def make_shape(tag: str):
    try:
        return SHAPES[tag]()
    except KeyError:
        raise ConfigError(f"shape: expected one of {sorted(SHAPES)}, got {tag!r}") from None
