"""Bounded convex domains with closed-form projection.

Three shapes are supported: intervals, axis-aligned boxes and Euclidean
balls.  All queries accept either a single point of shape ``(n,)`` or a
batch of points of shape ``(..., n)`` and are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

KINDS = ("interval", "box", "ball")


class DomainError(ValueError):
    """Raised for invalid domain parameters or out-of-tolerance queries."""


@dataclass(frozen=True)
class Domain:
    """A bounded convex set ``G``.

    Use the :meth:`interval`, :meth:`box` and :meth:`ball` constructors
    rather than building instances by hand.  For intervals and boxes
    ``lower``/``upper`` hold the bounds; for balls ``center``/``radius``.
    """

    kind: str
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    center: np.ndarray | None = None
    radius: float | None = None
    tol_boundary: float = field(init=False)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DomainError(f"unknown domain kind {self.kind!r}")
        if self.kind == "ball":
            if self.center is None or self.radius is None:
                raise DomainError("ball needs center and radius")
            if not self.radius > 0:
                raise DomainError("ball radius must be positive")
            object.__setattr__(self, "center", np.asarray(self.center, float).reshape(-1))
        else:
            lo = np.asarray(self.lower, float).reshape(-1)
            hi = np.asarray(self.upper, float).reshape(-1)
            if lo.shape != hi.shape or lo.size == 0:
                raise DomainError("box bounds must have matching nonzero length")
            if not np.all(hi > lo):
                raise DomainError("box edges must have positive length")
            if self.kind == "interval" and lo.size != 1:
                raise DomainError("interval must be one-dimensional")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "tol_boundary", 1e-9 * self.diameter)

    # -- constructors -------------------------------------------------
    @classmethod
    def interval(cls, a: float, b: float) -> "Domain":
        return cls("interval", lower=np.array([a], float), upper=np.array([b], float))

    @classmethod
    def box(cls, lower, upper) -> "Domain":
        return cls("box", lower=np.asarray(lower, float), upper=np.asarray(upper, float))

    @classmethod
    def ball(cls, center, radius: float) -> "Domain":
        return cls("ball", center=np.asarray(center, float), radius=float(radius))

    @classmethod
    def from_config(cls, cfg: dict[str, Any]) -> "Domain":
        kind = cfg.get("kind")
        try:
            if kind == "interval":
                return cls.interval(cfg["a"], cfg["b"])
            if kind == "box":
                return cls.box(cfg["lower"], cfg["upper"])
            if kind == "ball":
                return cls.ball(cfg["center"], cfg["radius"])
        except KeyError as exc:
            raise DomainError(f"domain {kind!r} missing parameter {exc}") from None
        raise DomainError(f"unknown domain kind {kind!r}")

    def to_config(self) -> dict[str, Any]:
        if self.kind == "interval":
            return {"kind": "interval", "a": float(self.lower[0]), "b": float(self.upper[0])}
        if self.kind == "box":
            return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}

    # -- basic attributes ---------------------------------------------
    @property
    def dim(self) -> int:
        return self.center.size if self.kind == "ball" else self.lower.size

    @property
    def diameter(self) -> float:
        if self.kind == "ball":
            return 2.0 * self.radius
        return float(np.linalg.norm(self.upper - self.lower))

    @property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "ball":
            return self.center - self.radius, self.center + self.radius
        return self.lower.copy(), self.upper.copy()

    # -- queries --------------------------------------------------------
    def _as_points(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if x.ndim == 0:
            x = x.reshape(1)
        if x.shape[-1] != self.dim:
            raise DomainError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        return x

    def project(self, x) -> np.ndarray:
        """Nearest point of the closed set (orthogonal projection)."""
        x = self._as_points(x)
        if self.kind == "ball":
            d = x - self.center
            r = np.linalg.norm(d, axis=-1, keepdims=True)
            scale = np.where(r > self.radius, self.radius / np.where(r > 0, r, 1.0), 1.0)
            return self.center + d * scale
        return np.clip(x, self.lower, self.upper)

    def distance(self, x) -> np.ndarray:
        """Euclidean distance to the closed set (zero inside)."""
        x = self._as_points(x)
        return np.linalg.norm(x - self.project(x), axis=-1)

    def boundary_distance(self, x) -> np.ndarray:
        """Distance to the boundary, for points of the closed set or outside."""
        x = self._as_points(x)
        if self.kind == "ball":
            return np.abs(np.linalg.norm(x - self.center, axis=-1) - self.radius)
        outside = self.distance(x)
        inner = np.min(np.minimum(x - self.lower, self.upper - x), axis=-1)
        return np.where(outside > 0, outside, np.maximum(inner, 0.0))

    def contains(self, x, tol: float | None = None) -> np.ndarray:
        tol = self.tol_boundary if tol is None else tol
        return self.distance(x) <= tol

    def nearest_boundary_point(self, x) -> np.ndarray:
        """Closest point of the boundary."""
        x = self._as_points(x)
        if self.kind == "ball":
            d = x - self.center
            r = np.linalg.norm(d, axis=-1, keepdims=True)
            safe = np.where(r > 0, r, 1.0)
            unit = np.where(r > 0, d / safe, np.eye(self.dim)[0])
            return self.center + self.radius * unit
        p = self.project(x)
        inside = self.distance(x) <= 0
        # interior points: push the closest coordinate onto its face
        gap_lo = p - self.lower
        gap_hi = self.upper - p
        gaps = np.concatenate([gap_lo, gap_hi], axis=-1)
        idx = np.argmin(gaps, axis=-1)
        q = p.copy()
        n = self.dim
        flat_q = q.reshape(-1, n)
        flat_idx = idx.reshape(-1)
        flat_in = np.broadcast_to(inside, idx.shape).reshape(-1)
        for row in np.nonzero(flat_in)[0]:
            j = flat_idx[row]
            if j < n:
                flat_q[row, j] = self.lower[j]
            else:
                flat_q[row, j - n] = self.upper[j - n]
        return flat_q.reshape(q.shape)

    def outward_normal(self, x) -> np.ndarray:
        """Unit outward normal at boundary points.

        Box corners (several active faces) get the normalised sum of the
        active face normals.  Raises :class:`DomainError` for points
        farther than ``tol_boundary`` from the boundary.
        """
        x = self._as_points(x)
        if np.any(self.boundary_distance(x) > self.tol_boundary):
            raise DomainError("outward_normal queried away from the boundary")
        if self.kind == "ball":
            d = x - self.center
            return d / np.linalg.norm(d, axis=-1, keepdims=True)
        tol = self.tol_boundary
        raw = (np.abs(x - self.upper) <= tol).astype(float) - (np.abs(x - self.lower) <= tol).astype(float)
        return raw / np.linalg.norm(raw, axis=-1, keepdims=True)

    def normal_cone_directions(self, x) -> list[np.ndarray]:
        """Unit generators of the normal cone at a boundary point.

        For smooth boundaries this is the single outward normal; at box
        corners it holds every active face normal plus their normalised sum.
        """
        x = self._as_points(x).reshape(-1)
        nrm = self.outward_normal(x)
        if self.kind == "ball":
            return [nrm]
        tol = self.tol_boundary
        faces = []
        for j in range(self.dim):
            e = np.zeros(self.dim)
            if abs(x[j] - self.upper[j]) <= tol:
                e[j] = 1.0
                faces.append(e)
            elif abs(x[j] - self.lower[j]) <= tol:
                e[j] = -1.0
                faces.append(e)
        if len(faces) <= 1:
            return [nrm]
        return faces + [nrm]

    def signed_queries(self, x) -> dict[str, Any]:
        """Distance and interior/boundary flags for one point."""
        x = self._as_points(x).reshape(-1)
        dist = float(self.distance(x))
        on_boundary = bool(self.boundary_distance(x) <= self.tol_boundary)
        return {
            "dist_to_set": dist,
            "in_interior": bool(dist == 0.0 and not on_boundary),
            "on_boundary": on_boundary,
        }

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Uniform samples from the closed set (rejection for balls)."""
        lo, hi = self.bounding_box
        if self.kind != "ball":
            return rng.uniform(lo, hi, size=(size, self.dim))
        out = np.empty((0, self.dim))
        while out.shape[0] < size:
            cand = rng.uniform(lo, hi, size=(2 * size, self.dim))
            out = np.vstack([out, cand[self.distance(cand) == 0]])
        return out[:size]

    def sample_boundary(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "ball":
            g = rng.standard_normal((size, self.dim))
            return self.center + self.radius * g / np.linalg.norm(g, axis=1, keepdims=True)
        pts = self.sample(rng, size)
        face = rng.integers(0, 2 * self.dim, size=size)
        axis = face % self.dim
        rows = np.arange(size)
        pts[rows, axis] = np.where(face < self.dim, self.lower[axis], self.upper[axis])
        return pts
