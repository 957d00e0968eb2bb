"""Catalog of drift, diffusion and observation maps.

Every map is evaluated as ``f(t, x)`` with ``x`` of shape ``(..., n)``; the
batch axes are preserved.  Maps built from the catalog are autonomous and
carry a Lipschitz constant valid on the bounding box of the domain they
were built for.  Arbitrary callables can be wrapped with :class:`FieldMap`
directly when a time-dependent field is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .geometry import Domain


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class FieldMap:
    name: str
    fn: Callable[[float, np.ndarray], np.ndarray]
    lipschitz: float
    autonomous: bool = True
    params: dict[str, Any] = field(default_factory=dict)

    def __call__(self, t: float, x) -> np.ndarray:
        return self.fn(t, np.asarray(x, float))


def _poly_eval(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for c in coeffs[::-1]:
        out = out * x + c
    return out


def _poly_lipschitz(coeffs: np.ndarray, radius: float) -> float:
    return float(sum(k * abs(c) * radius ** (k - 1) for k, c in enumerate(coeffs) if k > 0))


def make_drift(cfg: dict[str, Any], domain: Domain) -> FieldMap:
    name = cfg.get("name")
    n = domain.dim
    lo, hi = domain.bounding_box
    reach = float(np.max(np.maximum(np.abs(lo), np.abs(hi))))
    if name == "zero":
        return FieldMap("zero", lambda t, x: np.zeros_like(x), 0.0, params={})
    if name == "constant":
        c = np.broadcast_to(np.asarray(cfg["value"], float), (n,)).copy()
        return FieldMap("constant", lambda t, x: np.broadcast_to(c, x.shape).copy(), 0.0, params={"value": c.tolist()})
    if name == "linear":
        A = np.asarray(cfg["A"], float).reshape(n, n)
        c = np.broadcast_to(np.asarray(cfg.get("offset", 0.0), float), (n,)).copy()
        return FieldMap(
            "linear",
            lambda t, x: x @ A.T + c,
            float(np.linalg.norm(A, 2)),
            params={"A": A.tolist(), "offset": c.tolist()},
        )
    if name == "rotation":
        if n != 2:
            raise CatalogError("rotation drift is two-dimensional")
        rate = float(cfg.get("rate", 1.0))
        pull = float(cfg.get("pull", 0.0))
        center = np.asarray(cfg.get("center", [0.0, 0.0]), float)
        M = np.array([[-pull, -rate], [rate, -pull]])
        return FieldMap(
            "rotation",
            lambda t, x: (x - center) @ M.T,
            float(np.linalg.norm(M, 2)),
            params={"rate": rate, "pull": pull, "center": center.tolist()},
        )
    if name in ("outward_radial", "inward_radial"):
        strength = float(cfg.get("strength", 1.0))
        sign = 1.0 if name == "outward_radial" else -1.0
        center = np.broadcast_to(np.asarray(cfg.get("center", 0.0), float), (n,)).copy()
        # unit radial field; Lipschitz only away from the center
        core = float(cfg.get("core", 0.1))

        def radial(t, x):
            d = x - center
            r = np.linalg.norm(d, axis=-1, keepdims=True)
            return sign * strength * d / np.maximum(r, core)

        return FieldMap(name, radial, strength / core, params={"strength": strength, "center": center.tolist(), "core": core})
    if name == "polynomial":
        coeffs = np.asarray(cfg["coeffs"], float)
        return FieldMap(
            "polynomial",
            lambda t, x: _poly_eval(coeffs, x),
            _poly_lipschitz(coeffs, reach),
            params={"coeffs": coeffs.tolist()},
        )
    raise CatalogError(f"unknown drift {name!r}")


def make_diffusion(cfg: dict[str, Any], domain: Domain) -> tuple[FieldMap, int, float]:
    """Return (sigma map, noise dimension r, gamma0)."""
    name = cfg.get("name", "identity")
    n = domain.dim
    if name == "identity":
        S = np.eye(n)
    elif name == "scalar":
        S = float(cfg["value"]) * np.eye(n)
    elif name == "constant":
        S = np.asarray(cfg["matrix"], float).reshape(n, -1)
    else:
        raise CatalogError(f"unknown diffusion {name!r}")
    r = S.shape[1]
    gamma0 = float(np.min(np.linalg.eigvalsh(S.T @ S)))
    fm = FieldMap(
        name,
        lambda t, x: np.broadcast_to(S, x.shape[:-1] + S.shape),
        0.0,
        params={"matrix": S.tolist()},
    )
    return fm, r, gamma0


def make_observation(cfg: dict[str, Any], domain: Domain) -> tuple[FieldMap, int]:
    """Return (observation map, observation dimension m)."""
    name = cfg.get("name", "identity")
    n = domain.dim
    lo, hi = domain.bounding_box
    reach = float(np.max(np.maximum(np.abs(lo), np.abs(hi))))
    if name == "identity":
        return FieldMap("identity", lambda t, x: x.copy(), 1.0, params={}), n
    if name == "zero":
        m = int(cfg.get("dim", 1))
        return FieldMap("zero", lambda t, x: np.zeros(x.shape[:-1] + (m,)), 0.0, params={"dim": m}), m
    if name == "linear":
        H = np.atleast_2d(np.asarray(cfg["H"], float))
        if H.shape[1] != n:
            raise CatalogError("observation matrix has wrong column count")
        c = np.broadcast_to(np.asarray(cfg.get("offset", 0.0), float), (H.shape[0],)).copy()
        return (
            FieldMap("linear", lambda t, x: x @ H.T + c, float(np.linalg.norm(H, 2)), params={"H": H.tolist(), "offset": c.tolist()}),
            H.shape[0],
        )
    if name == "polynomial":
        coeffs = np.asarray(cfg["coeffs"], float)
        return (
            FieldMap("polynomial", lambda t, x: _poly_eval(coeffs, x), _poly_lipschitz(coeffs, reach), params={"coeffs": coeffs.tolist()}),
            n,
        )
    raise CatalogError(f"unknown observation map {name!r}")


@dataclass(frozen=True)
class VectorFieldSpec:
    """Drift, diffusion and observation maps of a scenario."""

    drift: FieldMap
    diffusion: FieldMap
    observation: FieldMap
    n: int
    r: int
    m: int
    gamma0: float

    @classmethod
    def from_config(cls, cfg: dict[str, Any], domain: Domain) -> "VectorFieldSpec":
        drift = make_drift(cfg.get("drift", {"name": "zero"}), domain)
        sigma, r, gamma0 = make_diffusion(cfg.get("diffusion", {"name": "identity"}), domain)
        obs, m = make_observation(cfg.get("observation", {"name": "identity"}), domain)
        return cls(drift, sigma, obs, domain.dim, r, m, gamma0)

    @property
    def autonomous(self) -> bool:
        return self.drift.autonomous and self.diffusion.autonomous and self.observation.autonomous

    @property
    def identity_noise(self) -> bool:
        """True when sigma is the identity (n == r), as the HJB solver requires."""
        if self.n != self.r:
            return False
        S = np.asarray(self.diffusion(0.0, np.zeros(self.n)))
        return bool(np.allclose(S, np.eye(self.n)))

    def b(self, t: float, x) -> np.ndarray:
        return self.drift(t, x)

    def sigma(self, t: float, x) -> np.ndarray:
        return self.diffusion(t, x)

    def h(self, t: float, x) -> np.ndarray:
        return self.observation(t, x)

    def velocity(self, t: float, x, w) -> np.ndarray:
        """b(t, x) + sigma(t, x) w, broadcasting ``w`` of shape (..., r)."""
        x = np.asarray(x, float)
        S = self.sigma(t, x)
        return self.b(t, x) + np.einsum("...ij,...j->...i", S, np.asarray(w, float))

    def to_config(self) -> dict[str, Any]:
        return {
            "drift": {"name": self.drift.name, **self.drift.params},
            "diffusion": {"name": "constant", "matrix": self.diffusion.params.get("matrix")},
            "observation": {"name": self.observation.name, **self.observation.params},
        }


def validate_noise(vf: VectorFieldSpec, require: bool) -> None:
    """Check the uniform invertibility of sigma^T sigma when required."""
    if require and not vf.gamma0 > 0:
        raise CatalogError("sigma^T sigma is not uniformly invertible (gamma0 <= 0)")
