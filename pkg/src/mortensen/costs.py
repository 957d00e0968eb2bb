"""Initial cost and running cost of the estimation problem."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .dynamics import ObservationPath
from .fields import VectorFieldSpec
from .geometry import Domain


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class InitialCost:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    params: dict[str, Any] = field(default_factory=dict)

    def __call__(self, x) -> np.ndarray:
        return self.fn(np.asarray(x, float))


def make_initial_cost(cfg: dict[str, Any], domain: Domain) -> InitialCost:
    name = cfg.get("name")
    n = domain.dim
    lo, hi = domain.bounding_box
    if name == "quadratic":
        c = np.broadcast_to(np.asarray(cfg["center"], float), (n,)).copy()
        P0 = np.atleast_2d(np.asarray(cfg["P0"], float))
        if P0.shape != (n, n) or not np.allclose(P0, P0.T) or np.min(np.linalg.eigvalsh(P0)) <= 0:
            raise CostError("P0 must be symmetric positive definite")
        Pinv = np.linalg.inv(P0)
        corners = np.array(np.meshgrid(*[[lo[i], hi[i]] for i in range(n)], indexing="ij")).reshape(n, -1).T
        reach = float(np.max(np.linalg.norm(corners - c, axis=1)))

        def quad(x):
            d = x - c
            return 0.5 * np.einsum("...i,ij,...j->...", d, Pinv, d)

        return InitialCost("quadratic", quad, float(np.linalg.norm(Pinv, 2)) * reach, {"center": c.tolist(), "P0": P0.tolist()})
    if name == "constant":
        v = float(cfg.get("value", 0.0))
        return InitialCost("constant", lambda x: np.full(x.shape[:-1], v), 0.0, {"value": v})
    if name == "polynomial":
        coeffs = np.asarray(cfg["coeffs"], float)
        reach = float(np.max(np.maximum(np.abs(lo), np.abs(hi))))

        def poly(x):
            out = np.zeros_like(x)
            for cc in coeffs[::-1]:
                out = out * x + cc
            return np.sum(out, axis=-1)

        lip = float(np.sqrt(n) * sum(k * abs(cc) * reach ** (k - 1) for k, cc in enumerate(coeffs) if k > 0))
        return InitialCost("polynomial", poly, lip, {"coeffs": coeffs.tolist()})
    raise CostError(f"unknown initial cost {name!r}")


@dataclass(frozen=True)
class CostSpec:
    """psi plus the running cost 1/2|w|^2 + 1/2|ydot(s) - h(s, x)|^2 bound to ``obs``."""

    psi: InitialCost
    obs: ObservationPath

    def misfit(self, vf: VectorFieldSpec, k: int, t: float, x) -> np.ndarray:
        r = self.obs.ydot[k] - vf.h(t, x)
        return 0.5 * np.sum(r * r, axis=-1)

    def running(self, vf: VectorFieldSpec, k: int, t: float, x, w) -> np.ndarray:
        w = np.asarray(w, float)
        return 0.5 * np.sum(w * w, axis=-1) + self.misfit(vf, k, t, x)
