"""Kalman-Bucy reference for the linear, unconstrained problem.

For b = A x, sigma = Sigma, h = H x and a quadratic psi the cost-to-come is

    V(t, x) = 1/2 (x - xhat(t))^T P(t)^{-1} (x - xhat(t)) + r(t),   r' = 1/2 |ydot - H xhat|^2,

where P solves the Riccati equation and xhat is the Kalman estimator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .costs import InitialCost, make_initial_cost
from .dynamics import ObservationPath, n_steps
from .fields import VectorFieldSpec
from .geometry import Domain


class KalmanError(ValueError):
    pass


@dataclass(frozen=True)
class LinearModel:
    A: np.ndarray
    Sigma: np.ndarray
    H: np.ndarray
    P0: np.ndarray
    x0: np.ndarray

    def __post_init__(self) -> None:
        A = np.atleast_2d(np.asarray(self.A, float))
        n = A.shape[0]
        S = np.asarray(self.Sigma, float).reshape(n, -1)
        H = np.asarray(self.H, float).reshape(-1, n)
        P0 = np.atleast_2d(np.asarray(self.P0, float))
        x0 = np.asarray(self.x0, float).reshape(n)
        if A.shape != (n, n) or P0.shape != (n, n):
            raise KalmanError("A and P0 must be n x n")
        if not np.allclose(P0, P0.T) or np.min(np.linalg.eigvalsh(P0)) <= 0:
            raise KalmanError("P0 must be symmetric positive definite")
        for name, val in (("A", A), ("Sigma", S), ("H", H), ("P0", P0), ("x0", x0)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @classmethod
    def from_config(cls, cfg: dict[str, Any]) -> "LinearModel":
        try:
            return cls(cfg["A"], cfg["Sigma"], cfg["H"], cfg["P0"], cfg["x0"])
        except KeyError as exc:
            raise KalmanError(f"linear model misses {exc.args[0]!r}") from None

    def to_config(self) -> dict[str, Any]:
        return {k: getattr(self, k).tolist() for k in ("A", "Sigma", "H", "P0", "x0")}

    def vector_field(self, domain: Domain) -> VectorFieldSpec:
        return VectorFieldSpec.from_config(
            {
                "drift": {"name": "linear", "A": self.A.tolist()},
                "diffusion": {"name": "constant", "matrix": self.Sigma.tolist()},
                "observation": {"name": "linear", "H": self.H.tolist()},
            },
            domain,
        )

    def initial_cost(self, domain: Domain) -> InitialCost:
        return make_initial_cost({"name": "quadratic", "center": self.x0.tolist(), "P0": self.P0.tolist()}, domain)


def _riccati_rhs(model: LinearModel, P: np.ndarray) -> np.ndarray:
    A, S, H = model.A, model.Sigma, model.H
    return A @ P + P @ A.T + S @ S.T - P.T @ H.T @ H @ P


def _check_pd(P: np.ndarray, step: int) -> None:
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise KalmanError(f"P lost positive definiteness at step {step}") from None


@dataclass(frozen=True)
class RiccatiPath:
    times: np.ndarray
    P: np.ndarray  # (K+1, n, n)


def riccati_solve(model: LinearModel, t_end: float, dt: float, t0: float = 0.0) -> RiccatiPath:
    """Classical RK4 for the Riccati equation, symmetrised after every step."""
    K = n_steps(t0, t_end, dt)
    P = model.P0.copy()
    out = np.empty((K + 1,) + P.shape)
    out[0] = P
    for k in range(K):
        k1 = _riccati_rhs(model, P)
        k2 = _riccati_rhs(model, P + 0.5 * dt * k1)
        k3 = _riccati_rhs(model, P + 0.5 * dt * k2)
        k4 = _riccati_rhs(model, P + dt * k3)
        P = P + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        P = 0.5 * (P + P.T)
        _check_pd(P, k + 1)
        out[k + 1] = P
    return RiccatiPath(t0 + dt * np.arange(K + 1), out)


@dataclass(frozen=True)
class KalmanPath:
    """Estimator, covariance and running misfit integral on a time grid."""

    model: LinearModel
    times: np.ndarray
    xhat: np.ndarray  # (K+1, n)
    P: np.ndarray  # (K+1, n, n)
    offset: np.ndarray  # (K+1,) integral of 1/2 |ydot - H xhat|^2

    def index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise KalmanError(f"time {t} is not on the estimator grid")
        return k

    def cost_to_come(self, t: float, x) -> np.ndarray:
        k = self.index(t)
        return self.cost_at(k, x)

    def cost_at(self, k: int, x) -> np.ndarray:
        x = np.asarray(x, float)
        P = self.P[k]
        try:
            L = np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise KalmanError(f"P(t) is singular at step {k}") from None
        d = (x - self.xhat[k]).reshape(-1, self.model.n)
        z = np.linalg.solve(L, d.T)
        q = 0.5 * np.sum(z * z, axis=0) + self.offset[k]
        return q.reshape(x.shape[:-1])


def kalman_estimate(model: LinearModel, obs: ObservationPath, dt: float | None = None, t_end: float | None = None) -> KalmanPath:
    """Integrate (P, xhat) jointly with RK4; ydot is frozen on each observation interval.

    Rows are returned on the grid of step ``dt`` (default: the observation
    step), which must divide the observation step.
    """
    dt = obs.dt if dt is None else float(dt)
    ratio = obs.dt / dt
    m = int(round(ratio))
    if m < 1 or abs(ratio - m) > 1e-9 * ratio:
        raise KalmanError("dt must divide the observation step")
    if obs.ydot.shape[1] != model.H.shape[0]:
        raise KalmanError("observation dimension differs from H")
    t_end = obs.t1 if t_end is None else float(t_end)
    K = n_steps(obs.t0, t_end, dt)
    if K > obs.steps * m:
        raise KalmanError("t_end exceeds the observation record")
    A, H = model.A, model.H

    def rhs(P, x, y):
        return _riccati_rhs(model, P), A @ x + P @ H.T @ (y - H @ x)

    P = model.P0.copy()
    x = model.x0.copy()
    Ps = np.empty((K + 1,) + P.shape)
    xs = np.empty((K + 1, model.n))
    off = np.zeros(K + 1)
    Ps[0], xs[0] = P, x
    for k in range(K):
        y = obs.ydot[k // m]
        a1, b1 = rhs(P, x, y)
        a2, b2 = rhs(P + 0.5 * dt * a1, x + 0.5 * dt * b1, y)
        a3, b3 = rhs(P + 0.5 * dt * a2, x + 0.5 * dt * b2, y)
        a4, b4 = rhs(P + dt * a3, x + dt * b3, y)
        r0 = y - H @ x
        P = P + dt / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
        P = 0.5 * (P + P.T)
        x = x + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
        _check_pd(P, k + 1)
        r1 = y - H @ x
        off[k + 1] = off[k] + 0.25 * dt * (r0 @ r0 + r1 @ r1)
        Ps[k + 1], xs[k + 1] = P, x
    return KalmanPath(model, obs.t0 + dt * np.arange(K + 1), xs, Ps, off)


def kalman_cost_to_come(model: LinearModel, obs: ObservationPath, t: float, x, dt: float | None = None) -> np.ndarray:
    return kalman_estimate(model, obs, dt).cost_to_come(t, x)


def mortensen_rate(vf: VectorFieldSpec, t: float, xhat, hessian, ydot) -> np.ndarray:
    """Right-hand side b + [Hess V]^{-1} Dh^T (ydot - h) of the recursive observer.

    Only meaningful where V is C^2 near its minimiser with an invertible
    Hessian; ``Dh`` is taken by central differences.
    """
    xhat = np.asarray(xhat, float)
    n = xhat.size
    eps = 1e-6 * max(1.0, float(np.max(np.abs(xhat))))
    Dh = np.stack([(vf.h(t, xhat + eps * e) - vf.h(t, xhat - eps * e)) / (2 * eps) for e in np.eye(n)], axis=-1)
    innov = np.asarray(ydot, float) - vf.h(t, xhat)
    return vf.b(t, xhat) + np.linalg.solve(np.atleast_2d(hessian), Dh.T @ innov)
