"""Reflected, penalised and stochastic trajectories and synthetic observations.

Disturbances are piecewise constant: sample ``k`` acts on ``[t_k, t_{k+1})``.
A trajectory over ``K`` steps has ``K + 1`` states, one per grid node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .fields import VectorFieldSpec
from .geometry import Domain

FLOAT_FMT = "%.17g"


class IntegrationError(ValueError):
    pass


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seeded generator; ``stream`` selects an independent child stream."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream)))


@dataclass(frozen=True)
class DisturbancePath:
    t0: float
    dt: float
    samples: np.ndarray  # (K, r)

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise IntegrationError("dt must be positive")
        s = np.asarray(self.samples, float)
        if s.ndim == 1:
            s = s[:, None]
        object.__setattr__(self, "samples", s)

    @classmethod
    def zeros(cls, t0: float, t1: float, dt: float, r: int) -> "DisturbancePath":
        return cls(t0, dt, np.zeros((n_steps(t0, t1, dt), r)))

    @classmethod
    def constant(cls, t0: float, t1: float, dt: float, value) -> "DisturbancePath":
        v = np.atleast_1d(np.asarray(value, float))
        return cls(t0, dt, np.tile(v, (n_steps(t0, t1, dt), 1)))

    @property
    def steps(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def t1(self) -> float:
        return self.t0 + self.steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps)

    def l2_norm(self) -> float:
        return math.sqrt(self.dt * float(np.sum(self.samples**2)))

    def refine(self, factor: int) -> "DisturbancePath":
        """Same function on a grid ``factor`` times finer."""
        return DisturbancePath(self.t0, self.dt / factor, np.repeat(self.samples, factor, axis=0))


def n_steps(t0: float, t1: float, dt: float) -> int:
    if not dt > 0:
        raise IntegrationError("dt must be positive")
    k = (t1 - t0) / dt
    K = int(round(k))
    if K <= 0 or abs(k - K) > 1e-9 * max(1.0, k):
        raise IntegrationError(f"horizon {t1 - t0} is not a positive multiple of dt={dt}")
    return K


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray  # (K+1,)
    states: np.ndarray  # (K+1, n)
    disturbance: DisturbancePath
    mode: str = "reflected"
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return self.disturbance.dt

    def to_csv(self, path) -> None:
        n = self.states.shape[1]
        w = self.disturbance.samples
        w_rows = np.vstack([w, w[-1:]])  # final node repeats the last piece
        header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"w{j + 1}" for j in range(w.shape[1])]
        data = np.column_stack([self.times, self.states, w_rows])
        write_csv(path, header, data)

    @classmethod
    def from_csv(cls, path, mode: str = "reflected") -> "Trajectory":
        header, data = read_csv(path)
        n = sum(1 for h in header if h.startswith("x"))
        times = data[:, 0]
        dt = float(times[1] - times[0])
        w = DisturbancePath(float(times[0]), dt, data[:-1, 1 + n :])
        return cls(times, data[:, 1 : 1 + n], w, mode)


@dataclass(frozen=True)
class ObservationPath:
    t0: float
    dt: float
    ydot: np.ndarray  # (K, m), piecewise constant

    def __post_init__(self) -> None:
        y = np.asarray(self.ydot, float)
        if y.ndim == 1:
            y = y[:, None]
        if not np.all(np.isfinite(y)):
            raise IntegrationError("observation samples must be finite")
        object.__setattr__(self, "ydot", y)

    @property
    def steps(self) -> int:
        return self.ydot.shape[0]

    @property
    def t1(self) -> float:
        return self.t0 + self.steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps)

    def at(self, t: float) -> np.ndarray:
        """Piecewise-constant value at time ``t`` (right-continuous)."""
        k = int(math.floor((t - self.t0) / self.dt + 1e-9))
        return self.ydot[min(max(k, 0), self.steps - 1)]

    def to_csv(self, path) -> None:
        m = self.ydot.shape[1]
        write_csv(path, ["t"] + [f"ydot{j + 1}" for j in range(m)], np.column_stack([self.times, self.ydot]))

    @classmethod
    def from_csv(cls, path) -> "ObservationPath":
        _, data = read_csv(path)
        dt = float(data[1, 0] - data[0, 0]) if data.shape[0] > 1 else 1.0
        return cls(float(data[0, 0]), dt, data[:, 1:])


def write_csv(path, header: list[str], data: np.ndarray) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, np.atleast_2d(data), fmt=FLOAT_FMT, delimiter=",")


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


# -- array-level integrators (batched over paths) --------------------------


def _check_start(d: Domain, x0: np.ndarray) -> None:
    if np.any(d.distance(x0) > d.tol_boundary):
        raise IntegrationError("initial state lies outside the closed domain")


def reflected_paths(vf: VectorFieldSpec, d: Domain, x0, w: np.ndarray, t0: float, dt: float, substeps: int = 1) -> np.ndarray:
    """Projected Euler for a batch: ``x0`` (P, n), ``w`` (K, P, r) -> (K+1, P, n)."""
    if not dt > 0:
        raise IntegrationError("dt must be positive")
    x = d.project(np.asarray(x0, float))
    K = w.shape[0]
    out = np.empty((K + 1,) + x.shape)
    out[0] = x
    h = dt / substeps
    for k in range(K):
        for s in range(substeps):
            t = t0 + k * dt + s * h
            x = d.project(x + h * vf.velocity(t, x, w[k]))
        out[k + 1] = x
    return out


def penalty_substeps(dt: float, kappa: float, max_kdt: float = 0.5) -> int:
    return max(1, int(math.ceil(dt * kappa / max_kdt - 1e-12)))


def penalty_flow(d: Domain, x: np.ndarray, v: np.ndarray, dt: float, kappa: float, max_kdt: float = 0.5) -> np.ndarray:
    """One step of x' = v - kappa (x - P x) with ``v`` frozen over the step.

    The stiff penalty is sub-stepped with explicit Euler so that
    ``h * kappa <= max_kdt``; inside the domain this is exactly ``x + dt v``.
    """
    m = penalty_substeps(dt, kappa, max_kdt)
    h = dt / m
    for _ in range(m):
        x = x + h * (v - kappa * (x - d.project(x)))
    return x


def penalty_flow_inverse(d: Domain, y: np.ndarray, v: np.ndarray, dt: float, kappa: float, max_kdt: float = 0.5) -> np.ndarray:
    """Exact inverse of :func:`penalty_flow` for a given frozen ``v``.

    Each sub-step is ``x -> P x + (1 - h kappa)(x - P x) + h v``; the map
    ``x -> P x + c (x - P x)`` keeps the projection, so it inverts in closed form.
    """
    m = penalty_substeps(dt, kappa, max_kdt)
    h = dt / m
    shrink = 1.0 - h * kappa
    for _ in range(m):
        u = y - h * v
        pu = d.project(u)
        y = pu + (u - pu) / shrink
    return y


def penalized_paths(vf: VectorFieldSpec, d: Domain, x0, w: np.ndarray, t0: float, dt: float, kappa: float, max_kdt: float = 0.5) -> np.ndarray:
    """Euler on x' = b + sigma w - kappa (x - P x).

    The smooth velocity is evaluated once per grid step and the stiff
    penalty is sub-stepped so that ``h * kappa <= max_kdt``.
    """
    if not kappa > 0:
        raise IntegrationError("kappa must be positive")
    if not dt > 0:
        raise IntegrationError("dt must be positive")
    x = np.array(x0, float)
    K = w.shape[0]
    out = np.empty((K + 1,) + x.shape)
    out[0] = x
    for k in range(K):
        x = penalty_flow(d, x, vf.velocity(t0 + k * dt, x, w[k]), dt, kappa, max_kdt)
        out[k + 1] = x
    return out


def reflected_sde_paths(vf: VectorFieldSpec, d: Domain, x0, epsilon: float, seed: int, dt: float, steps: int, t0: float = 0.0) -> np.ndarray:
    """Projected Euler-Maruyama; path ``i`` draws from child stream ``i`` of ``seed``."""
    if epsilon < 0:
        raise IntegrationError("epsilon must be nonnegative")
    if not dt > 0:
        raise IntegrationError("dt must be positive")
    x = np.atleast_2d(np.asarray(x0, float)).copy()
    P = x.shape[0]
    xi = np.stack([make_rng(seed, i).standard_normal((steps, vf.r)) for i in range(P)], axis=1)
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    scale = math.sqrt(epsilon * dt)
    for k in range(steps):
        t = t0 + k * dt
        S = vf.sigma(t, x)
        x = d.project(x + dt * vf.b(t, x) + scale * np.einsum("...ij,...j->...i", S, xi[k]))
        out[k + 1] = x
    return out


# -- public single-path API -------------------------------------------------


def integrate_reflected(vf: VectorFieldSpec, d: Domain, x0, w: DisturbancePath, substeps: int = 1) -> Trajectory:
    x0 = np.asarray(x0, float).reshape(1, -1)
    _check_start(d, x0)
    states = reflected_paths(vf, d, x0, w.samples[:, None, :], w.t0, w.dt, substeps)[:, 0]
    times = w.t0 + w.dt * np.arange(w.steps + 1)
    return Trajectory(times, states, w, "reflected", {"substeps": substeps})


def integrate_penalized(vf: VectorFieldSpec, d: Domain, x0, w: DisturbancePath, kappa: float, max_kdt: float = 0.5) -> Trajectory:
    x0 = np.asarray(x0, float).reshape(1, -1)
    states = penalized_paths(vf, d, x0, w.samples[:, None, :], w.t0, w.dt, kappa, max_kdt)[:, 0]
    times = w.t0 + w.dt * np.arange(w.steps + 1)
    return Trajectory(times, states, w, "penalized", {"kappa": kappa})


def integrate_reflected_sde(vf: VectorFieldSpec, d: Domain, x0, epsilon: float, seed: int, dt: float, t_end: float, t0: float = 0.0) -> Trajectory:
    x0 = np.asarray(x0, float).reshape(1, -1)
    _check_start(d, x0)
    K = n_steps(t0, t_end, dt)
    states = reflected_sde_paths(vf, d, x0, epsilon, seed, dt, K, t0)[:, 0]
    times = t0 + dt * np.arange(K + 1)
    return Trajectory(times, states, DisturbancePath.zeros(t0, t_end, dt, vf.r), "sde", {"epsilon": epsilon, "seed": seed})


def synthesize_observation(traj: Trajectory, vf: VectorFieldSpec, noise: DisturbancePath) -> ObservationPath:
    """ydot_k = h(t_k, x_k) + nu_k on the trajectory grid."""
    K = traj.states.shape[0] - 1
    if noise.steps != K or not math.isclose(noise.dt, traj.dt, rel_tol=1e-12) or not math.isclose(noise.t0, traj.times[0], abs_tol=1e-12):
        raise IntegrationError("observation noise grid does not match the trajectory grid")
    if noise.dim != vf.m:
        raise IntegrationError("observation noise has the wrong dimension")
    hx = np.stack([vf.h(traj.times[k], traj.states[k]) for k in range(K)])
    return ObservationPath(noise.t0, noise.dt, hx + noise.samples)


def twin_experiment(
    vf: VectorFieldSpec,
    d: Domain,
    x0,
    t_end: float,
    dt: float,
    seed: int,
    process_noise: float = 0.0,
    obs_noise: float = 0.0,
    t0: float = 0.0,
    process_bias=0.0,
) -> tuple[Trajectory, ObservationPath]:
    """Truth trajectory driven by Gaussian disturbance samples, plus noisy observations.

    ``process_bias`` is a constant added to every disturbance sample.
    """
    K = n_steps(t0, t_end, dt)
    bias = np.broadcast_to(np.asarray(process_bias, float), (vf.r,))
    w = DisturbancePath(t0, dt, bias + process_noise * make_rng(seed, 0).standard_normal((K, vf.r)))
    nu = DisturbancePath(t0, dt, obs_noise * make_rng(seed, 1).standard_normal((K, vf.m)))
    traj = integrate_reflected(vf, d, x0, w)
    return traj, synthesize_observation(traj, vf, nu)


def smooth_disturbance(rng: np.random.Generator, t0: float, t1: float, dt: float, r: int, amplitude: float = 2.0, modes: int = 3) -> DisturbancePath:
    """Random offset plus a few random sinusoids, sampled at left grid points."""
    K = n_steps(t0, t1, dt)
    t = t0 + dt * np.arange(K)
    T = t1 - t0
    samples = np.tile(rng.uniform(-amplitude, amplitude, r), (K, 1))
    for j in range(1, modes + 1):
        a = rng.normal(0.0, amplitude / j, r)
        phase = rng.uniform(0, 2 * np.pi, r)
        samples += a * np.sin(2 * np.pi * j * t[:, None] / T + phase)
    return DisturbancePath(t0, dt, samples)


def holder_quotient(times: np.ndarray, states: np.ndarray, exponent: float = 0.5, chunk: int = 512) -> float:
    """max over node pairs of |x(r) - x(s)| / |r - s|^exponent."""
    states = np.asarray(states, float).reshape(len(times), -1)
    best = 0.0
    K = len(times)
    for start in range(0, K, chunk):
        stop = min(start + chunk, K)
        dx = np.linalg.norm(states[start:stop, None, :] - states[None, :, :], axis=-1)
        dtm = np.abs(times[start:stop, None] - times[None, :])
        mask = dtm > 0
        if np.any(mask):
            best = max(best, float(np.max(dx[mask] / dtm[mask] ** exponent)))
    return best
