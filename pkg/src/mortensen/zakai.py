"""Pathwise reflected Zakai equation in one dimension, its dual and the Laplace functional.

The unnormalised density solves

    dq/dt = d/dx [ -q b + (eps/2) dq/dx ] - (1 / 2 eps) |ydot - h|^2 q

on an interval with zero total flux at both walls.  One time step is split
symmetrically: half a step of the exact reaction factor, explicit upwind
advection, implicit diffusion, then the other half of the reaction.
Rows are stored as ``values * exp(logscale)`` with power-of-two rescaling,
so densities far below the float range stay representable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import logsumexp

from .costs import InitialCost
from .dynamics import ObservationPath, write_csv
from .fields import VectorFieldSpec
from .geometry import Domain

LN2 = math.log(2.0)


class ZakaiError(ValueError):
    pass


class StabilityError(ZakaiError):
    pass


@dataclass(frozen=True)
class CellGrid:
    """``cells`` equal cells on [a, b]; unknowns live at the cell centres."""

    a: float
    b: float
    cells: int

    def __post_init__(self) -> None:
        if not self.b > self.a:
            raise ZakaiError("need a < b")
        if self.cells < 3:
            raise ZakaiError("need at least three cells")

    @classmethod
    def on(cls, d: Domain, cells: int) -> "CellGrid":
        if d.dim != 1:
            raise ZakaiError("the Zakai solver is one-dimensional")
        lo, hi = d.bounding_box
        return cls(float(lo[0]), float(hi[0]), int(cells))

    @property
    def dx(self) -> float:
        return (self.b - self.a) / self.cells

    @property
    def centers(self) -> np.ndarray:
        return self.a + self.dx * (np.arange(self.cells) + 0.5)

    @property
    def faces(self) -> np.ndarray:
        """Interior faces only (the walls carry zero flux)."""
        return self.a + self.dx * np.arange(1, self.cells)


@dataclass(frozen=True)
class FilterDensity:
    grid: CellGrid
    times: np.ndarray
    values: np.ndarray  # (K+1, N), scaled
    logscale: np.ndarray  # (K+1,), natural log of the row scale
    epsilon: float
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def log_density(self, k: int) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.values[k]) + self.logscale[k]

    def density(self, k: int) -> np.ndarray:
        return np.exp(self.log_density(k))

    def log_transform(self, k: int) -> np.ndarray:
        """V^eps = -eps log q at the cell centres (+inf where q underflowed)."""
        return -self.epsilon * self.log_density(k)

    def log_mass(self, k: int) -> float:
        row = self.values[k]
        if not np.any(row > 0):
            raise ZakaiError(f"row {k} is identically zero")
        return float(math.log(np.sum(row) * self.grid.dx) + self.logscale[k])

    def to_csv(self, path) -> None:
        N = self.grid.cells
        T = len(self.times)
        q = np.stack([self.density(k) for k in range(T)])
        data = np.column_stack([np.repeat(self.times, N), np.tile(self.grid.centers, T), q.reshape(-1)])
        write_csv(path, ["t", "x", "qtilde"], data)


@dataclass(frozen=True)
class BackwardField:
    """Solution of the dual backward equation on [0, t], rows at increasing times."""

    grid: CellGrid
    times: np.ndarray
    values: np.ndarray
    logscale: np.ndarray
    epsilon: float


# -- test functions -----------------------------------------------------------


@dataclass(frozen=True)
class LaplaceProbe:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    params: dict[str, Any]
    epsilons: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        e = np.asarray(self.epsilons, float)
        if e.size and (np.any(e <= 0) or np.any(np.diff(e) >= 0)):
            raise ZakaiError("the epsilon sweep must be positive and strictly decreasing")

    def __call__(self, x) -> np.ndarray:
        return self.fn(np.asarray(x, float))


def make_probe(cfg: dict[str, Any], epsilons=()) -> LaplaceProbe:
    """Catalog of test functions: zero, linear, quadratic, distance."""
    name = cfg.get("name", "zero")
    if name == "zero":
        fn = lambda x: np.zeros_like(x)
        params = {}
    elif name == "linear":
        s, c = float(cfg.get("slope", 1.0)), float(cfg.get("offset", 0.0))
        fn = lambda x: s * x + c
        params = {"slope": s, "offset": c}
    elif name == "quadratic":
        c, w = float(cfg.get("center", 0.0)), float(cfg.get("weight", 1.0))
        fn = lambda x: 0.5 * w * (x - c) ** 2
        params = {"center": c, "weight": w}
    elif name == "distance":
        c = float(cfg.get("point", 0.0))
        fn = lambda x: np.abs(x - c)
        params = {"point": c}
    else:
        raise ZakaiError(f"unknown test function {name!r}")
    return LaplaceProbe(name, fn, params, tuple(float(e) for e in epsilons))


# -- building blocks -----------------------------------------------------------


def _rescale(q: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale by a power of two so the maximum lies in [0.5, 1); exact in floating point."""
    m = float(np.max(q))
    if not m > 0:
        raise ZakaiError("density vanished on the whole grid")
    _, e = math.frexp(m)
    return np.ldexp(q, -e), e * LN2


def _diffusion_matrix(grid: CellGrid, epsilon: float, dt: float) -> np.ndarray:
    """Banded form of I - dt (eps/2) L with a Neumann (zero flux) Laplacian."""
    N = grid.cells
    r = dt * 0.5 * epsilon / grid.dx**2
    ab = np.zeros((3, N))
    ab[0, 1:] = -r
    ab[2, :-1] = -r
    diag = np.full(N, 1 + 2 * r)
    diag[0] = diag[-1] = 1 + r
    ab[1] = diag
    return ab


def _substeps(obs_dt: float, dt: float | None, speed: float, dx: float, cfl: float) -> int:
    if dt is None:
        return max(1, int(math.ceil(obs_dt * speed / (cfl * dx) - 1e-12)))
    ratio = obs_dt / dt
    m = int(round(ratio))
    if m < 1 or abs(ratio - m) > 1e-9 * ratio:
        raise ZakaiError("dt must divide the observation step")
    if dt * speed / dx > 1.0 + 1e-12:
        raise StabilityError(f"advection CFL number {dt * speed / dx:.4g} exceeds 1")
    return m


def step_size(vf: VectorFieldSpec, d: Domain, obs: ObservationPath, cells: int, dt: float | None = None, cfl: float = 0.9) -> float:
    """Internal step :func:`zakai_solve` uses on ``cells`` cells (checked like there)."""
    grid = CellGrid.on(d, cells)
    bf = vf.b(obs.t0, grid.faces[:, None])[:, 0]
    speed = float(np.max(np.abs(bf))) if bf.size else 0.0
    return obs.dt / _substeps(obs.dt, dt, speed, grid.dx, cfl)


def initial_density(psi: InitialCost, grid: CellGrid, epsilon: float) -> tuple[np.ndarray, float]:
    """exp(-psi / eps) at the cell centres, as (scaled samples, log of the scale)."""
    v = psi(grid.centers[:, None])
    vmin = float(np.min(v))
    return np.exp(-(v - vmin) / epsilon), -vmin / epsilon


def _check_row(q: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(q)):
        raise ZakaiError(f"non-finite density at step {step}")
    if np.any(q < 0):
        raise ZakaiError(f"negative cell at step {step}")


def zakai_solve(
    vf: VectorFieldSpec,
    d: Domain,
    obs: ObservationPath,
    q0,
    epsilon: float,
    dt: float | None = None,
    cells: int | None = None,
    t_end: float | None = None,
    log_offset: float = 0.0,
    cfl: float = 0.9,
) -> FilterDensity:
    """March the reflected Zakai equation; rows on the observation grid.

    ``q0`` holds nonnegative samples at the cell centres (their count sets the
    grid unless ``cells`` is given); ``log_offset`` is the natural log of a
    constant factor multiplying them.  ``dt=None`` picks the largest step
    dividing the observation step that meets the advection CFL bound.
    """
    if not epsilon > 0:
        raise ZakaiError("epsilon must be positive")
    if not vf.identity_noise:
        raise ZakaiError("the Zakai solver requires sigma = Id")
    q = np.asarray(q0, float).reshape(-1)
    grid = CellGrid.on(d, cells or q.size)
    if q.size != grid.cells:
        raise ZakaiError("q0 does not match the cell count")
    # tails that underflowed to zero are allowed; diffusion refills them
    if np.any(~np.isfinite(q)) or np.any(q < 0) or not np.any(q > 0):
        raise ZakaiError("q0 must be finite, nonnegative and not identically zero")
    t_end = obs.t1 if t_end is None else float(t_end)
    K = int(round((t_end - obs.t0) / obs.dt))
    if K < 1 or K > obs.steps:
        raise ZakaiError("t_end must lie on the observation grid")

    xc = grid.centers[:, None]
    xf = grid.faces[:, None]
    dx = grid.dx
    bf0 = vf.b(obs.t0, xf)[:, 0]
    speed = float(np.max(np.abs(bf0))) if bf0.size else 0.0
    m = _substeps(obs.dt, dt, speed, dx, cfl)
    h = obs.dt / m
    ab = _diffusion_matrix(grid, epsilon, h)

    q, s = _rescale(q)
    scale = log_offset + s
    rows = [q]
    scales = [scale]
    step = 0
    for k in range(K):
        for j in range(m):
            t = obs.t0 + k * obs.dt + j * h
            pot = 0.5 * np.sum((obs.ydot[k] - vf.h(t, xc)) ** 2, axis=-1)
            react = np.exp(-0.5 * h * pot / epsilon)
            q = q * react
            bf = bf0 if vf.drift.autonomous else vf.b(t, xf)[:, 0]
            if not vf.drift.autonomous and h * float(np.max(np.abs(bf))) / dx > 1.0 + 1e-12:
                raise StabilityError(f"advection CFL violated at step {step}")
            # upwind flux of q b through interior faces; zero at the walls
            flux = np.where(bf > 0, bf * q[:-1], bf * q[1:])
            div = np.zeros_like(q)
            div[:-1] -= flux
            div[1:] += flux
            q = q + (h / dx) * div
            q = solve_banded((1, 1), ab, q) * react
            step += 1
            _check_row(q, step)
            q, s = _rescale(q)
            scale += s
        rows.append(q)
        scales.append(scale)
    times = obs.t0 + obs.dt * np.arange(K + 1)
    return FilterDensity(grid, times, np.array(rows), np.array(scales), float(epsilon), meta={"substeps": m, "dt": h})


def dual_solve(
    vf: VectorFieldSpec,
    d: Domain,
    obs: ObservationPath,
    probe: LaplaceProbe,
    epsilon: float,
    t: float,
    dt: float | None = None,
    cells: int = 401,
    cfl: float = 0.9,
) -> BackwardField:
    """Backward equation dPhi/ds + b Phi' + (eps/2) Phi'' - pot/eps Phi = 0, Phi(t) = exp(-Phi/eps).

    Homogeneous Neumann walls.  Discretised on its own terms: advection is
    the non-conservative upwind form of b . grad, with b at the cell centres.
    """
    if not epsilon > 0:
        raise ZakaiError("epsilon must be positive")
    grid = CellGrid.on(d, cells)
    K = int(round((t - obs.t0) / obs.dt))
    if K < 1 or K > obs.steps or abs(obs.t0 + K * obs.dt - t) > 1e-9 * max(1.0, t):
        raise ZakaiError("t must lie on the observation grid")
    xc = grid.centers[:, None]
    dx = grid.dx
    bc0 = vf.b(obs.t0, xc)[:, 0]
    m = _substeps(obs.dt, dt, float(np.max(np.abs(bc0))), dx, cfl)
    h = obs.dt / m
    ab = _diffusion_matrix(grid, epsilon, h)

    v = probe(grid.centers)
    vmin = float(np.min(v))
    phi, s = _rescale(np.exp(-(v - vmin) / epsilon))
    scale = -vmin / epsilon + s
    rows = [phi]
    scales = [scale]
    step = 0
    for k in reversed(range(K)):
        for j in reversed(range(m)):
            ts = obs.t0 + k * obs.dt + j * h
            pot = 0.5 * np.sum((obs.ydot[k] - vf.h(ts, xc)) ** 2, axis=-1)
            react = np.exp(-0.5 * h * pot / epsilon)
            phi = solve_banded((1, 1), ab, phi * react)
            bc = bc0 if vf.drift.autonomous else vf.b(ts, xc)[:, 0]
            fwd = np.append(np.diff(phi), 0.0) / dx
            bwd = np.insert(np.diff(phi), 0, 0.0) / dx
            phi = (phi + h * np.where(bc > 0, bc * fwd, bc * bwd)) * react
            step += 1
            _check_row(phi, step)
            phi, s = _rescale(phi)
            scale += s
        rows.append(phi)
        scales.append(scale)
    times = obs.t0 + obs.dt * np.arange(K + 1)
    return BackwardField(grid, times, np.array(rows[::-1]), np.array(scales[::-1]), float(epsilon))


def duality_gap(fd: FilterDensity, dual: BackwardField) -> float:
    """Relative mismatch of the conserved pairing int Phi(s) q(s) dx between s = t and s = 0.

    ``|int Phi(t) q(t) - int Phi(0) q(0)|`` divided by the larger of the
    two; the left side is the Laplace integral of the terminal test function.
    """
    if fd.grid != dual.grid or not math.isclose(fd.epsilon, dual.epsilon):
        raise ZakaiError("filter and dual live on different grids or epsilons")
    k = len(dual.times) - 1
    if k >= len(fd.times) or not math.isclose(fd.times[k], dual.times[-1], rel_tol=1e-12, abs_tol=1e-12):
        raise ZakaiError("the dual horizon is not on the filter grid")
    dx = fd.grid.dx
    end = math.log(np.sum(dual.values[-1] * fd.values[k]) * dx) + dual.logscale[-1] + fd.logscale[k]
    start = math.log(np.sum(dual.values[0] * fd.values[0]) * dx) + dual.logscale[0] + fd.logscale[0]
    return float(-math.expm1(-abs(end - start)))


def laplace_functional(fd: FilterDensity, probe: LaplaceProbe, k: int) -> float:
    """-eps log int exp(-Phi / eps) q(t_k, x) dx by log-sum-exp over cells."""
    row = fd.values[k]
    pos = row > 0
    if not np.any(pos):
        raise ZakaiError(f"row {k} is identically zero")
    eps = fd.epsilon
    x = fd.grid.centers[pos]
    expo = -probe(x) / eps + np.log(row[pos]) + fd.logscale[k] + math.log(fd.grid.dx)
    return float(-eps * logsumexp(expo))


def wall_slopes(fd: FilterDensity, vf: VectorFieldSpec, k: int) -> dict[str, dict[str, float]]:
    """Residuals of both wall conditions for V^eps = -eps log q at row ``k``.

    The outward normal slope at each wall is extrapolated from the three
    nearest cell centres (second order).  Returns, per wall, the values of
    |b.n + dV/dn| ("sub") and |b.n + dV/dn / 2| ("super").
    """
    V = fd.log_transform(k)
    dx = fd.grid.dx
    t = fd.times[k]
    out = {}
    for wall, idx, nrm, xb in (("lower", (0, 1, 2), -1.0, fd.grid.a), ("upper", (-1, -2, -3), 1.0, fd.grid.b)):
        v0, v1, v2 = V[idx[0]], V[idx[1]], V[idx[2]]
        dn = (2 * v0 - 3 * v1 + v2) / dx  # derivative along the outward normal
        bn = float(vf.b(t, np.array([[xb]]))[0, 0]) * nrm
        out[wall] = {"b_n": bn, "dV_dn": float(dn), "sub": float(abs(bn + dn)), "super": float(abs(bn + 0.5 * dn))}
    return out


def write_laplace_csv(path, rows: list[tuple[float, float, float]]) -> None:
    """Rows of (epsilon, value, target); the gap column is |value - target|."""
    data = np.array([[e, v, g, abs(v - g)] for e, v, g in rows])
    write_csv(path, ["epsilon", "value", "target", "gap"], data)


__all__ = [
    "CellGrid",
    "FilterDensity",
    "BackwardField",
    "LaplaceProbe",
    "make_probe",
    "initial_density",
    "zakai_solve",
    "dual_solve",
    "duality_gap",
    "laplace_functional",
    "wall_slopes",
    "write_laplace_csv",
]
