"""Explicit monotone schemes for the forward HJB equation of the cost-to-come.

With sigma = Id the equation reads

    dV/dt + H(t, x, grad V) = 0,   H = b . p + 1/2 |p|^2 - 1/2 |ydot(t) - h(t, x)|^2,

with V(0, .) = psi.  Boundary nodes are closed with ghost values that give
the discrete normal slope dV/dn = -c b.n, where c = 1 ("sub" mode) or
c = 2 ("super" mode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .costs import CostSpec
from .fields import VectorFieldSpec
from .geometry import Domain
from .grid import StateGrid, ValueField

FLUXES = ("godunov", "lax-friedrichs")
BOUNDARY_MODES = ("sub", "super")


class HjbError(ValueError):
    pass


class CflError(HjbError):
    def __init__(self, step: int, number: float, limit: float):
        super().__init__(f"CFL number {number:.4g} exceeds {limit:.4g} at step {step}")
        self.step = step
        self.number = number


@dataclass(frozen=True)
class HjbScheme:
    """Numerical flux, boundary mode and time-step control.

    With ``dt=None`` the internal step adapts so that
    ``dt * sum_i alpha_i / dx_i <= cfl``; a fixed ``dt`` that breaks the
    bound raises :class:`CflError`.  ``alpha`` fixes the Lax-Friedrichs
    dissipation per axis (checked against the monotonicity bound).
    """

    flux: str = "godunov"
    boundary: str = "sub"
    cfl: float = 0.9
    dt: float | None = None
    alpha: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.flux not in FLUXES:
            raise HjbError(f"unknown flux {self.flux!r}")
        if self.boundary not in BOUNDARY_MODES:
            raise HjbError(f"unknown boundary mode {self.boundary!r}")
        if not 0 < self.cfl <= 1:
            raise HjbError("CFL number must lie in (0, 1]")
        if self.dt is not None and not self.dt > 0:
            raise HjbError("dt must be positive")

    @property
    def slope_factor(self) -> float:
        return 1.0 if self.boundary == "sub" else 2.0


class _Operator:
    """Finite-difference slopes on the active nodes with ghost closure."""

    def __init__(self, grid: StateGrid, d: Domain):
        self.grid = grid
        self.d = d
        act = np.nonzero(grid.active)[0]
        self.act = act
        N = len(act)
        n = grid.dim
        slot = np.full(grid.size, -1)
        slot[act] = np.arange(N)
        cnt = np.array(grid.counts)
        strides = np.array([int(np.prod(cnt[j + 1 :])) for j in range(n)])
        multi = np.stack(np.unravel_index(act, grid.counts), axis=-1)
        self.x = grid.points[act]
        # neighbour slots, -1 where the neighbour is missing
        self.nb = np.full((n, 2, N), -1)
        for j in range(n):
            for side, step in enumerate((-1, 1)):
                m = multi[:, j] + step
                okm = (m >= 0) & (m < cnt[j])
                idx = act + step * strides[j]
                self.nb[j, side, okm] = slot[idx[okm]]
        self.missing = self.nb < 0
        # isolated extreme points of a ball are closed by the normal-slope ghost alone
        if d.kind != "ball" and np.any(self.missing[:, 0] & self.missing[:, 1]):
            raise HjbError("a node has no neighbour along some axis; refine the grid")
        self.ghost_normal = None
        if d.kind == "ball":
            foot = d.nearest_boundary_point(self.x)
            self.ghost_normal = d.outward_normal(foot)

    def slopes(self, V: np.ndarray, bvals: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray]:
        """Backward and forward differences (n, N) with ghost values filled in."""
        n = self.grid.dim
        dx = self.grid.spacing
        Vn = np.where(self.nb >= 0, V[np.maximum(self.nb, 0)], np.nan)
        if self.d.kind == "ball":
            grad = np.zeros((len(V), n))
            for j in range(n):
                lo, hi = Vn[j, 0], Vn[j, 1]
                cen = (hi - lo) / (2 * dx[j])
                grad[:, j] = np.where(
                    np.isnan(lo), (hi - V) / dx[j], np.where(np.isnan(hi), (V - lo) / dx[j], cen)
                )
                grad[np.isnan(lo) & np.isnan(hi), j] = 0.0
            nrm = self.ghost_normal
            g = -c * np.sum(bvals * nrm, axis=-1)
            tang = grad - np.sum(grad * nrm, axis=-1, keepdims=True) * nrm
            gb = tang + g[:, None] * nrm
            for j in range(n):
                for side, sgn in enumerate((-1.0, 1.0)):
                    miss = self.missing[j, side]
                    Vn[j, side, miss] = V[miss] + sgn * dx[j] * gb[miss, j]
        else:
            for j in range(n):
                for side, sgn in enumerate((-1.0, 1.0)):
                    miss = self.missing[j, side]
                    if np.any(miss):
                        # mirror through the face: (V_ghost - V_opp) / (2 dx) = dV/dn along e_j
                        g = -c * sgn * bvals[miss, j]
                        Vn[j, side, miss] = Vn[j, 1 - side, miss] + 2 * dx[j] * g
        pm = (V - Vn[:, 0]) / dx[:, None]
        pp = (Vn[:, 1] - V) / dx[:, None]
        return pm, pp


def _godunov(b: np.ndarray, a: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Godunov Hamiltonian for H(p) = b p + p^2 / 2 (convex, minimum at -b)."""

    def H(p):
        return b * p + 0.5 * p * p

    lo = H(np.clip(-b, a, c))
    hi = np.maximum(H(a), H(c))
    return np.where(a <= c, lo, hi)


def _numerical_hamiltonian(scheme: HjbScheme, bvals: np.ndarray, pm: np.ndarray, pp: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    if scheme.flux == "godunov":
        return np.sum(_godunov(bvals.T, pm, pp), axis=0)
    pbar = 0.5 * (pm + pp)
    return np.sum(bvals.T * pbar + 0.5 * pbar**2 - 0.5 * alpha[:, None] * (pp - pm), axis=0)


def hjb_solve(
    vf: VectorFieldSpec,
    d: Domain,
    grid: StateGrid,
    cost: CostSpec,
    scheme: HjbScheme | None = None,
    t_end: float | None = None,
) -> ValueField:
    """March the HJB equation forward from psi; rows on the observation grid."""
    scheme = scheme or HjbScheme()
    if not vf.identity_noise:
        raise HjbError("the HJB solver requires sigma = Id")
    if scheme.flux == "godunov" and grid.dim != 1:
        raise HjbError("the Godunov flux is one-dimensional; use lax-friedrichs")
    if grid.extended:
        raise HjbError("hjb_solve works on the domain grid, not an extended one")
    obs = cost.obs
    t_end = obs.t1 if t_end is None else float(t_end)
    K = int(round((t_end - obs.t0) / obs.dt))
    if K < 1 or abs(obs.t0 + K * obs.dt - t_end) > 1e-9 * max(1.0, t_end):
        raise HjbError("t_end must lie on the observation grid")
    if K > obs.steps:
        raise HjbError("t_end exceeds the observation record")

    op = _Operator(grid, d)
    x = op.x
    dx = grid.spacing
    c = scheme.slope_factor
    V = cost.psi(x).astype(float)
    rows = [V.copy()]
    times = obs.t0 + obs.dt * np.arange(K + 1)
    fixed = scheme.dt
    if fixed is not None:
        ratio = obs.dt / fixed
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise HjbError("fixed dt must divide the observation step")
    bcache = vf.b(0.0, x) if vf.drift.autonomous else None
    hcache = vf.h(0.0, x) if vf.observation.autonomous else None

    step = 0
    for k in range(K):
        t = times[k]
        remaining = obs.dt
        while remaining > 1e-14 * obs.dt:
            bvals = bcache if bcache is not None else vf.b(t, x)
            hx = hcache if hcache is not None else vf.h(t, x)
            pm, pp = op.slopes(V, bvals, c)
            speed = np.maximum(np.max(np.abs(bvals.T + pm), axis=1), np.max(np.abs(bvals.T + pp), axis=1))
            alpha = speed
            if scheme.alpha is not None:
                alpha = np.asarray(scheme.alpha, float)
                if np.any(alpha < speed - 1e-12):
                    raise HjbError(f"dissipation {alpha.tolist()} below max |dH/dp| {speed.tolist()} at step {step}")
            rate = float(np.sum(alpha / dx))
            if fixed is not None:
                h = fixed
                if h * rate > scheme.cfl:
                    raise CflError(step, h * rate, scheme.cfl)
            else:
                h = remaining if rate == 0 else min(remaining, scheme.cfl / rate)
            r = obs.ydot[k] - hx
            Hn = _numerical_hamiltonian(scheme, bvals, pm, pp, alpha) - 0.5 * np.sum(r * r, axis=-1)
            V = V - h * Hn
            if not np.all(np.isfinite(V)):
                raise HjbError(f"non-finite value at step {step} (t = {t:.6g})")
            t += h
            remaining -= h
            step += 1
        rows.append(V.copy())

    return ValueField(grid, times, np.array(rows), f"hjb-{scheme.boundary}", meta={"steps": step, "scheme": scheme})


def _face_count(d: Domain, x: np.ndarray) -> np.ndarray:
    if d.kind == "ball":
        return np.ones(len(x), int)
    tol = d.tol_boundary
    return np.sum(np.abs(x - d.lower) <= tol, axis=-1) + np.sum(np.abs(x - d.upper) <= tol, axis=-1)


def hjb_residual_report(fld: ValueField, vf: VectorFieldSpec, cost: CostSpec, kink_tol: float | None = None) -> dict[str, float]:
    """Residuals of a value table against the HJB equation and both boundary conditions.

    Interior: |dV/dt + H| with centred differences in time and space.
    Boundary: |b.n + dV/dn| (sub) and |b.n + dV/dn / 2| (super), with a
    second-order one-sided normal slope.  Nodes where one-sided slopes
    differ by more than ``kink_tol`` (default ``10 dx Lip(psi)``) are skipped.
    """
    grid = fld.grid
    d = grid.domain
    dx = grid.spacing
    h = float(np.min(dx))
    kink_tol = 10 * grid.dx * max(cost.psi.lipschitz, 1.0) if kink_tol is None else kink_tol
    obs = cost.obs
    act = np.nonzero(grid.active)[0]
    in_dom = grid.in_domain[act]
    x = grid.points[act]
    n = grid.dim
    cnt = np.array(grid.counts)
    strides = np.array([int(np.prod(cnt[j + 1 :])) for j in range(n)])
    multi = np.stack(np.unravel_index(act, grid.counts), axis=-1)
    slot = np.full(grid.size, -1)
    slot[act] = np.arange(len(act))
    interior = in_dom.copy()
    nbl = np.zeros((n, len(act)), int)
    nbr = np.zeros((n, len(act)), int)
    for j in range(n):
        okl = multi[:, j] > 0
        okr = multi[:, j] < cnt[j] - 1
        il = np.where(okl, slot[np.where(okl, act - strides[j], 0)], -1)
        ir = np.where(okr, slot[np.where(okr, act + strides[j], 0)], -1)
        nbl[j], nbr[j] = il, ir
        interior &= (il >= 0) & (ir >= 0)
        interior &= np.where(il >= 0, in_dom[np.maximum(il, 0)], False) & np.where(ir >= 0, in_dom[np.maximum(ir, 0)], False)

    vals = fld.values
    unreach = fld.unreachable
    T = len(fld.times)
    interior_max = 0.0
    ii = np.nonzero(interior)[0]
    if T >= 3 and len(ii):
        b = vf.b(0.0, x[ii]) if vf.drift.autonomous else None
        hx = vf.h(0.0, x[ii]) if vf.observation.autonomous else None
        for k in range(1, T - 1):
            t = fld.times[k]
            bk = b if b is not None else vf.b(t, x[ii])
            hk = hx if hx is not None else vf.h(t, x[ii])
            Vk = vals[k]
            p = np.empty((len(ii), n))
            kink = np.zeros(len(ii), bool)
            for j in range(n):
                pl = (Vk[ii] - Vk[nbl[j, ii]]) / dx[j]
                pr = (Vk[nbr[j, ii]] - Vk[ii]) / dx[j]
                p[:, j] = 0.5 * (pl + pr)
                kink |= np.abs(pr - pl) > kink_tol
            dtv = (vals[k + 1, ii] - vals[k - 1, ii]) / (fld.times[k + 1] - fld.times[k - 1])
            mis = 0.0
            for kk in (k - 1, k):
                r = obs.ydot[min(_obs_index(obs, fld.times[kk]), obs.steps - 1)] - hk
                mis = mis + 0.25 * np.sum(r * r, axis=-1)
            res = np.abs(dtv + np.sum(bk * p, axis=-1) + 0.5 * np.sum(p * p, axis=-1) - mis)
            bad = kink | unreach[k - 1, ii] | unreach[k, ii] | unreach[k + 1, ii]
            if np.any(~bad):
                interior_max = max(interior_max, float(np.max(res[~bad])))

    bd = grid.boundary_layer()[act] & (_face_count(d, x) == 1)
    sub_max = 0.0
    super_max = 0.0
    bi = np.nonzero(bd)[0]
    if len(bi):
        foot = d.nearest_boundary_point(x[bi])
        nrm = d.outward_normal(foot)
        base = x[bi]
        probes = np.concatenate([base - h * nrm, base - 2 * h * nrm])
        for k in range(1, T):
            t = fld.times[k]
            full = fld.full_row(k)
            v1, v2 = np.split(grid.interpolate(full, probes), 2)
            v0 = vals[k, bi]
            dn = (3 * v0 - 4 * v1 + v2) / (2 * h)
            kink = np.abs((v0 - v1) - (v1 - v2)) / h > kink_tol
            bn = np.sum(vf.b(t, base) * nrm, axis=-1)
            ok = ~kink & ~unreach[k, bi] & np.isfinite(dn)
            if np.any(ok):
                sub_max = max(sub_max, float(np.max(np.abs(bn + dn)[ok])))
                super_max = max(super_max, float(np.max(np.abs(bn + 0.5 * dn)[ok])))
    return {
        "interior_max_residual": interior_max,
        "boundary_sub_residual": sub_max,
        "boundary_super_residual": super_max,
    }


def _obs_index(obs, t: float) -> int:
    return max(int(math.floor((t - obs.t0) / obs.dt + 1e-9)), 0)
