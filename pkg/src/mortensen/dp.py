"""Dynamic-programming oracle for the cost-to-come.

The forward Bellman recursion

    V_{k+1}(x) = min over (xi, w) with step(xi, w) = x of  V_k(xi) + dt * l(t_k, xi, w)

is evaluated on a vertex-centred grid with controls restricted to a finite
lattice.  For every target node and control the departure point ``xi`` is
found by inverting the step map; ``V_k(xi)`` is then read by multilinear
interpolation.  Boundary nodes additionally collect the departure points
whose step is projected onto them (the normal-cone part of the reflected
dynamics), found along rays of the normal cone and by pushing every grid
node forward.  Every candidate is re-simulated forward and kept only when it
really lands on its target, so the recursion is a minimum over feasible
discrete trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .costs import CostSpec
from .dynamics import n_steps, penalty_flow, penalty_flow_inverse
from .fields import VectorFieldSpec
from .geometry import Domain
from .grid import SENTINEL, StateGrid, ValueField

MODES = ("constrained", "penalized", "masked")


class DPError(ValueError):
    pass


class ReachabilityError(DPError):
    def __init__(self, node: int, step: int, point):
        super().__init__(
            f"node {node} at {np.round(point, 6).tolist()} unreachable at step {step}; "
            "increase omega_max"
        )
        self.node = node
        self.step = step


@dataclass(frozen=True)
class ControlLattice:
    """Odd per-axis lattice on [-omega_max, omega_max]^r (contains 0)."""

    values: np.ndarray
    omega_max: float
    count: int

    @classmethod
    def build(cls, r: int, count: int = 21, omega_max: float = 1.0) -> "ControlLattice":
        if count < 1 or count % 2 == 0:
            raise DPError("control count per axis must be odd")
        if not omega_max > 0:
            raise DPError("omega_max must be positive")
        axis = np.linspace(-omega_max, omega_max, count)
        axis[count // 2] = 0.0
        mesh = np.meshgrid(*([axis] * r), indexing="ij")
        return cls(np.stack([m.reshape(-1) for m in mesh], axis=-1), float(omega_max), count)

    @property
    def size(self) -> int:
        return self.values.shape[0]


def default_omega_max(vf: VectorFieldSpec, d: Domain, horizon: float, grid: StateGrid) -> float:
    bmax = float(np.max(np.linalg.norm(vf.b(0.0, grid.points[grid.in_domain]), axis=-1)))
    return 4.0 * (d.diameter / horizon + bmax)


@dataclass(frozen=True)
class DPProblem:
    """Everything needed to rerun a Bellman step of a solved field."""

    vf: VectorFieldSpec
    domain: Domain
    grid: StateGrid
    cost: CostSpec
    mode: str
    kappa: float | None
    lattice: ControlLattice
    dt: float
    t0: float
    n_ray: int = 6


@dataclass
class _Stencil:
    """Candidate transitions of one (macro) Bellman step."""

    target: np.ndarray  # (C,) target slot
    index: np.ndarray  # (C, 2^n) interpolation nodes of the departure point
    weight: np.ndarray  # (C, 2^n)
    control_cost: np.ndarray  # (C,) sum over sub-steps of dt * 1/2 |w|^2
    path: np.ndarray  # (C, n_sub, n) state at the start of each sub-step
    hpath: np.ndarray | None = None  # cached h(path) for autonomous maps
    order: np.ndarray = field(init=False)
    starts: np.ndarray = field(init=False)
    present: np.ndarray = field(init=False)

    def finalize(self, n_targets: int) -> None:
        self.order = np.argsort(self.target, kind="stable")
        sorted_t = self.target[self.order]
        self.present = np.zeros(n_targets, bool)
        self.present[sorted_t] = True
        self.starts = np.searchsorted(sorted_t, np.arange(n_targets))[self.present]


# -- step maps ---------------------------------------------------------------


def _forward(problem: DPProblem, t: float, x: np.ndarray, w: np.ndarray, n_sub: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run ``n_sub`` DP sub-steps; return (arrival, path starts, stayed-in-domain flag)."""
    vf, d, dt = problem.vf, problem.domain, problem.dt
    path = np.empty((n_sub,) + x.shape)
    ok = np.ones(x.shape[0], bool)
    tol = 10 * d.tol_boundary
    for s in range(n_sub):
        ts = t + s * dt
        path[s] = x
        if problem.mode == "penalized":
            x = penalty_flow(d, x, vf.velocity(ts, x, w), dt, problem.kappa)
        else:
            x = x + dt * vf.velocity(ts, x, w)
            if problem.mode == "constrained":
                x = d.project(x)
            else:
                ok &= d.distance(x) <= tol
    return x, np.moveaxis(path, 0, 1), ok


def _backward(problem: DPProblem, t: float, z: np.ndarray, w: np.ndarray, n_sub: int, iters: int = 8) -> np.ndarray:
    """Invert the unprojected (or penalised) step map by fixed-point iteration."""
    vf, d, dt = problem.vf, problem.domain, problem.dt
    y = z.copy()
    for s in reversed(range(n_sub)):
        ts = t + s * dt
        if problem.mode == "penalized":
            x = y - dt * vf.velocity(ts, y, w)
            for _ in range(iters):
                x = penalty_flow_inverse(d, y, vf.velocity(ts, x, w), dt, problem.kappa)
            y = x
        else:
            x = y - dt * vf.velocity(ts, y, w)
            for _ in range(iters):
                x = y - dt * vf.velocity(ts, x, w)
            y = x
    return y


def _build_stencil(problem: DPProblem, t: float, targets: np.ndarray, arrivals: np.ndarray, boundary: np.ndarray, n_sub: int, source_points: np.ndarray) -> _Stencil:
    """Collect verified candidates for target slots.

    ``arrivals[j]`` is the point where trajectories must land for slot ``j``
    (the node itself, or its boundary foot point for boundary slots).
    """
    d, grid, lat = problem.domain, problem.grid, problem.lattice
    L = lat.size
    n = d.dim
    T = len(targets)
    tol = 1e-9 * (1.0 + d.diameter)
    need_domain = problem.mode != "penalized"

    tgt_parts, src_parts, ctrl_parts, path_parts = [], [], [], []

    def accept(slot, src, ctrl, path, ok):
        tgt_parts.append(slot[ok])
        src_parts.append(src[ok])
        ctrl_parts.append(ctrl[ok])
        path_parts.append(path[ok])

    # pull: departure points of the exact arrival at each target node
    slot = np.repeat(np.arange(T), L)
    ctrl = np.tile(np.arange(L), T)
    z = np.repeat(targets, L, axis=0)
    W = lat.values[ctrl]
    xi = _backward(problem, t, z, W, n_sub)
    if need_domain:
        near = d.distance(xi) <= 10 * d.tol_boundary
        xi = np.where(near[:, None], d.project(xi), xi)
    arr, path, stayed = _forward(problem, t, xi, W, n_sub)
    ok = np.linalg.norm(arr - z, axis=1) <= tol
    if need_domain:
        ok &= near & stayed
    accept(slot, xi, ctrl, path, ok)

    if problem.mode == "constrained" and np.any(boundary):
        bslots = np.nonzero(boundary)[0]
        # rays of the normal cone: unprojected arrival beyond the boundary
        speed = float(np.max(np.linalg.norm(problem.vf.velocity(t, arrivals[bslots][:, None, :], lat.values[None, :, :]), axis=-1)))
        s_max = 1.05 * problem.dt * n_sub * speed
        svals = np.linspace(0.0, s_max, problem.n_ray + 1)[1:]
        for j in bslots:
            xb = arrivals[j]
            for nu in d.normal_cone_directions(xb):
                zr = (xb + svals[:, None] * nu)
                zz = np.repeat(zr, L, axis=0)
                cc = np.tile(np.arange(L), len(svals))
                Wr = lat.values[cc]
                xr = _backward(problem, t, zz, Wr, n_sub)
                nearr = d.distance(xr) <= 10 * d.tol_boundary
                xr = np.where(nearr[:, None], d.project(xr), xr)
                a, p, _ = _forward(problem, t, xr, Wr, n_sub)
                okr = nearr & (np.linalg.norm(a - xb, axis=1) <= tol)
                accept(np.full(len(cc), j), xr, cc, p, okr)
        # push: every source node (and each boundary foot point) moved forward
        srcs = np.vstack([source_points, arrivals[bslots]])
        S = len(srcs)
        cc = np.tile(np.arange(L), S)
        xs = np.repeat(srcs, L, axis=0)
        Wp = lat.values[cc]
        a, p, _ = _forward(problem, t, xs, Wp, n_sub)
        on_bd = d.boundary_distance(a) <= 10 * d.tol_boundary
        if np.any(on_bd):
            hits = np.nonzero(on_bd)[0]
            feet = arrivals[bslots]
            dist = np.linalg.norm(a[hits][:, None, :] - feet[None, :, :], axis=-1)
            jmin = np.argmin(dist, axis=1)
            good = dist[np.arange(len(hits)), jmin] <= tol
            hits, jmin = hits[good], jmin[good]
            accept(bslots[jmin], xs[hits], cc[hits], p[hits], np.ones(len(hits), bool))

    target = np.concatenate(tgt_parts)
    src = np.concatenate(src_parts) if src_parts else np.empty((0, n))
    ctrl = np.concatenate(ctrl_parts)
    path = np.concatenate(path_parts) if path_parts else np.empty((0, n_sub, n))
    idx, wts, inside = grid.interp_weights(src) if len(src) else (np.empty((0, 2**n), int), np.empty((0, 2**n)), np.empty(0, bool))
    keep = inside
    wsq = 0.5 * np.sum(lat.values[ctrl] ** 2, axis=-1)
    st = _Stencil(
        target=target[keep],
        index=idx[keep],
        weight=wts[keep],
        control_cost=(problem.dt * n_sub) * wsq[keep],
        path=path[keep],
    )
    if problem.vf.observation.autonomous:
        st.hpath = problem.vf.h(t, st.path)
    st.finalize(T)
    return st


def _evaluate(problem: DPProblem, st: _Stencil, full_prev: np.ndarray, bad_prev: np.ndarray, k0: int, t: float, n_targets: int) -> np.ndarray:
    """Minimum over candidates; +inf where a target has none."""
    vf, cost, dt = problem.vf, problem.cost, problem.dt
    n_sub = st.path.shape[1]
    vals = np.sum(full_prev[st.index] * st.weight, axis=1) + st.control_cost
    for s in range(n_sub):
        ts = t + s * dt
        kobs = _obs_index(problem, ts)
        hx = st.hpath[:, s] if st.hpath is not None else vf.h(ts, st.path[:, s])
        r = cost.obs.ydot[kobs] - hx
        vals = vals + dt * 0.5 * np.sum(r * r, axis=-1)
    bad = np.any(bad_prev[st.index] & (st.weight > 0), axis=1)
    vals = np.where(bad, np.inf, vals)
    out = np.full(n_targets, np.inf)
    if len(vals):
        out[st.present] = np.minimum.reduceat(vals[st.order], st.starts)
    return out


def _prepare_row(problem: DPProblem, row: np.ndarray, unreachable: np.ndarray, fill: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row on every grid node plus the mask of unreachable nodes."""
    grid = problem.grid
    act = np.nonzero(grid.active)[0]
    full = np.full(grid.size, SENTINEL)
    full[act] = row
    bad = np.zeros(grid.size, bool)
    bad[act] = unreachable
    return full[fill], bad[fill]


def _obs_index(problem: DPProblem, t: float) -> int:
    obs = problem.cost.obs
    k = int(math.floor((t - obs.t0) / obs.dt + 1e-9))
    return min(max(k, 0), obs.steps - 1)


def dp_solve(
    vf: VectorFieldSpec,
    d: Domain,
    grid: StateGrid,
    cost: CostSpec,
    mode: str = "constrained",
    kappa: float | None = None,
    controls: ControlLattice | None = None,
    dt: float | None = None,
    t_end: float | None = None,
    strict: bool = True,
    n_ray: int = 6,
) -> ValueField:
    """Forward DP for the cost-to-come (constrained / masked) or its penalised version.

    ``mode='masked'`` uses unprojected steps that must stay in the domain
    (hard state constraint).  ``mode='penalized'`` needs ``kappa`` and runs
    on ``grid`` extended by the maximal penalised overshoot.
    """
    if mode not in MODES:
        raise DPError(f"unknown mode {mode!r}")
    if mode == "penalized" and not (kappa is not None and kappa > 0):
        raise DPError("penalized mode needs kappa > 0")
    obs = cost.obs
    dt = obs.dt if dt is None else float(dt)
    ratio = obs.dt / dt
    if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
        raise DPError("dt must divide the observation grid step")
    t_end = obs.t1 if t_end is None else float(t_end)
    K = n_steps(obs.t0, t_end, dt)
    if controls is None:
        controls = ControlLattice.build(vf.r, 21, default_omega_max(vf, d, t_end - obs.t0, grid))
    if controls.values.shape[1] != vf.r:
        raise DPError("control lattice dimension differs from the noise dimension")

    if mode == "penalized" and not grid.extended:
        bmax = float(np.max(np.linalg.norm(vf.b(0.0, grid.points), axis=-1)))
        smax = float(np.linalg.norm(vf.sigma(0.0, grid.points[0]), 2))
        margin = min(0.5 * d.diameter, (bmax + smax * controls.omega_max * math.sqrt(vf.r)) / kappa)
        grid = grid.extend(max(margin, 2 * grid.dx))

    problem = DPProblem(vf, d, grid, cost, mode, kappa, controls, dt, obs.t0, n_ray)
    act = np.nonzero(grid.active)[0]
    targets = grid.points[act]
    boundary = grid.boundary_layer()[act] if mode == "constrained" else np.zeros(len(act), bool)
    arrivals = targets.copy()
    if np.any(boundary):
        arrivals[boundary] = d.nearest_boundary_point(targets[boundary])
    sources = grid.points[grid.in_domain] if mode != "penalized" else grid.points
    in_dom = grid.in_domain[act]
    fill = grid.fill_index()

    values = np.empty((K + 1, len(act)))
    values[0] = cost.psi(targets)
    unreachable = np.zeros((K + 1, len(act)), bool)
    # initial states are restricted to the closed domain in every mode
    unreachable[0] = ~in_dom
    values[0, ~in_dom] = SENTINEL
    times = obs.t0 + dt * np.arange(K + 1)
    st = None
    for k in range(K):
        t = times[k]
        if st is None or not vf.autonomous:
            st = _build_stencil(problem, t, targets, arrivals, boundary, 1, sources)
        full, bad = _prepare_row(problem, values[k], unreachable[k], fill)
        new = _evaluate(problem, st, full, bad, k, t, len(act))
        miss = ~np.isfinite(new)
        if strict and np.any(miss & in_dom):
            j = int(np.nonzero(miss & in_dom)[0][0])
            raise ReachabilityError(int(act[j]), k + 1, targets[j])
        unreachable[k + 1] = miss
        values[k + 1] = np.where(miss, SENTINEL, new)

    label = f"penalized({kappa:g})" if mode == "penalized" else mode
    return ValueField(grid, times, values, label, unreachable, meta={"problem": problem})


@dataclass(frozen=True)
class Observer:
    point: np.ndarray
    value: float
    ties: np.ndarray
    index: int


def extract_observer(fld: ValueField, k: int, region: np.ndarray | None = None) -> Observer:
    """Mortensen observer: first node (lexicographic) attaining the row minimum."""
    row = fld.values[k]
    ok = ~fld.unreachable[k]
    if region is not None:
        ok &= region
    if not np.any(ok):
        raise DPError(f"row {k} is unreachable everywhere")
    vmin = float(np.min(row[ok]))
    tie_tol = 1e-9 * (1.0 + abs(vmin))
    hits = np.nonzero(ok & (row <= vmin + tie_tol))[0]
    nodes = fld.nodes
    order = np.lexsort(nodes[hits].T[::-1])
    hits = hits[order]
    return Observer(nodes[hits[0]].copy(), vmin, nodes[hits].copy(), int(hits[0]))


def observer_path(fld: ValueField, region: np.ndarray | None = None) -> np.ndarray:
    return np.stack([extract_observer(fld, k, region).point for k in range(len(fld.times))])


def bellman_residual(fld: ValueField, tau: float, samples: int = 200, seed: int = 0) -> float:
    """Max |V(t, x) - one Bellman step of length tau from row t - tau| over sampled (t, x).

    The recomputation uses controls held constant over the whole window.
    """
    problem: DPProblem = fld.meta["problem"]
    dt = problem.dt
    n_sub = int(round(tau / dt))
    if n_sub < 1 or abs(n_sub * dt - tau) > 1e-9 * max(tau, dt):
        raise DPError("tau must be a positive multiple of dt")
    if tau > fld.times[-1] - fld.times[0] + 1e-12:
        raise DPError("tau exceeds the solved horizon")
    grid, d = problem.grid, problem.domain
    act = np.nonzero(grid.active)[0]
    in_dom = grid.in_domain[act]
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    K = len(fld.times) - 1
    ks = rng.integers(n_sub, K + 1, size=samples)
    cand_nodes = np.nonzero(in_dom)[0]
    nodes = rng.choice(cand_nodes, size=samples)

    targets_all = grid.points[act]
    boundary_all = grid.boundary_layer()[act] if problem.mode == "constrained" else np.zeros(len(act), bool)
    uniq = np.unique(nodes)
    tg = targets_all[uniq]
    bd = boundary_all[uniq]
    arr = tg.copy()
    if np.any(bd):
        arr[bd] = d.nearest_boundary_point(tg[bd])
    sources = grid.points[grid.in_domain] if problem.mode != "penalized" else grid.points
    fill = grid.fill_index()
    pos = {int(u): i for i, u in enumerate(uniq)}

    st = None
    worst = 0.0
    for k in np.unique(ks):
        k0 = int(k) - n_sub
        t0 = fld.times[k0]
        if st is None or not problem.vf.autonomous:
            st = _build_stencil(problem, t0, tg, arr, bd, n_sub, sources)
        full, bad = _prepare_row(problem, fld.values[k0], fld.unreachable[k0], fill)
        rec = _evaluate(problem, st, full, bad, k0, t0, len(uniq))
        for j in nodes[ks == k]:
            stored = fld.values[k, j]
            again = rec[pos[int(j)]]
            if np.isfinite(again) and not fld.unreachable[k, j]:
                worst = max(worst, abs(again - stored))
    return worst
