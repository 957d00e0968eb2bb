"""Experiment pipelines, one per config kind.

Each pipeline writes CSV artifacts under the output directory and returns a
:class:`RunReport` whose metrics are reductions over those CSVs.  Sweep
members run in a process pool; results are gathered in input order, so the
outputs do not depend on the number of workers.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ..costs import CostSpec
from ..dp import bellman_residual, dp_solve, observer_path
from ..dynamics import (
    DisturbancePath,
    holder_quotient,
    make_rng,
    n_steps,
    penalized_paths,
    reflected_paths,
    smooth_disturbance,
    twin_experiment,
)
from ..grid import ValueField
from ..hjb import HjbScheme, hjb_residual_report, hjb_solve
from ..kalman import kalman_estimate
from ..zakai import CellGrid, dual_solve, duality_gap, initial_density, laplace_functional, make_probe, step_size, wall_slopes, zakai_solve
from .config import ConfigError, ExperimentConfig
from .report import TIMING, ArtifactWriter, RunReport, write_manifest

# comparison used for each metric; anything not listed is "value <= threshold"
METRIC_OPS = {
    "value_error_step_ratio": "<",
    "path_error_step_ratio": "<",
    "boundary_contrast_ratio": ">",
    "wall_super_over_sub": "<",
    "duality_refine_ratio": ">=",
}

PROBE_METRICS = ("laplace_{}_step_ratio", "laplace_{}_final_gap", "laplace_{}_slope")

KIND_METRICS = {
    "twin": ("observer_error_max", "observer_error_final"),
    "kappa-sweep": (
        "value_error_step_ratio",
        "value_error_slope",
        "path_error_step_ratio",
        "path_error_slope",
        "distance_envelope_ratio",
    ),
    "kalman-xcheck": ("dp_sup_error", "hjb_sup_error", "dp_argmin_dev", "hjb_argmin_dev", "zakai_kalman_residual"),
    "hjb-vs-dp": ("sub_vs_dp", "super_vs_dp", "boundary_contrast_ratio", "wall_super_over_sub"),
    "laplace-sweep": ("duality_gap_max", "duality_refine_ratio"),
    "holder-check": ("holder_max", "holder_ratio_max"),
    "bellman-check": ("bellman_residual",),
}


def known_metrics(cfg: ExperimentConfig) -> set[str]:
    """Metric names any pipeline can produce for this config (one file serves several kinds)."""
    names = {m for kind in KIND_METRICS.values() for m in kind}
    if "probes" in cfg.section("sweep"):
        for p in cfg.probes():
            names |= {m.format(p.get("name", "zero")) for m in PROBE_METRICS}
    return names


def check_tolerances(cfg: ExperimentConfig) -> None:
    unknown = sorted(set(cfg.tolerances()) - known_metrics(cfg))
    if unknown:
        raise ConfigError(f"tolerances name unknown metrics: {', '.join(unknown)}")


# -- worker pool ---------------------------------------------------------------


def worker_count() -> int:
    env = os.environ.get("MORTENSEN_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"MORTENSEN_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("MORTENSEN_THREADS must be at least 1")
        return n
    return os.cpu_count() or 1


def pool_map(fn: Callable, items: list) -> list:
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(n) as ex:
        return list(ex.map(fn, items))


# -- shared setup --------------------------------------------------------------


class Setup:
    """Objects every pipeline needs, rebuilt from the raw config (also inside workers)."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.d = cfg.domain()
        self.vf = cfg.vector_field()
        self.psi = cfg.psi()
        tw = cfg.twin()
        self.traj, self.obs = twin_experiment(
            self.vf,
            self.d,
            tw["x0"],
            tw["t_end"],
            tw["dt"],
            cfg.seed,
            tw["process_noise"],
            tw["obs_noise"],
            process_bias=tw["process_bias"],
        )
        self.cost = CostSpec(self.psi, self.obs)

    def dp(self, nodes: int | None = None, **kw) -> ValueField:
        return dp_solve(self.vf, self.d, self.cfg.grid(nodes), self.cost, controls=self.cfg.lattice(), **kw)

    def hjb(self, mode: str, nodes: int | None = None) -> ValueField:
        h = self.cfg.section("hjb")
        flux = h.get("flux", "godunov" if self.d.dim == 1 else "lax-friedrichs")
        scheme = HjbScheme(flux=flux, boundary=mode, cfl=float(h.get("cfl", 0.9)))
        return hjb_solve(self.vf, self.d, self.cfg.grid(nodes), self.cost, scheme)


def _setup(raw: dict) -> Setup:
    return Setup(ExperimentConfig.from_dict(raw))


def _row_sup(a: ValueField, b: ValueField, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-time sup |a - b| over in-domain nodes reachable in both."""
    ok = a.in_domain & ~a.unreachable & ~b.unreachable
    if mask is not None:
        ok &= mask
    diff = np.where(ok, np.abs(a.values - b.values), 0.0)
    return np.max(diff, axis=1)


def _value_table(w: ArtifactWriter, name: str, fld: ValueField) -> None:
    fld.to_csv(w.out / name)
    w.add_file(name)


# -- twin ----------------------------------------------------------------------


def run_twin(cfg: ExperimentConfig, w: ArtifactWriter, timing: dict) -> RunReport:
    s = Setup(cfg)
    s.traj.to_csv(w.out / "truth.csv")
    s.obs.to_csv(w.out / "observations.csv")
    w.add_file("truth.csv")
    w.add_file("observations.csv")
    t0 = time.perf_counter()
    V = s.dp()
    timing["dp"] = time.perf_counter() - t0
    _value_table(w, "value_dp.csv", V)
    est = observer_path(V)
    truth = s.traj.states  # the twin and the observations share one time grid
    err = np.linalg.norm(est - truth, axis=1)
    cols = {"t": V.times}
    for i in range(est.shape[1]):
        cols[f"observer{i + 1}"] = est[:, i]
        cols[f"truth{i + 1}"] = truth[:, i]
    cols["error"] = err
    f = w.table("observer.csv", cols)
    metrics = [
        w.metric("observer_error_max", {"file": f, "reduce": "max", "y": "error"}),
        w.metric("observer_error_final", {"file": f, "reduce": "last", "x": "t", "y": "error"}),
    ]
    return _report(cfg, w, metrics, ["observer_vs_truth", "value_slices"])


# -- kappa sweep ---------------------------------------------------------------


def _kappa_member(args) -> np.ndarray:
    raw, kappa = args
    s = _setup(raw)
    if kappa is None:
        return s.dp().values
    Vk = s.dp(mode="penalized", kappa=kappa)
    return Vk.values[:, Vk.in_domain]


def spike_distance(s: Setup, kappa: float, l2: float, window: float) -> float:
    """sup dist(x^kappa, G) for an outward spike of L2 norm ``l2`` lasting 1/kappa.

    The path starts on the boundary; this disturbance saturates the
    kappa^{-1/2} envelope of the distance bound.
    """
    steps = int(math.ceil(10 * kappa * window))
    dt = window / steps
    width = max(1, int(round(1.0 / (kappa * dt))))
    x0 = s.d.nearest_boundary_point(np.asarray(s.cfg.twin()["x0"], float)[None, :])
    n = s.d.outward_normal(x0)[0]
    direction = np.linalg.lstsq(s.vf.sigma(0.0, x0)[0], n, rcond=None)[0]
    w = np.zeros((steps, 1, s.vf.r))
    w[:width, 0] = l2 * math.sqrt(kappa) * direction
    path = penalized_paths(s.vf, s.d, x0, w, 0.0, dt, kappa)
    return float(np.max(s.d.distance(path[:, 0])))


def run_kappa_sweep(cfg: ExperimentConfig, w: ArtifactWriter, timing: dict) -> RunReport:
    kappas = cfg.kappas()
    sw = cfg.section("sweep")
    t0 = time.perf_counter()
    fields = pool_map(_kappa_member, [(cfg.raw, None)] + [(cfg.raw, k) for k in kappas])
    timing["value_sweep"] = time.perf_counter() - t0
    V = fields[0]
    value_err = [float(np.max(np.abs(F - V))) for F in fields[1:]]

    t0 = time.perf_counter()
    s = Setup(cfg)
    tw = cfg.twin()
    n_paths = int(sw.get("trajectories", 20))
    rng = make_rng(cfg.seed, 2)
    x0 = s.d.sample(rng, n_paths)
    ws = [smooth_disturbance(rng, 0.0, tw["t_end"], tw["dt"], s.vf.r, float(sw.get("amplitude", 4.0))) for _ in range(n_paths)]
    W = np.stack([p.samples for p in ws], axis=1)
    ref = reflected_paths(s.vf, s.d, x0, W, 0.0, tw["dt"])
    path_err = [float(np.max(np.linalg.norm(penalized_paths(s.vf, s.d, x0, W, 0.0, tw["dt"], k) - ref, axis=-1))) for k in kappas]
    timing["path_sweep"] = time.perf_counter() - t0

    l2 = float(sw.get("spike_l2", 1.0))
    window = float(sw.get("spike_window", 0.2))
    dist = [spike_distance(s, k, l2, window) for k in kappas]
    scaled = [dd * math.sqrt(k) for dd, k in zip(dist, kappas)]

    f = w.table(
        "kappa_sweep.csv",
        {"kappa": kappas, "value_error": value_err, "path_error": path_err, "spike_distance": dist, "scaled_distance": scaled},
    )
    metrics = [
        w.metric("value_error_step_ratio", {"file": f, "reduce": "step_ratio", "x": "kappa", "y": "value_error"}),
        w.metric("value_error_slope", {"file": f, "reduce": "loglog_slope", "x": "kappa", "y": "value_error"}),
        w.metric("path_error_step_ratio", {"file": f, "reduce": "step_ratio", "x": "kappa", "y": "path_error"}),
        w.metric("path_error_slope", {"file": f, "reduce": "loglog_slope", "x": "kappa", "y": "path_error"}),
        w.metric("distance_envelope_ratio", {"file": f, "reduce": "max_over_min", "y": "scaled_distance"}),
    ]
    return _report(cfg, w, metrics, ["error_vs_kappa"])


# -- Kalman cross-check --------------------------------------------------------


def _centered_residual(a: np.ndarray, b: np.ndarray) -> float:
    r = a - b
    return float(0.5 * (np.max(r) - np.min(r)))


def run_kalman_xcheck(cfg: ExperimentConfig, w: ArtifactWriter, timing: dict) -> RunReport:
    s = Setup(cfg)
    lm = cfg.linear_model()
    kp = kalman_estimate(lm, s.obs)
    t0 = time.perf_counter()
    V = s.dp()
    timing["dp"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    H = s.hjb("sub")
    timing["hjb"] = time.perf_counter() - t0
    x = V.nodes
    K = np.stack([kp.cost_at(k, x) for k in range(len(kp.times))])
    dx = V.grid.dx
    cols: dict[str, Any] = {"t": kp.times}
    for i in range(lm.n):
        cols[f"xhat{i + 1}"] = kp.xhat[:, i]
    cols["P"] = kp.P[:, 0, 0] if lm.n == 1 else np.array([np.trace(P) for P in kp.P])
    for i in range(lm.n):
        cols[f"truth{i + 1}"] = s.traj.states[:, i]
    for label, fld in (("dp", V), ("hjb", H)):
        est = observer_path(fld)
        for i in range(lm.n):
            cols[f"{label}_observer{i + 1}"] = est[:, i]
        cols[f"{label}_error"] = np.max(np.abs(fld.values - K), axis=1)
        cols[f"{label}_argmin_dev"] = np.linalg.norm(est - kp.xhat, axis=1) / dx
    f = w.table("kalman_xcheck.csv", cols)
    _value_table(w, "value_dp.csv", V)
    _value_table(w, "value_hjb.csv", H)
    metrics = [
        w.metric("dp_sup_error", {"file": f, "reduce": "max", "y": "dp_error"}),
        w.metric("hjb_sup_error", {"file": f, "reduce": "max", "y": "hjb_error"}),
        w.metric("dp_argmin_dev", {"file": f, "reduce": "max", "y": "dp_argmin_dev"}),
        w.metric("hjb_argmin_dev", {"file": f, "reduce": "max", "y": "hjb_argmin_dev"}),
    ]

    z = cfg.section("zakai")
    if "epsilon" in z and s.d.kind == "interval":
        eps = float(z["epsilon"])
        g = CellGrid.on(s.d, int(z.get("cells", 401)))
        q0, lo = initial_density(s.psi, g, eps)
        t0 = time.perf_counter()
        fd = zakai_solve(s.vf, s.d, s.obs, q0, eps, dt=z.get("dt"), log_offset=lo)
        timing["zakai"] = time.perf_counter() - t0
        inner = np.abs(g.centers - 0.5 * (g.a + g.b)) <= float(z.get("inner", 0.3 * (g.b - g.a)))
        res = [
            _centered_residual(fd.log_transform(k)[inner], kp.cost_at(kp.index(fd.times[k]), g.centers[inner, None]))
            for k in range(1, len(fd.times))
        ]
        fz = w.table("zakai_kalman.csv", {"t": fd.times[1:], "residual": res})
        metrics.append(w.metric("zakai_kalman_residual", {"file": fz, "reduce": "max", "y": "residual"}))
    return _report(cfg, w, metrics, ["observer_vs_truth", "value_slices"])


# -- HJB versus DP -------------------------------------------------------------


def _hjb_member(args) -> ValueField:
    raw, what, nodes = args
    s = _setup(raw)
    fld = s.dp(nodes) if what == "dp" else s.hjb(what, nodes)
    fld.meta.pop("problem", None)  # keeps the pickle small
    return fld


def _zakai_wall_member(args) -> list[dict[str, float]]:
    raw, eps = args
    s = _setup(raw)
    z = s.cfg.section("zakai")
    g = CellGrid.on(s.d, int(z.get("cells", 401)))
    q0, lo = initial_density(s.psi, g, eps)
    fd = zakai_solve(s.vf, s.d, s.obs, q0, eps, dt=z.get("dt"), log_offset=lo)
    slopes = wall_slopes(fd, s.vf, len(fd.times) - 1)
    return [dict(v, wall=-1.0 if name == "lower" else 1.0, epsilon=eps) for name, v in slopes.items()]


def _refined_interior_change(coarse: ValueField, fine: ValueField) -> np.ndarray:
    """Per-time sup change at interior coarse nodes when the grid is refined."""
    interior = coarse.in_domain & ~coarse.grid.boundary_layer()[coarse.grid.active]
    pts = coarse.nodes[interior]
    out = np.empty(len(coarse.times))
    for k in range(len(coarse.times)):
        full = np.full(fine.grid.size, np.nan)
        full[fine.grid.active] = fine.values[k]
        fv = fine.grid.interpolate(full[fine.grid.fill_index()], pts)
        out[k] = float(np.max(np.abs(fv - coarse.values[k, interior])))
    return out


def run_hjb_vs_dp(cfg: ExperimentConfig, w: ArtifactWriter, timing: dict) -> RunReport:
    nodes = int(cfg.section("grid").get("nodes", 201))
    fine = 2 * nodes - 1
    refine = bool(cfg.section("hjb").get("refine", True))
    jobs = [(cfg.raw, "dp", nodes), (cfg.raw, "sub", nodes), (cfg.raw, "super", nodes)]
    if refine:
        jobs += [(cfg.raw, "sub", fine), (cfg.raw, "super", fine)]
    t0 = time.perf_counter()
    res = pool_map(_hjb_member, jobs)
    timing["solves"] = time.perf_counter() - t0
    V, S, P = res[:3]
    _value_table(w, "value_dp.csv", V)
    _value_table(w, "value_hjb_sub.csv", S)
    _value_table(w, "value_hjb_super.csv", P)
    bd = V.grid.boundary_layer()[V.grid.active]
    cols = {
        "t": V.times,
        "sub_vs_dp": _row_sup(S, V),
        "super_vs_dp": _row_sup(P, V),
        "sub_vs_super_boundary": _row_sup(S, P, bd),
        "sub_vs_super_interior": _row_sup(S, P, ~bd),
    }
    if refine:
        cols["interior_change"] = np.maximum(_refined_interior_change(S, res[3]), _refined_interior_change(P, res[4]))
    f = w.table("hjb_vs_dp.csv", cols)
    metrics = [
        w.metric("sub_vs_dp", {"file": f, "reduce": "max", "y": "sub_vs_dp"}),
        w.metric("super_vs_dp", {"file": f, "reduce": "max", "y": "super_vs_dp"}),
    ]
    if refine:
        metrics.append(
            w.metric("boundary_contrast_ratio", {"file": f, "reduce": "ratio_of_max", "y": "sub_vs_super_boundary", "x": "interior_change"})
        )

    s = Setup(cfg)
    rep = {name: hjb_residual_report(fld, s.vf, s.cost) for name, fld in (("dp", V), ("sub", S), ("super", P))}
    w.table(
        "residuals.csv",
        {
            "field": [0.0, 1.0, 2.0],  # dp, hjb sub, hjb super
            "interior": [rep[k]["interior_max_residual"] for k in ("dp", "sub", "super")],
            "boundary_sub": [rep[k]["boundary_sub_residual"] for k in ("dp", "sub", "super")],
            "boundary_super": [rep[k]["boundary_super_residual"] for k in ("dp", "sub", "super")],
        },
    )

    eps = cfg.section("sweep").get("epsilon")
    if eps and s.d.kind == "interval":
        t0 = time.perf_counter()
        rows = [r for part in pool_map(_zakai_wall_member, [(cfg.raw, float(e)) for e in cfg.epsilons()]) for r in part]
        timing["zakai"] = time.perf_counter() - t0
        keys = ("epsilon", "wall", "b_n", "dV_dn", "sub", "super")
        cols = {k: [r[k] for r in rows] for k in keys}
        cols["super_over_sub"] = [r["super"] / r["sub"] if r["sub"] > 0 else math.inf for r in rows]
        fw = w.table("wall_slopes.csv", cols)
        if any(r["b_n"] > 0 for r in rows):
            metrics.append(
                w.metric(
                    "wall_super_over_sub",
                    {"file": fw, "reduce": "max", "y": "super_over_sub", "where": [{"col": "b_n", "op": ">", "value": 0.0}]},
                )
            )
    return _report(cfg, w, metrics, ["value_slices"])


# -- Laplace sweep and duality -------------------------------------------------


def _laplace_member(args) -> dict[str, Any]:
    raw, eps, cells, dt, probe_cfgs, dual = args
    s = _setup(raw)
    g = CellGrid.on(s.d, cells)
    q0, lo = initial_density(s.psi, g, eps)
    fd = zakai_solve(s.vf, s.d, s.obs, q0, eps, dt=dt, log_offset=lo)
    k = len(fd.times) - 1
    out: dict[str, Any] = {"epsilon": eps, "cells": cells, "dt": fd.meta["dt"], "values": [], "gaps": []}
    for pc in probe_cfgs:
        probe = make_probe(pc)
        out["values"].append(laplace_functional(fd, probe, k))
        if dual:
            back = dual_solve(s.vf, s.d, s.obs, probe, eps, float(fd.times[-1]), dt=dt, cells=cells)
            out["gaps"].append(duality_gap(fd, back))
    return out


def run_laplace_sweep(cfg: ExperimentConfig, w: ArtifactWriter, timing: dict) -> RunReport:
    eps_list = cfg.epsilons()
    probes = cfg.probes()
    names = [p.get("name", "zero") for p in probes]
    z = cfg.section("zakai")
    cells = int(z.get("cells", 401))
    dt = z.get("dt")
    t0 = time.perf_counter()
    s = Setup(cfg)
    V = s.dp()
    timing["dp"] = time.perf_counter() - t0
    x = V.nodes
    last = np.where(V.unreachable[-1], np.inf, V.values[-1])
    targets = [float(np.min(make_probe(pc)(x[:, 0]) + last)) for pc in probes]

    jobs = [(cfg.raw, e, cells, dt, probes, True) for e in eps_list]
    ref_eps = z.get("duality_epsilon")
    refine = bool(z.get("duality_refine")) and ref_eps is not None
    if refine:
        # the refined run halves both the cell width and the time step
        ref_eps = float(ref_eps)
        base_dt = step_size(s.vf, s.d, s.obs, cells, dt)
        if ref_eps not in eps_list:
            jobs.append((cfg.raw, ref_eps, cells, base_dt, probes[:1], True))
        jobs.append((cfg.raw, ref_eps, 2 * cells, 0.5 * base_dt, probes[:1], True))
    t0 = time.perf_counter()
    res = pool_map(_laplace_member, jobs)
    timing["zakai"] = time.perf_counter() - t0

    metrics = []
    sweep = res[: len(eps_list)]
    for j, name in enumerate(names):
        vals = [r["values"][j] for r in sweep]
        gaps = [abs(v - targets[j]) for v in vals]
        f = w.table(f"laplace_{name}.csv", {"epsilon": eps_list, "value": vals, "target": [targets[j]] * len(vals), "gap": gaps})
        metrics += [
            w.metric(f"laplace_{name}_step_ratio", {"file": f, "reduce": "step_ratio", "x": "epsilon", "y": "gap", "order": "desc"}),
            w.metric(f"laplace_{name}_final_gap", {"file": f, "reduce": "last", "x": "epsilon", "y": "gap", "order": "desc"}),
            w.metric(f"laplace_{name}_slope", {"file": f, "reduce": "loglog_slope", "x": "epsilon", "y": "gap"}),
        ]

    rows = {"epsilon": [], "cells": [], "dt": [], "probe": [], "gap": []}
    for r in res:
        for j, gap in enumerate(r["gaps"]):
            rows["epsilon"].append(r["epsilon"])
            rows["cells"].append(r["cells"])
            rows["dt"].append(r["dt"])
            rows["probe"].append(j)
            rows["gap"].append(gap)
    fd_ = w.table("duality.csv", rows)
    metrics.append(
        w.metric("duality_gap_max", {"file": fd_, "reduce": "max", "y": "gap", "where": [{"col": "cells", "op": "==", "value": cells}]})
    )
    if refine:
        where = [{"col": "epsilon", "op": "==", "value": float(ref_eps)}, {"col": "probe", "op": "==", "value": 0}]
        metrics.append(w.metric("duality_refine_ratio", {"file": fd_, "reduce": "ratio_first_last", "x": "cells", "y": "gap", "where": where}))
    return _report(cfg, w, metrics, ["laplace_vs_eps"])


# -- Hoelder check -------------------------------------------------------------


def run_holder_check(cfg: ExperimentConfig, w: ArtifactWriter, timing: dict) -> RunReport:
    s = Setup(cfg)
    hc = cfg.section("holder")
    tw = cfg.twin()
    n_paths = int(hc.get("trajectories", 50))
    amp = float(hc.get("amplitude", 1.0))
    rng = make_rng(cfg.seed, 4)
    x0 = s.d.sample(rng, n_paths)
    K = n_steps(0.0, tw["t_end"], tw["dt"])
    coarse = DisturbancePath(0.0, tw["dt"], np.zeros((K, s.vf.r)))
    W = amp * rng.standard_normal((K, n_paths, s.vf.r))
    t0 = time.perf_counter()
    qc, qf = [], []
    for refine, store in ((1, qc), (2, qf)):
        Wr = np.repeat(W, refine, axis=0)
        dt = coarse.dt / refine
        paths = reflected_paths(s.vf, s.d, x0, Wr, 0.0, dt)
        times = dt * np.arange(paths.shape[0])
        store.extend(holder_quotient(times, paths[:, i]) for i in range(n_paths))
    timing["paths"] = time.perf_counter() - t0
    f = w.table("holder.csv", {"path": np.arange(n_paths), "coarse": qc, "fine": qf})
    metrics = [
        w.metric("holder_max", {"file": f, "reduce": "max", "y": "fine"}),
        w.metric("holder_ratio_max", {"file": f, "reduce": "max_sym_ratio", "x": "coarse", "y": "fine"}),
    ]
    return _report(cfg, w, metrics, [])


# -- Bellman check -------------------------------------------------------------


def run_bellman_check(cfg: ExperimentConfig, w: ArtifactWriter, timing: dict) -> RunReport:
    s = Setup(cfg)
    bc = cfg.section("bellman")
    taus = [float(t) for t in bc.get("tau", [0.1])]
    samples = int(bc.get("samples", 200))
    t0 = time.perf_counter()
    V = s.dp()
    timing["dp"] = time.perf_counter() - t0
    _value_table(w, "value_dp.csv", V)
    t0 = time.perf_counter()
    res = [bellman_residual(V, tau, samples, cfg.seed) for tau in taus]
    timing["bellman"] = time.perf_counter() - t0
    f = w.table("bellman.csv", {"tau": taus, "samples": [samples] * len(taus), "residual": res})
    return _report(cfg, w, [w.metric("bellman_residual", {"file": f, "reduce": "max", "y": "residual"})], ["value_slices"])


PIPELINES = {
    "twin": run_twin,
    "kappa-sweep": run_kappa_sweep,
    "kalman-xcheck": run_kalman_xcheck,
    "hjb-vs-dp": run_hjb_vs_dp,
    "laplace-sweep": run_laplace_sweep,
    "holder-check": run_holder_check,
    "bellman-check": run_bellman_check,
}


def _report(cfg: ExperimentConfig, w: ArtifactWriter, metrics, plots) -> RunReport:
    return RunReport(cfg.name, cfg.kind, cfg.seed, cfg.digest(), metrics, sorted(w.files), plots)


def run_scenario(cfg: ExperimentConfig, out) -> RunReport:
    """Validate, run the pipeline named by ``cfg.kind``, write report and manifest."""
    check_tolerances(cfg)
    out = Path(out)
    w = ArtifactWriter(out, cfg.tolerances(), METRIC_OPS)
    (out / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n")
    timing: dict[str, float] = {}
    t0 = time.perf_counter()
    try:
        report = PIPELINES[cfg.kind](cfg, w, timing)
    except ConfigError:
        raise
    except (ValueError, ArithmeticError) as exc:
        raise RuntimeError(f"{cfg.name} [{cfg.kind}]: {type(exc).__name__}: {exc}") from exc
    timing["total"] = time.perf_counter() - t0
    report.artifacts = sorted(set(report.artifacts) | {"config.json"})
    report.write(out)
    (out / TIMING).write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    write_manifest(out)
    return report

