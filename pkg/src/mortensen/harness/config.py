"""Experiment configuration: one TOML file per scenario.

Schema (all tables optional unless a pipeline needs them)::

    name = "bench_1d_attract"
    kind = "kappa-sweep"          # default pipeline
    kinds = ["kappa-sweep", ...]  # pipelines the file is meant for
    seed = 7

    [domain]      kind = "interval" | "box" | "ball" and its parameters
    [model]       drift / diffusion / observation catalog tables
    [cost]        initial cost psi (catalog entry)
    [kalman]      A, Sigma, H, P0, x0; replaces [model] and [cost]
    [twin]        x0, t_end, dt, process_noise, obs_noise, process_bias
    [grid]        nodes, controls, omega_max, substeps
    [sweep]       kappa, epsilon, probes, trajectories, amplitude, spike_l2, spike_window
    [hjb]         flux, cfl, refine
    [zakai]       cells, dt, epsilon, inner, duality_epsilon, duality_refine
    [holder]      trajectories, amplitude
    [bellman]     tau, samples
    [tolerances]  metric name -> threshold; the comparison is in ``scenarios.METRIC_OPS``

Relative paths are not used; the output directory comes from the CLI.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from ..costs import InitialCost, make_initial_cost
from ..dp import ControlLattice
from ..fields import VectorFieldSpec
from ..geometry import Domain
from ..grid import StateGrid
from ..kalman import LinearModel
from ..zakai import ZakaiError, make_probe

KINDS = ("twin", "kappa-sweep", "kalman-xcheck", "hjb-vs-dp", "laplace-sweep", "holder-check", "bellman-check")
BENCHMARKS = ("bench_1d_attract", "bench_1d_outward", "bench_2d_ball_rotation", "bench_kalman_scalar")


class ConfigError(ValueError):
    pass


def _sorted(values, name: str, descending: bool = False) -> list[float]:
    vals = [float(v) for v in values]
    if not vals:
        raise ConfigError(f"sweep list {name!r} is empty")
    pairs = zip(vals, vals[1:])
    ok = all(a > b for a, b in pairs) if descending else all(a < b for a, b in pairs)
    if not ok:
        order = "strictly decreasing" if descending else "strictly increasing"
        raise ConfigError(f"sweep list {name!r} must be {order}")
    return vals


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    kind: str
    seed: int
    raw: dict[str, Any] = field(repr=False)

    # -- construction -------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict[str, Any], kind: str | None = None, seed: int | None = None) -> "ExperimentConfig":
        raw = copy.deepcopy(raw)
        if kind is not None:
            raw["kind"] = kind
        if seed is not None:
            raw["seed"] = int(seed)
        cfg = cls(str(raw.get("name", "experiment")), str(raw.get("kind", "")), int(raw.get("seed", 0)), raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, kind: str | None = None, seed: int | None = None) -> "ExperimentConfig":
        """Read a TOML file; a bare benchmark name loads the bundled file."""
        return cls.from_dict(load_raw(path), kind, seed)

    def section(self, name: str) -> dict[str, Any]:
        return self.raw.get(name, {})

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    # -- builders -----------------------------------------------------
    def domain(self) -> Domain:
        if "domain" not in self.raw:
            raise ConfigError("config has no [domain] table")
        return Domain.from_config(self.raw["domain"])

    def linear_model(self) -> LinearModel | None:
        if "kalman" not in self.raw:
            return None
        return LinearModel.from_config(self.raw["kalman"])

    def vector_field(self) -> VectorFieldSpec:
        d = self.domain()
        lm = self.linear_model()
        if lm is not None:
            return lm.vector_field(d)
        return VectorFieldSpec.from_config(self.section("model"), d)

    def psi(self) -> InitialCost:
        d = self.domain()
        lm = self.linear_model()
        if lm is not None:
            return lm.initial_cost(d)
        if "cost" not in self.raw:
            raise ConfigError("config has no [cost] table")
        return make_initial_cost(self.raw["cost"], d)

    def grid(self, nodes: int | None = None) -> StateGrid:
        g = self.section("grid")
        return StateGrid.build(self.domain(), nodes or g.get("nodes", 201))

    def lattice(self) -> ControlLattice:
        g = self.section("grid")
        return ControlLattice.build(self.vector_field().r, int(g.get("controls", 21)), float(g.get("omega_max", 4.0)))

    def twin(self) -> dict[str, Any]:
        t = dict(self.section("twin"))
        t.setdefault("t_end", 1.0)
        t.setdefault("dt", 1e-2)
        t.setdefault("process_noise", 0.0)
        t.setdefault("obs_noise", 0.0)
        t.setdefault("process_bias", 0.0)
        return t

    def kappas(self) -> list[float]:
        return _sorted(self.section("sweep").get("kappa", []), "kappa")

    def epsilons(self) -> list[float]:
        return _sorted(self.section("sweep").get("epsilon", []), "epsilon", descending=True)

    def probes(self) -> list[dict[str, Any]]:
        """Probe tables; a bare string names a catalog entry with default parameters."""
        p = [q if isinstance(q, dict) else {"name": q} for q in self.section("sweep").get("probes", ["zero"])]
        if not p:
            raise ConfigError("sweep list 'probes' is empty")
        names = [q.get("name", "zero") for q in p]
        if len(set(names)) != len(names):
            raise ConfigError("probe names must be unique")
        return p

    def tolerances(self) -> dict[str, float]:
        return {k: float(v) for k, v in self.section("tolerances").items()}

    # -- validation ---------------------------------------------------
    def validate(self) -> None:
        """Check catalog names, sweep lists and solver preconditions before any compute."""
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        try:
            d = self.domain()
            vf = self.vector_field()
            self.psi()
            grid = self.grid()
            self.lattice()
        except (KeyError, TypeError, ValueError) as exc:
            # catalog, domain, grid and model errors are all ValueErrors
            raise ConfigError(f"{self.name}: {exc}") from None
        tw = self.twin()
        if "x0" not in tw:
            raise ConfigError("[twin] needs x0")
        if not tw["dt"] > 0 or not tw["t_end"] > 0:
            raise ConfigError("[twin] dt and t_end must be positive")
        steps = tw["t_end"] / tw["dt"]
        if abs(steps - round(steps)) > 1e-9 * steps:
            raise ConfigError("[twin] t_end must be a multiple of dt")
        if len(tw["x0"]) != d.dim:
            raise ConfigError("[twin] x0 has the wrong dimension")
        if self.kind == "kappa-sweep":
            self.kappas()
        if self.kind == "laplace-sweep":
            eps = self.epsilons()
            if d.kind != "interval":
                raise ConfigError("laplace-sweep needs a one-dimensional interval")
            if min(eps) <= 0:
                raise ConfigError("epsilon values must be positive")
            try:
                for p in self.probes():
                    make_probe(p)
            except ZakaiError as exc:
                raise ConfigError(str(exc)) from None
            if not vf.identity_noise:
                raise ConfigError("the Zakai solver needs sigma = Id")
        if self.kind == "hjb-vs-dp":
            if not vf.identity_noise:
                raise ConfigError("the HJB solver needs sigma = Id")
            flux = self.section("hjb").get("flux", "godunov" if d.dim == 1 else "lax-friedrichs")
            if flux == "godunov" and d.dim != 1:
                raise ConfigError("the Godunov flux is one-dimensional; use lax-friedrichs")
            cfl = float(self.section("hjb").get("cfl", 0.9))
            if not 0 < cfl <= 1:
                raise ConfigError("hjb cfl must lie in (0, 1]")
        if self.kind == "kalman-xcheck" and self.linear_model() is None:
            raise ConfigError("kalman-xcheck needs a [kalman] table")
        if self.kind == "holder-check" and int(self.section("holder").get("trajectories", 50)) < 1:
            raise ConfigError("holder-check needs at least one trajectory")
        if grid.dx <= 0:  # pragma: no cover - guarded by StateGrid
            raise ConfigError("degenerate grid")


def benchmark_path(name: str) -> Path:
    ref = resources.files("mortensen").joinpath("benchmarks", f"{name}.toml")
    return Path(str(ref))


def load_raw(path) -> dict[str, Any]:
    p = Path(path)
    if not p.exists() and p.suffix == "" and str(path) in BENCHMARKS:
        p = benchmark_path(str(path))
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {str(path)!r} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
