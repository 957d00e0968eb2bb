"""Run reports, metric recipes and the artifact manifest.

Every metric names the CSV it is computed from and a reduction over that
file's columns, so the audit can recompute it from the outputs alone.
"""

from __future__ import annotations

import hashlib
import json
import math
import operator
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..dynamics import read_csv, write_csv

REPORT = "report.json"
MANIFEST = "manifest.json"
TIMING = "timing.json"  # wall-clock; not reproducible, so kept out of the manifest
UNHASHED = (MANIFEST, TIMING)

OPS = {"<=": operator.le, "<": operator.lt, ">=": operator.ge, ">": operator.gt}
FILTER_OPS = {"==": np.equal, "<": np.less, ">": np.greater, "<=": np.less_equal, ">=": np.greater_equal}


class ReportError(ValueError):
    pass


# -- reductions ----------------------------------------------------------------


def _sorted_xy(table: dict[str, np.ndarray], recipe: dict[str, Any]) -> tuple[np.ndarray, np.ndarray]:
    """Columns ``x`` and ``y`` sorted by x (decreasing when ``order = "desc"``)."""
    x = table[recipe["x"]]
    y = table[recipe["y"]]
    order = np.argsort(-x if recipe.get("order") == "desc" else x, kind="stable")
    return x[order], y[order]


def _loglog_slope(table, recipe) -> float:
    x, y = _sorted_xy(table, recipe)
    if np.any(x <= 0) or np.any(y <= 0):
        return math.nan
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _step_ratio(table, recipe) -> float:
    """max y[i+1] / y[i] along the sorted x: < 1 strictly decreasing, <= 1 non-increasing."""
    _, y = _sorted_xy(table, recipe)
    if len(y) < 2:
        return math.nan
    with np.errstate(divide="ignore", invalid="ignore"):
        r = y[1:] / y[:-1]
    return float(np.max(r))


def _ratio_first_last(table, recipe) -> float:
    """y at the first x divided by y at the last x (in sort order)."""
    _, y = _sorted_xy(table, recipe)
    return float(y[0] / y[-1]) if y[-1] != 0 else math.inf


def _max_over_min(table, recipe) -> float:
    y = table[recipe["y"]]
    return float(np.max(y) / np.min(y)) if np.min(y) > 0 else math.inf


def _ratio_of_max(table, recipe) -> float:
    den = float(np.max(table[recipe["x"]]))
    return float(np.max(table[recipe["y"]])) / den if den > 0 else math.inf


def _max_sym_ratio(table, recipe) -> float:
    """max over rows of max(a / b, b / a) for columns ``x`` and ``y``."""
    a, b = table[recipe["x"]], table[recipe["y"]]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.maximum(a / b, b / a)
    return float(np.max(r))


REDUCTIONS = {
    "max": lambda t, r: float(np.max(t[r["y"]])),
    "min": lambda t, r: float(np.min(t[r["y"]])),
    "last": lambda t, r: float(_sorted_xy(t, r)[1][-1]),
    "max_abs": lambda t, r: float(np.max(np.abs(t[r["y"]]))),
    "loglog_slope": _loglog_slope,
    "step_ratio": _step_ratio,
    "ratio_first_last": _ratio_first_last,
    "max_over_min": _max_over_min,
    "ratio_of_max": _ratio_of_max,
    "max_sym_ratio": _max_sym_ratio,
}


def read_table(path) -> dict[str, np.ndarray]:
    header, data = read_csv(path)
    return {h: data[:, i] for i, h in enumerate(header)}


def table_from_columns(columns: dict[str, Any]) -> dict[str, np.ndarray]:
    return {k: np.atleast_1d(np.asarray(v, float)) for k, v in columns.items()}


def apply_recipe(table: dict[str, np.ndarray], recipe: dict[str, Any]) -> float:
    for flt in recipe.get("where", []):
        mask = FILTER_OPS[flt["op"]](table[flt["col"]], flt["value"])
        table = {k: v[mask] for k, v in table.items()}
    if not table or len(next(iter(table.values()))) == 0:
        raise ReportError(f"recipe {recipe} selects no rows")
    try:
        fn = REDUCTIONS[recipe["reduce"]]
    except KeyError:
        raise ReportError(f"unknown reduction {recipe.get('reduce')!r}") from None
    return fn(table, recipe)


# -- metrics and reports -------------------------------------------------------


@dataclass(frozen=True)
class Metric:
    name: str
    value: float
    recipe: dict[str, Any]
    threshold: float | None = None
    op: str = "<="

    @property
    def passed(self) -> bool | None:
        if self.threshold is None:
            return None
        return bool(np.isfinite(self.value) and OPS[self.op](self.value, self.threshold))

    def describe(self) -> str:
        if self.threshold is None:
            return f"{self.name} = {self.value:.6g}"
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name} = {self.value:.6g} (needs {self.op} {self.threshold:g})"


@dataclass
class RunReport:
    name: str
    kind: str
    seed: int
    config_digest: str
    metrics: list[Metric] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    plots: list[str] = field(default_factory=list)
    notes: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(m.passed is not False for m in self.metrics)

    def metric(self, name: str) -> Metric:
        for m in self.metrics:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["metrics"] = [dict(asdict(m), passed=m.passed) for m in self.metrics]
        d["passed"] = self.passed
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunReport":
        metrics = [Metric(m["name"], float(m["value"]), m["recipe"], m["threshold"], m["op"]) for m in d["metrics"]]
        return cls(d["name"], d["kind"], int(d["seed"]), d["config_digest"], metrics, list(d["artifacts"]), list(d["plots"]), dict(d.get("notes", {})))

    def write(self, out: Path) -> None:
        (out / REPORT).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, out: Path) -> "RunReport":
        path = Path(out) / REPORT
        if not path.exists():
            raise ReportError(f"no {REPORT} in {out}")
        return cls.from_dict(json.loads(path.read_text()))

    def summary(self) -> str:
        lines = [f"{self.name} [{self.kind}] seed={self.seed}: {'PASS' if self.passed else 'FAIL'}"]
        lines += ["  " + m.describe() for m in self.metrics]
        return "\n".join(lines)


class ArtifactWriter:
    """Writes CSVs under ``out`` and turns recipes over them into metrics."""

    def __init__(self, out: Path, tolerances: dict[str, float], ops: dict[str, str]):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.tolerances = tolerances
        self.ops = ops
        self.tables: dict[str, dict[str, np.ndarray]] = {}
        self.files: list[str] = []

    def table(self, name: str, columns: dict[str, Any]) -> str:
        table = table_from_columns(columns)
        write_csv(self.out / name, list(table), np.column_stack(list(table.values())))
        self.tables[name] = table
        self.files.append(name)
        return name

    def add_file(self, name: str) -> str:
        self.files.append(name)
        return name

    def metric(self, name: str, recipe: dict[str, Any]) -> Metric:
        value = apply_recipe(self.tables[recipe["file"]], recipe)
        thr = self.tolerances.get(name)
        return Metric(name, value, recipe, thr, self.ops.get(name, "<="))


# -- manifest ------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path) -> dict[str, str]:
    out = Path(out)
    entries = {
        p.relative_to(out).as_posix(): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name not in UNHASHED
    }
    (out / MANIFEST).write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return entries


def verify_manifest(out: Path) -> list[str]:
    """Names of artifacts whose hash differs from the manifest (or are missing)."""
    out = Path(out)
    path = out / MANIFEST
    if not path.exists():
        raise ReportError(f"no {MANIFEST} in {out}")
    entries = json.loads(path.read_text())
    bad = []
    for name, digest in entries.items():
        p = out / name
        if not p.exists() or sha256_file(p) != digest:
            bad.append(name)
    return bad
