"""Plot-ready long-format CSVs (``series,xvalue,yvalue``) from a finished run."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Callable

import numpy as np

from ..grid import SENTINEL, read_value_csv
from .report import RunReport, read_table

PLOT_DIR = "plotdata"
OBSERVER_PREFIXES = ("observer", "truth", "xhat", "dp_observer", "hjb_observer")
SLICES = 5


class PlotDataError(FileNotFoundError):
    pass


Series = dict[str, tuple[np.ndarray, np.ndarray]]


def _clean(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ok = np.isfinite(x) & np.isfinite(y) & (np.abs(y) < 0.5 * SENTINEL)
    x, y = x[ok], y[ok]
    order = np.argsort(x, kind="stable")
    return x[order], y[order]


def _columns(path: Path, xcol: str, keep: Callable[[str], bool], prefix: str = "") -> Series:
    t = read_table(path)
    return {prefix + k: _clean(t[xcol], v) for k, v in t.items() if k != xcol and keep(k)}


def _error_vs_kappa(out: Path, report: RunReport) -> Series:
    return _columns(out / "kappa_sweep.csv", "kappa", lambda k: k in ("value_error", "path_error", "scaled_distance"))


def _laplace_vs_eps(out: Path, report: RunReport) -> Series:
    series: Series = {}
    for name in sorted(a for a in report.artifacts if a.startswith("laplace_")):
        probe = name[len("laplace_") : -len(".csv")]
        series.update(_columns(out / name, "epsilon", lambda k: k in ("value", "target", "gap"), f"{probe}:"))
    return series


def _observer_vs_truth(out: Path, report: RunReport) -> Series:
    src = "observer.csv" if "observer.csv" in report.artifacts else "kalman_xcheck.csv"
    return _columns(out / src, "t", lambda k: k.startswith(OBSERVER_PREFIXES))


def _value_slices(out: Path, report: RunReport) -> Series:
    series: Series = {}
    for name in sorted(a for a in report.artifacts if a.startswith("value_")):
        times, nodes, values = read_value_csv(out / name)
        if nodes.shape[1] == 1:
            line = np.arange(len(nodes))
        else:
            # the row of nodes closest to the middle of the second axis
            x2 = np.unique(nodes[:, 1])
            mid = x2[len(x2) // 2]
            line = np.nonzero(nodes[:, 1] == mid)[0]
        stem = name[len("value_") : -len(".csv")]
        for k in np.unique(np.linspace(0, len(times) - 1, SLICES).round().astype(int)):
            series[f"{stem}@t={times[k]:.6g}"] = _clean(nodes[line, 0], values[k, line])
    return series


PLOTS: dict[str, tuple[Callable[[RunReport], list[str]], Callable[[Path, RunReport], Series]]] = {
    "error_vs_kappa": (lambda r: ["kappa_sweep.csv"], _error_vs_kappa),
    "laplace_vs_eps": (lambda r: [a for a in r.artifacts if a.startswith("laplace_")] or ["laplace_<probe>.csv"], _laplace_vs_eps),
    "observer_vs_truth": (lambda r: ["observer.csv" if "observer.csv" in r.artifacts else "kalman_xcheck.csv"], _observer_vs_truth),
    "value_slices": (lambda r: [a for a in r.artifacts if a.startswith("value_")] or ["value_<field>.csv"], _value_slices),
}


def write_long_csv(path: Path, series: Series) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["series", "xvalue", "yvalue"])
        for name in sorted(series):
            x, y = series[name]
            for a, b in zip(x, y):
                wr.writerow([name, repr(float(a)), repr(float(b))])


def emit_plotdata(out) -> dict[str, Path]:
    """Write one long-format CSV per plot declared in the run report.

    Raises :class:`PlotDataError` naming every missing source artifact.
    """
    out = Path(out)
    report = RunReport.read(out)
    missing = []
    for plot in report.plots:
        sources, _ = PLOTS[plot]
        missing += [s for s in sources(report) if not (out / s).exists()]
    if missing:
        raise PlotDataError("missing artifacts: " + ", ".join(sorted(set(missing))))
    target = out / PLOT_DIR
    target.mkdir(exist_ok=True)
    written = {}
    for plot in report.plots:
        path = target / f"{plot}.csv"
        write_long_csv(path, PLOTS[plot][1](out, report))
        written[plot] = path
    return written
