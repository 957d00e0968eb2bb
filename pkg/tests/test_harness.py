import json
import math
import subprocess
import sys

import numpy as np
import pytest

from mortensen.grid import SENTINEL
from mortensen.harness import audit as audit_mod
from mortensen.harness.cli import EXIT_FAIL, EXIT_INPUT, EXIT_OK, EXIT_SOLVER, main
from mortensen.harness.config import BENCHMARKS, ConfigError, ExperimentConfig, load_raw
from mortensen.harness.plotdata import PlotDataError, emit_plotdata
from mortensen.harness.report import MANIFEST, Metric, ReportError, RunReport, apply_recipe, table_from_columns
from mortensen.harness.scenarios import run_scenario, worker_count

SMALL = """
name = "small"
kind = "twin"
seed = 4

[domain]
kind = "interval"
a = 0.0
b = 1.0

[model]
drift = { name = "linear", A = [[-1.0]], offset = [0.5] }

[cost]
name = "quadratic"
center = [0.2]
P0 = [[0.25]]

[twin]
x0 = [0.8]
t_end = 0.2
dt = 1e-2
process_noise = 0.5
obs_noise = 0.05

[grid]
nodes = 41
controls = 21
omega_max = 6.0

[sweep]
kappa = [10.0, 100.0]
epsilon = [0.2, 0.1]
probes = ["zero", "linear"]
trajectories = 4

[hjb]
refine = true

[zakai]
cells = 60

[bellman]
tau = [0.01, 0.05]
samples = 20
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def with_lines(path, *lines):
    path.write_text(path.read_text() + "\n" + "\n".join(lines) + "\n")
    return path


# -- configuration ----------------------------------------------------------


@pytest.mark.parametrize("bench", BENCHMARKS)
def test_bundled_benchmarks_validate_for_their_kinds(bench):
    raw = load_raw(bench)
    for kind in raw["kinds"]:
        cfg = ExperimentConfig.load(bench, kind=kind)
        assert cfg.name == bench and cfg.kind == kind


@pytest.mark.parametrize(
    "edit, message",
    [
        (("kappa = []", "kappa-sweep"), "empty"),
        (("kappa = [100.0, 10.0]", "kappa-sweep"), "strictly increasing"),
        (("epsilon = [0.1, 0.2]", "laplace-sweep"), "strictly decreasing"),
        (('probes = ["zero", "zero"]', "laplace-sweep"), "unique"),
    ],
)
def test_bad_sweeps_rejected(small, edit, message):
    line, kind = edit
    key = line.split(" = ")[0]
    text = "\n".join(line if ln.startswith(key + " =") else ln for ln in small.read_text().splitlines())
    small.write_text(text)
    with pytest.raises(ConfigError, match=message):
        ExperimentConfig.load(small, kind=kind)


def test_config_errors(small, tmp_path):
    with pytest.raises(ConfigError, match="unknown kind"):
        ExperimentConfig.load(small, kind="nonsense")
    with pytest.raises(ConfigError, match="not found"):
        ExperimentConfig.load(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("name = [unclosed")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(bad)
    raw = load_raw(small)
    raw["model"]["drift"] = {"name": "vortex"}
    with pytest.raises(ConfigError, match="vortex"):
        ExperimentConfig.from_dict(raw)
    raw = load_raw(small)
    raw["twin"]["t_end"] = 0.205
    with pytest.raises(ConfigError, match="multiple"):
        ExperimentConfig.from_dict(raw)
    raw = load_raw(small)
    raw["twin"]["x0"] = [0.1, 0.2]
    with pytest.raises(ConfigError, match="dimension"):
        ExperimentConfig.from_dict(raw)


def test_digest_tracks_content(small):
    a = ExperimentConfig.load(small)
    assert a.digest() == ExperimentConfig.load(small).digest()
    assert a.digest() != ExperimentConfig.load(small, seed=5).digest()


def test_unknown_tolerance_rejected(small, tmp_path):
    with_lines(small, "[tolerances]", "observer_error_maxx = 1.0")
    with pytest.raises(ConfigError, match="observer_error_maxx"):
        run_scenario(ExperimentConfig.load(small), tmp_path / "out")


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("MORTENSEN_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("MORTENSEN_THREADS", "zero")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.setenv("MORTENSEN_THREADS", "0")
    with pytest.raises(ConfigError):
        worker_count()


# -- metric recipes -----------------------------------------------------------


def test_reductions():
    t = table_from_columns({"x": [4.0, 1.0, 2.0, 8.0], "y": [0.5, 1.0, 1 / math.sqrt(2), 1 / math.sqrt(8)]})
    assert apply_recipe(t, {"reduce": "loglog_slope", "x": "x", "y": "y"}) == pytest.approx(-0.5)
    assert apply_recipe(t, {"reduce": "step_ratio", "x": "x", "y": "y"}) == pytest.approx(1 / math.sqrt(2))
    assert apply_recipe(t, {"reduce": "ratio_first_last", "x": "x", "y": "y"}) == pytest.approx(math.sqrt(8))
    assert apply_recipe(t, {"reduce": "ratio_first_last", "x": "x", "y": "y", "order": "desc"}) == pytest.approx(1 / math.sqrt(8))
    assert apply_recipe(t, {"reduce": "last", "x": "x", "y": "y"}) == pytest.approx(1 / math.sqrt(8))
    assert apply_recipe(t, {"reduce": "max_over_min", "y": "x"}) == 8.0
    assert apply_recipe(t, {"reduce": "ratio_of_max", "x": "x", "y": "y"}) == 1.0 / 8.0
    assert apply_recipe(t, {"reduce": "max", "y": "x", "where": [{"col": "y", "op": "<", "value": 0.6}]}) == 8.0
    u = table_from_columns({"a": [1.0, 2.0], "b": [2.0, 1.0]})
    assert apply_recipe(u, {"reduce": "max_sym_ratio", "x": "a", "y": "b"}) == 2.0
    with pytest.raises(ReportError):
        apply_recipe(t, {"reduce": "median", "y": "x"})
    with pytest.raises(ReportError):
        apply_recipe(t, {"reduce": "max", "y": "x", "where": [{"col": "x", "op": ">", "value": 100.0}]})


def test_metric_verdicts():
    assert Metric("a", 1.0, {}, 2.0, "<=").passed is True
    assert Metric("a", 3.0, {}, 2.0, "<=").passed is False
    assert Metric("a", 2.0, {}, 2.0, "<").passed is False
    assert Metric("a", 6.0, {}, 5.0, ">").passed is True
    assert Metric("a", math.nan, {}, 5.0, "<=").passed is False
    assert Metric("a", 1.0, {}).passed is None
    rep = RunReport("n", "twin", 1, "d", [Metric("a", 1.0, {"file": "f"}, 2.0)], ["f"], [])
    back = RunReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert back == rep and back.passed


# -- end-to-end runs, audit, plot data ---------------------------------------


@pytest.mark.parametrize("kind", ["twin", "kappa-sweep", "hjb-vs-dp", "laplace-sweep", "holder-check", "bellman-check"])
def test_every_pipeline_runs_and_audits(small, tmp_path, kind):
    out = tmp_path / kind
    rep = run_scenario(ExperimentConfig.load(small, kind=kind), out)
    assert rep.metrics and all(math.isfinite(m.value) for m in rep.metrics)
    res = audit_mod.audit(out)
    assert res.ok and res.checked == len(rep.metrics)
    emit_plotdata(out)


def test_kalman_pipeline_runs(tmp_path):
    raw = load_raw("bench_kalman_scalar")
    raw["twin"]["t_end"] = 0.2
    raw["grid"]["nodes"] = 81
    out = tmp_path / "k"
    rep = run_scenario(ExperimentConfig.from_dict(raw, kind="kalman-xcheck"), out)
    assert rep.metric("dp_sup_error").value < 5e-2
    assert audit_mod.audit(out).ok


def test_audit_detects_tampering(small, tmp_path):
    out = tmp_path / "run"
    run_scenario(ExperimentConfig.load(small), out)
    path = out / "observer.csv"
    lines = path.read_text().splitlines()
    head, first = lines[0], lines[1].split(",")
    first[-1] = "123.0"
    path.write_text("\n".join([head, ",".join(first)] + lines[2:]) + "\n")
    res = audit_mod.audit(out)
    assert "observer.csv" in res.tampered
    assert any("observer_error_max" in m for m in res.mismatches)
    assert audit_mod.main([str(out)]) == 1


def test_plotdata_format_and_missing_artifacts(small, tmp_path):
    out = tmp_path / "run"
    run_scenario(ExperimentConfig.load(small), out)
    written = emit_plotdata(out)
    assert set(written) == {"observer_vs_truth", "value_slices"}
    for path in written.values():
        lines = path.read_text().splitlines()
        assert lines[0] == "series,xvalue,yvalue"
        rows = [ln.split(",") for ln in lines[1:]]
        series = {}
        for name, x, y in rows:
            series.setdefault(name, []).append((float(x), float(y)))
        for pts in series.values():
            xs = [p[0] for p in pts]
            assert xs == sorted(xs)
            assert all(abs(p[1]) < 0.5 * SENTINEL for p in pts)
    (out / "observer.csv").unlink()
    with pytest.raises(PlotDataError, match="observer.csv"):
        emit_plotdata(out)


def test_determinism_across_worker_counts(small, tmp_path, monkeypatch):
    cfg = ExperimentConfig.load(small, kind="kappa-sweep")
    monkeypatch.setenv("MORTENSEN_THREADS", "1")
    run_scenario(cfg, tmp_path / "a")
    monkeypatch.setenv("MORTENSEN_THREADS", "2")
    run_scenario(cfg, tmp_path / "b")
    ma = json.loads((tmp_path / "a" / MANIFEST).read_text())
    mb = json.loads((tmp_path / "b" / MANIFEST).read_text())
    assert ma == mb and "kappa_sweep.csv" in ma


# -- command line -------------------------------------------------------------


def test_cli_exit_codes(small, tmp_path, capsys):
    assert main(["simulate", "--config", str(small), "--out", str(tmp_path / "ok")]) == EXIT_OK
    assert main(["report", "--out", str(tmp_path / "ok"), "--config", str(small)]) == EXIT_OK
    assert "OK" in capsys.readouterr().out
    assert main(["report", "--out", str(tmp_path / "ok"), "--config", str(small), "--seed", "9"]) == EXIT_INPUT

    strict = tmp_path / "strict.toml"
    strict.write_text(small.read_text())
    with_lines(strict, "[tolerances]", "observer_error_max = 1e-9")
    assert main(["simulate", "--config", str(strict), "--out", str(tmp_path / "fail")]) == EXIT_FAIL

    assert main(["dp", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "x")]) == EXIT_INPUT
    assert main(["report", "--out", str(tmp_path / "empty")]) == EXIT_INPUT

    starved = tmp_path / "starved.toml"
    starved.write_text(small.read_text().replace("omega_max = 6.0", "omega_max = 0.01").replace("controls = 21", "controls = 3"))
    assert main(["dp", "--config", str(starved), "--out", str(tmp_path / "y")]) == EXIT_SOLVER
    assert "unreachable" in capsys.readouterr().err


def test_cli_sweep_uses_config_kind_or_flag(small, tmp_path):
    assert main(["sweep", "--config", str(small), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert RunReport.read(tmp_path / "a").kind == "twin"
    assert main(["sweep", "--kind", "bellman-check", "--config", str(small), "--out", str(tmp_path / "b")]) == EXIT_OK
    assert RunReport.read(tmp_path / "b").kind == "bellman-check"


def test_console_entry_point_installed(small, tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "mortensen.harness.cli", "simulate", "--config", str(small), "--out", str(tmp_path / "c")],
        capture_output=True,
        text=True,
    )
    assert res.returncode == 0, res.stderr
    assert "small [twin] seed=4: PASS" in res.stdout
    assert np.isfinite(RunReport.read(tmp_path / "c").metric("observer_error_max").value)
