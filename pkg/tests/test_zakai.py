import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mortensen.costs import make_initial_cost
from mortensen.dynamics import ObservationPath, twin_experiment
from mortensen.fields import VectorFieldSpec
from mortensen.geometry import Domain
from mortensen.kalman import LinearModel, kalman_estimate
from mortensen.zakai import (
    CellGrid,
    FilterDensity,
    StabilityError,
    ZakaiError,
    dual_solve,
    duality_gap,
    initial_density,
    laplace_functional,
    make_probe,
    step_size,
    wall_slopes,
    zakai_solve,
)

UNIT = Domain.interval(0.0, 1.0)
PSI = make_initial_cost({"name": "quadratic", "center": [0.3], "P0": [[0.05]]}, UNIT)


def blind(drift):
    return VectorFieldSpec.from_config({"drift": drift, "observation": {"name": "zero"}}, UNIT)


def silent(steps=50, dt=1e-2):
    return ObservationPath(0.0, dt, np.zeros((steps, 1)))


DRIFTS = [
    {"name": "zero"},
    {"name": "constant", "value": [1.0]},
    {"name": "constant", "value": [-0.7]},
    {"name": "linear", "A": [[-1.0]], "offset": [0.5]},
]


@settings(max_examples=20, deadline=None)
@given(drift=st.sampled_from(DRIFTS), eps=st.floats(0.02, 0.5), cells=st.integers(20, 200))
def test_mass_is_conserved_without_potential(drift, eps, cells):
    g = CellGrid.on(UNIT, cells)
    q0, lo = initial_density(PSI, g, eps)
    fd = zakai_solve(blind(drift), UNIT, silent(), q0, eps, log_offset=lo)
    mass = np.array([fd.log_mass(k) for k in range(len(fd.times))])
    assert np.max(np.abs(mass - mass[0])) <= 1e-12
    assert np.all(fd.values >= 0)


@pytest.mark.parametrize("drift", DRIFTS)
def test_constant_dual_stays_constant_without_potential(drift):
    fld = dual_solve(blind(drift), UNIT, silent(), make_probe({"name": "zero"}), 0.1, 0.5, cells=101)
    phi = fld.values * np.exp(fld.logscale)[:, None]
    np.testing.assert_allclose(phi, 1.0, rtol=1e-13)


@settings(max_examples=10, deadline=None)
@given(eps=st.floats(0.03, 0.3), seed=st.integers(0, 1000), probe=st.sampled_from(["zero", "linear", "quadratic"]))
def test_duality_exact_without_drift(eps, seed, probe):
    # with b = 0 the dual scheme is the exact transpose of the forward scheme
    vf = VectorFieldSpec.from_config({}, UNIT)
    _, obs = twin_experiment(vf, UNIT, [0.4], 0.5, 1e-2, seed=seed, process_noise=1.0, obs_noise=0.1)
    g = CellGrid.on(UNIT, 101)
    q0, lo = initial_density(PSI, g, eps)
    fd = zakai_solve(vf, UNIT, obs, q0, eps, log_offset=lo)
    back = dual_solve(vf, UNIT, obs, make_probe({"name": probe}), eps, 0.5, cells=101)
    assert duality_gap(fd, back) <= 1e-10


def _drift_gap(cells, dt):
    vf = VectorFieldSpec.from_config({"drift": {"name": "linear", "A": [[-1.0]], "offset": [0.5]}}, UNIT)
    _, obs = twin_experiment(vf, UNIT, [0.8], 0.5, 1e-2, seed=7, process_noise=0.5, obs_noise=0.05)
    g = CellGrid.on(UNIT, cells)
    q0, lo = initial_density(PSI, g, 0.05)
    fd = zakai_solve(vf, UNIT, obs, q0, 0.05, dt=dt, log_offset=lo)
    back = dual_solve(vf, UNIT, obs, make_probe({"name": "zero"}), 0.05, 0.5, dt=dt, cells=cells)
    return duality_gap(fd, back)


def test_duality_gap_with_drift_is_first_order():
    # forward and dual advection are discretised independently: O(dx) mismatch
    coarse = _drift_gap(200, 1e-3)
    fine = _drift_gap(400, 5e-4)
    assert fine < coarse < 1e-2
    assert 1.8 < coarse / fine < 2.2


def test_log_transform_matches_kalman_quadratic():
    # linear Gaussian case: -eps log q = quadratic Kalman cost + an x-independent drift
    d = Domain.interval(-2.5, 2.5)
    model = LinearModel([[0.0]], [[1.0]], [[1.0]], [[1.0]], [0.3])
    vf = model.vector_field(d)
    _, obs = twin_experiment(vf, d, [0.0], 1.0, 1e-2, seed=3, process_noise=1.0, obs_noise=0.3)
    kp = kalman_estimate(model, obs)
    g = CellGrid.on(d, 401)
    q0, lo = initial_density(model.initial_cost(d), g, 0.05)
    fd = zakai_solve(vf, d, obs, q0, 0.05, dt=1e-3, log_offset=lo)
    inner = np.abs(g.centers) <= 1.5
    worst = 0.0
    for k in range(1, len(fd.times)):
        r = fd.log_transform(k)[inner] - kp.cost_at(k, g.centers[inner, None])
        worst = max(worst, 0.5 * (r.max() - r.min()))
    assert worst <= 3e-2


def test_laplace_functional_of_a_gaussian():
    g = CellGrid(-10.0, 10.0, 2000)
    sigma, eps = 0.7, 0.1
    q = np.exp(-0.5 * g.centers**2 / sigma**2)
    fd = FilterDensity(g, np.array([0.0]), q[None, :], np.array([0.0]), eps)
    zero = laplace_functional(fd, make_probe({"name": "zero"}), 0)
    assert zero == pytest.approx(-eps * math.log(math.sqrt(2 * math.pi) * sigma), abs=1e-12)
    # a linear tilt shifts the Gaussian: int exp(-s x / eps) q = sqrt(2 pi) sigma exp(s^2 sigma^2 / (2 eps^2))
    s = 0.05
    tilt = laplace_functional(fd, make_probe({"name": "linear", "slope": s}), 0)
    assert tilt == pytest.approx(zero - 0.5 * s**2 * sigma**2 / eps, abs=1e-12)


def test_wall_slopes_exact_for_quadratic_log_density():
    g = CellGrid(0.0, 1.0, 50)
    eps = 0.1
    V = 0.3 * g.centers + 0.8 * g.centers**2
    fd = FilterDensity(g, np.array([0.0]), np.exp(-V / eps)[None, :], np.array([0.0]), eps)
    vf = VectorFieldSpec.from_config({"drift": {"name": "constant", "value": [1.0]}}, UNIT)
    ws = wall_slopes(fd, vf, 0)
    assert ws["upper"]["dV_dn"] == pytest.approx(0.3 + 1.6, abs=1e-9)
    assert ws["lower"]["dV_dn"] == pytest.approx(-0.3, abs=1e-9)
    assert ws["upper"]["b_n"] == 1.0 and ws["lower"]["b_n"] == -1.0
    assert ws["upper"]["super"] == pytest.approx(abs(1.0 + 0.95), abs=1e-9)


def test_rescaling_survives_tiny_epsilon():
    vf = VectorFieldSpec.from_config({}, UNIT)
    obs = ObservationPath(0.0, 1e-2, np.full((100, 1), 5.0))
    g = CellGrid.on(UNIT, 101)
    q0, lo = initial_density(PSI, g, 1e-3)
    fd = zakai_solve(vf, UNIT, obs, q0, 1e-3, log_offset=lo)
    # the potential 1/2 (5 - x)^2 lies in [8, 12.5], so the log mass decays at a rate between 8 / eps and 12.5 / eps
    m = fd.log_mass(len(fd.times) - 1) - fd.log_mass(0)
    assert -12.5e3 < m < -8e3


def test_probe_catalog_and_errors():
    x = np.array([0.0, 1.0])
    np.testing.assert_allclose(make_probe({"name": "quadratic", "center": 1.0, "weight": 2.0})(x), [1.0, 0.0])
    np.testing.assert_allclose(make_probe({"name": "distance", "point": 0.25})(x), [0.25, 0.75])
    with pytest.raises(ZakaiError):
        make_probe({"name": "sawtooth"})
    with pytest.raises(ZakaiError):
        make_probe({"name": "zero"}, epsilons=[0.1, 0.2])


def test_solver_errors():
    vf = blind({"name": "constant", "value": [2.0]})
    g = CellGrid.on(UNIT, 101)
    q0, lo = initial_density(PSI, g, 0.1)
    with pytest.raises(ZakaiError):
        zakai_solve(vf, UNIT, silent(), q0, 0.0)
    with pytest.raises(StabilityError):
        zakai_solve(vf, UNIT, silent(), q0, 0.1, dt=1e-2)
    with pytest.raises(ZakaiError):
        zakai_solve(vf, UNIT, silent(), q0, 0.1, dt=3e-3)
    with pytest.raises(ZakaiError):
        zakai_solve(vf, UNIT, silent(), -q0, 0.1)
    with pytest.raises(ZakaiError):
        CellGrid.on(Domain.box([0, 0], [1, 1]), 10)
    with pytest.raises(ZakaiError):
        dual_solve(vf, UNIT, silent(), make_probe({}), 0.1, 0.505)
    assert step_size(vf, UNIT, silent(), 101) == pytest.approx(1e-2 / math.ceil(1e-2 * 2.0 / (0.9 / 101)))
    fd = zakai_solve(vf, UNIT, silent(), q0, 0.1)
    other = dual_solve(vf, UNIT, silent(), make_probe({}), 0.2, 0.5, cells=101)
    with pytest.raises(ZakaiError):
        duality_gap(fd, other)
