import math

import numpy as np
import pytest
from scipy.stats import kstest
from hypothesis import given, settings
from hypothesis import strategies as st

from mortensen.dynamics import (
    DisturbancePath,
    IntegrationError,
    Trajectory,
    holder_quotient,
    integrate_penalized,
    integrate_reflected,
    integrate_reflected_sde,
    make_rng,
    n_steps,
    penalty_flow,
    penalty_flow_inverse,
    reflected_sde_paths,
    smooth_disturbance,
    twin_experiment,
)
from mortensen.fields import VectorFieldSpec
from mortensen.geometry import Domain

UNIT = Domain.interval(0.0, 1.0)
FREE = VectorFieldSpec.from_config({"drift": {"name": "zero"}}, UNIT)


def test_reflected_path_sticks_to_the_wall():
    # x' = 1 from 0.5 reaches the wall at t = 0.5 and stays there
    w = DisturbancePath.constant(0.0, 1.0, 1e-2, 1.0)
    tr = integrate_reflected(FREE, UNIT, [0.5], w)
    expect = np.minimum(0.5 + tr.times, 1.0)
    np.testing.assert_allclose(tr.states[:, 0], expect, atol=1e-12)


def test_penalized_equilibrium_distance_is_push_over_kappa():
    # pushing outward with unit speed, the penalty balances at distance 1/kappa
    for kappa in (10.0, 100.0, 1000.0):
        w = DisturbancePath.constant(0.0, 2.0, 1e-3, 1.0)
        tr = integrate_penalized(FREE, UNIT, [1.0], w, kappa)
        assert tr.states[-1, 0] - 1.0 == pytest.approx(1.0 / kappa, rel=1e-6)


def test_penalized_approaches_reflected():
    w = smooth_disturbance(make_rng(2, 9), 0.0, 1.0, 1e-3, 1, amplitude=4.0)
    ref = integrate_reflected(FREE, UNIT, [0.5], w).states
    assert np.any(UNIT.boundary_distance(ref) == 0.0)
    errs = [np.max(np.abs(integrate_penalized(FREE, UNIT, [0.5], w, k).states - ref)) for k in (10.0, 100.0, 1000.0)]
    assert errs[0] > errs[1] > errs[2]


@settings(max_examples=80, deadline=None)
@given(
    x=st.floats(-0.5, 1.5),
    v=st.floats(-3, 3),
    kappa=st.floats(1.0, 1e4),
    dt=st.sampled_from([1e-3, 1e-2]),
)
def test_penalty_flow_inverse(x, v, kappa, dt):
    # the forward map contracts the outside distance, so check forward(inverse(y)) = y
    y = np.array([x])
    back = penalty_flow_inverse(UNIT, y, np.array([v]), dt, kappa)
    assert penalty_flow(UNIT, back, np.array([v]), dt, kappa)[0] == pytest.approx(x, abs=1e-12)
    if kappa * dt <= 1.0:
        fwd = penalty_flow(UNIT, y, np.array([v]), dt, kappa)
        assert penalty_flow_inverse(UNIT, fwd, np.array([v]), dt, kappa)[0] == pytest.approx(x, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), x0=st.floats(0.0, 1.0))
def test_reflected_paths_stay_in_domain(seed, x0):
    rng = make_rng(seed)
    w = DisturbancePath(0.0, 1e-2, 5.0 * rng.standard_normal((100, 1)))
    tr = integrate_reflected(FREE, UNIT, [x0], w)
    assert np.all(UNIT.distance(tr.states) == 0.0)


def test_holder_quotient_of_square_root_is_one():
    # |sqrt r - sqrt s| <= |r - s|^(1/2), with equality for s = 0
    t = np.linspace(0.0, 1.0, 401)
    assert holder_quotient(t, np.sqrt(t)) == pytest.approx(1.0, rel=1e-12)
    # a linear path of slope 2 on [0, 1] has quotient 2 at the full span
    assert holder_quotient(t, 2 * t, chunk=37) == pytest.approx(2.0, rel=1e-12)


def test_sde_paths_reproducible_and_in_domain():
    a = reflected_sde_paths(FREE, UNIT, [[0.5], [0.1]], 0.1, 4, 1e-3, 200)
    b = reflected_sde_paths(FREE, UNIT, [[0.5], [0.1]], 0.1, 4, 1e-3, 200)
    assert np.array_equal(a, b)
    assert np.all(UNIT.distance(a) == 0.0)


def test_rng_streams():
    assert np.array_equal(make_rng(5, 1).random(4), make_rng(5, 1).random(4))
    assert not np.array_equal(make_rng(5, 1).random(4), make_rng(5, 2).random(4))


def test_n_steps():
    assert n_steps(0.0, 1.0, 1e-3) == 1000
    with pytest.raises(IntegrationError):
        n_steps(0.0, 1.0, 0.3)
    with pytest.raises(IntegrationError):
        n_steps(0.0, 1.0, 0.0)


def test_start_outside_is_rejected():
    with pytest.raises(IntegrationError):
        integrate_reflected(FREE, UNIT, [1.5], DisturbancePath.zeros(0.0, 1.0, 0.1, 1))


def test_twin_is_deterministic_and_csv_round_trips(tmp_path):
    vf = VectorFieldSpec.from_config({"drift": {"name": "linear", "A": [[-1.0]], "offset": [0.5]}}, UNIT)
    tr, obs = twin_experiment(vf, UNIT, [0.8], 1.0, 1e-2, seed=7, process_noise=0.5, obs_noise=0.05)
    tr2, obs2 = twin_experiment(vf, UNIT, [0.8], 1.0, 1e-2, seed=7, process_noise=0.5, obs_noise=0.05)
    assert np.array_equal(tr.states, tr2.states) and np.array_equal(obs.ydot, obs2.ydot)
    tr.to_csv(tmp_path / "truth.csv")
    back = Trajectory.from_csv(tmp_path / "truth.csv")
    assert np.array_equal(back.states, tr.states)
    assert np.array_equal(back.disturbance.samples, tr.disturbance.samples)
    assert math.isclose(back.dt, tr.dt)


def test_disturbance_refinement_keeps_l2_norm():
    w = DisturbancePath(0.0, 0.1, np.arange(10.0))
    assert w.refine(4).l2_norm() == pytest.approx(w.l2_norm())


def test_outward_drift_absorbed_at_the_wall():
    vf = VectorFieldSpec.from_config({"drift": {"name": "constant", "value": [1.0]}}, UNIT)
    tr = integrate_reflected(vf, UNIT, [1.0], DisturbancePath.zeros(0.0, 1.0, 1e-2, 1))
    np.testing.assert_array_equal(tr.states, 1.0)


def test_free_motion_then_sticking():
    vf = VectorFieldSpec.from_config({"drift": {"name": "constant", "value": [-2.0]}}, UNIT)
    tr = integrate_reflected(vf, UNIT, [0.5], DisturbancePath.zeros(0.0, 1.0, 1e-4, 1))
    np.testing.assert_allclose(tr.states[:, 0], np.maximum(0.0, 0.5 - 2.0 * tr.times), atol=1e-3)


@pytest.mark.parametrize("kappa", [10.0, 100.0])
def test_penalized_steady_radius_on_ball(kappa):
    # radial reduction r' = 1 - kappa (r - 1) settles at r = 1 + 1/kappa
    ball = Domain.ball([0.0, 0.0], 1.0)
    vf = VectorFieldSpec.from_config({"drift": {"name": "outward_radial"}}, ball)
    tr = integrate_penalized(vf, ball, [0.6, 0.8], DisturbancePath.zeros(0.0, 2.0, 1e-3, 2), kappa)
    assert np.linalg.norm(tr.states[-1]) == pytest.approx(1.0 + 1.0 / kappa, abs=1e-3)


def test_zero_noise_sde_is_the_reflected_ode():
    vf = VectorFieldSpec.from_config({"drift": {"name": "linear", "A": [[-1.0]], "offset": [1.5]}}, UNIT)
    sde = integrate_reflected_sde(vf, UNIT, [0.2], 0.0, 3, 1e-2, 1.0)
    ode = integrate_reflected(vf, UNIT, [0.2], DisturbancePath.zeros(0.0, 1.0, 1e-2, 1))
    np.testing.assert_array_equal(sde.states, ode.states)


def test_reflected_brownian_mean_and_stationary_law():
    x0 = np.full((10_000, 1), 0.5)
    paths = reflected_sde_paths(FREE, UNIT, x0, 0.01, 11, 1e-2, 100)
    end = paths[-1, :, 0]
    assert abs(end.mean() - 0.5) <= 3 * end.std() / math.sqrt(end.size)
    # reflected Brownian motion on an interval relaxes to the uniform law
    paths = reflected_sde_paths(FREE, UNIT, x0, 0.04, 12, 1e-2, 400)
    assert kstest(paths[-1, :, 0], "uniform").statistic < 0.05
