"""Time sets, density sequences, the epsilon recursion, and observability."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochheat import (Ball, CoefficientField, MeasurableTimeSet, TimeMesh,
                       build_grid, build_tree, compute_constants,
                       density_sequence, energy_estimate_check,
                       epsilon_sequence, solve_forward, telescoping_check)
from stochheat.errors import ConfigurationError
from stochheat.observability import (build_constants, growth_rate,
                                     interpolation_split, observation_mass)
from stochheat.ucp import default_tolerance

E_DEFAULT = ((0.1, 0.2), (0.3, 0.45))


@pytest.fixture(scope="module")
def time_set():
    return MeasurableTimeSet(E_DEFAULT, horizon=0.5)


@pytest.fixture(scope="module")
def setup():
    grid = build_grid([(0.0, 1.0)], (31,))
    mesh = TimeMesh(horizon=0.5, steps=10)
    tree = build_tree(mesh)
    coeffs = CoefficientField.constant(grid, mesh, 0.3, 0.4)
    x = grid.coords[:, 0]
    y0 = np.sin(np.pi * x) * (1.0 + np.exp(-(x - 0.5) ** 2 / (2 * 0.12 ** 2)))
    ens = solve_forward(y0, coeffs, tree, mesh, grid)
    return grid, mesh, coeffs, ens


def test_time_set_measure(time_set):
    assert np.isclose(time_set.measure, 0.25, rtol=1e-14)
    assert np.isclose(time_set.measure_between(0.15, 0.35), 0.1, rtol=1e-12)
    assert time_set.measure_between(0.21, 0.29) == 0.0
    assert time_set.longest_interval() == (0.3, 0.45)


@settings(max_examples=50, deadline=None)
@given(s=st.floats(0.0, 0.5), t=st.floats(0.0, 0.5))
def test_time_set_measure_between_properties(time_set, s, t):
    m = time_set.measure_between(s, t)
    assert 0.0 <= m <= abs(t - s) + 1e-15
    assert m <= time_set.measure + 1e-15
    # symmetry in the endpoints
    assert m == time_set.measure_between(t, s)


def test_time_set_validation():
    with pytest.raises(ConfigurationError):
        MeasurableTimeSet(((0.1, 0.3), (0.2, 0.4)), horizon=0.5)  # overlap
    with pytest.raises(ConfigurationError):
        MeasurableTimeSet(((0.1, 0.6),), horizon=0.5)  # outside horizon
    with pytest.raises(ConfigurationError):
        MeasurableTimeSet((), horizon=0.5)


def test_density_sequence_default(time_set):
    seq = density_sequence(time_set)
    assert seq.found
    assert seq.condition_holds()
    # t0 is the midpoint of the longest maximal interval
    assert np.isclose(seq.t0, 0.375, rtol=1e-12)
    # strictly decreasing times converging toward t0
    assert np.all(np.diff(seq.times) < 0.0)
    assert seq.times[-1] > seq.t0
    # geometric gaps with ratio z
    gaps = -np.diff(seq.times)
    assert np.allclose(gaps[:-1] / gaps[1:], seq.z, rtol=1e-10)
    # the three-times-measure condition, exactly as asserted downstream
    assert np.all(gaps <= 3.0 * seq.gap_measures + 1e-15)


def test_density_sequence_needs_ratio_above_one(time_set):
    with pytest.raises(ConfigurationError):
        density_sequence(time_set, z=1.0)


def test_growth_rate_variants(setup):
    _, _, coeffs, _ = setup
    d = growth_rate(coeffs, "derivation")
    p = growth_rate(coeffs, "printed")
    m = growth_rate(coeffs, "max")
    assert np.isclose(d, 2 * 0.3 + 0.4 ** 2, rtol=1e-14)
    assert np.isclose(p, 2 * 0.3 ** 2 + 0.4 ** 2, rtol=1e-14)
    assert m == max(d, p)
    with pytest.raises(ConfigurationError):
        growth_rate(coeffs, "bogus")


def _obs_constants(setup, time_set):
    grid, mesh, coeffs, ens = setup
    ones = np.ones(grid.n_nodes)
    w = grid.quad_weight
    ucp_c = compute_constants(grid, (0.5,), 0.08, mesh.horizon, coeffs,
                              w * ens.quad_diag(0, ones),
                              w * ens.quad_diag(mesh.steps, ones))
    return build_constants(ucp_c, coeffs, mesh.horizon)


def test_epsilon_recursion_identities(setup, time_set):
    seq = density_sequence(time_set)
    oc = epsilon_sequence(_obs_constants(setup, time_set), seq.gap_measures)
    g, c = oc.gamma, oc.c_abt
    # recursion identity, re-derived independently at each index
    for m in range(len(oc.eps) - 1):
        lhs = oc.eps[m + 1] ** g
        rhs = oc.eps[m] ** (g + 1.0) * np.exp(c) \
            * seq.gap_measures[m] / seq.gap_measures[m + 1]
        assert np.isclose(lhs, rhs, rtol=1e-12)
    # induction bound and the matching condition
    assert np.all(oc.eps <= oc.eps1 * (1.0 + 1e-12))
    assert np.allclose(oc.sigma[:-1], oc.alpha[1:] * np.exp(-c), rtol=1e-11)
    # final constant: log form always finite, exp form may saturate
    assert np.isfinite(oc.log_c_explicit)
    expected_log = np.log(2.0) - np.log(oc.alpha[0]) + 2.0 * c + oc.theta
    assert np.isclose(oc.log_c_explicit, expected_log, rtol=1e-12)


def test_epsilon_recursion_rejects_zero_gaps(setup, time_set):
    with pytest.raises(ConfigurationError):
        epsilon_sequence(_obs_constants(setup, time_set), np.array([0.1, 0.0]))


def test_interpolation_split(setup, time_set):
    grid, mesh, coeffs, ens = setup
    oc = _obs_constants(setup, time_set)
    ones = np.ones(grid.n_nodes)
    w = grid.quad_weight
    energy = np.array([w * ens.quad_diag(k, ones)
                       for k in range(mesh.steps + 1)])
    mask = grid.ball_mask(Ball((0.5,), 0.08)).astype(float)
    local = np.array([w * ens.quad_diag(k, mask)
                      for k in range(mesh.steps + 1)])
    rep = interpolation_split(energy, local, oc, eps=0.5, k=mesh.steps,
                              tol=default_tolerance(mesh, grid))
    assert rep["pass"]
    with pytest.raises(ConfigurationError):
        interpolation_split(energy, local, oc, eps=1.5, k=0)


def test_observation_mass_manual_oracle(setup, time_set):
    grid, mesh, _, ens = setup
    ball = Ball((0.5,), 0.08)
    total = observation_mass(ens, ball, time_set)
    # manual trapezoid over the same cells
    d = grid.ball_mask(ball).astype(float)
    w = grid.quad_weight
    local = np.array([w * ens.quad_diag(k, d) for k in range(mesh.steps + 1)])
    manual = 0.0
    for k in range(mesh.steps):
        ov = time_set.measure_between(mesh.times[k], mesh.times[k + 1])
        manual += ov * 0.5 * (local[k] + local[k + 1])
    assert np.isclose(total, manual, rtol=1e-14)
    # restricting the window can only reduce the mass
    part = observation_mass(ens, ball, time_set, s=0.3, t=0.45)
    assert 0.0 < part <= total + 1e-15


def test_telescoping_chain(setup, time_set):
    grid, mesh, _, ens = setup
    seq = density_sequence(time_set)
    oc = epsilon_sequence(_obs_constants(setup, time_set), seq.gap_measures)
    rep = telescoping_check(ens, Ball((0.5,), 0.08), time_set, seq, oc,
                            tol=default_tolerance(mesh, grid))
    assert all(g["pass"] for g in rep["per_gap"])
    assert rep["summed"]["pass"]
    assert rep["final"]["pass"]
    assert np.isfinite(rep["final"]["c_emp"])
    assert rep["final"]["c_emp"] <= rep["final"]["c_explicit"]
    assert rep["sigma_small"]


def test_telescoping_requires_epsilon_sequence(setup, time_set):
    _, _, _, ens = setup
    seq = density_sequence(time_set)
    oc = _obs_constants(setup, time_set)  # recursion not run
    with pytest.raises(ConfigurationError):
        telescoping_check(ens, Ball((0.5,), 0.08), time_set, seq, oc)


def test_energy_estimate(setup):
    _, _, coeffs, ens = setup
    for variant in ("derivation", "printed", "max"):
        rep = energy_estimate_check(ens, coeffs, variant=variant)
        assert rep["pass"], variant
