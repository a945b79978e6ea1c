"""Weighted energies H, D, the frequency ratio N, and their inequalities."""

import numpy as np
import pytest

from stochheat import (Ball, CoefficientField, HeatKernelWeight, TimeMesh,
                       boundary_sign_audit, build_cutoff, build_grid,
                       compute_hdn, frequency_bound_check,
                       hprime_identity_residual, solve_forward,
                       solve_forward_moments)
from stochheat.errors import NumericalError
from stochheat.ucp import default_tolerance


@pytest.fixture(scope="module")
def weight():
    return HeatKernelWeight(horizon=0.5, shift=0.25, center=(0.5,), dim=1)


def test_hdn_positive_and_shapes(tree_ensemble, weight, coeffs):
    tr = compute_hdn(tree_ensemble, weight, coeffs=coeffs)
    steps = tree_ensemble.mesh.steps
    assert tr.h.shape == (steps + 1,)
    assert np.all(tr.h > 0.0)
    assert np.all(tr.d >= 0.0)
    assert np.allclose(tr.n, 2.0 * tr.d / tr.h)


def test_hdn_brute_force_oracle(tree_ensemble, weight, grid, coeffs):
    # recompute H and D at one time node by direct per-path quadrature
    k = 4
    t = tree_ensemble.mesh.times[k]
    kv = weight.values(t, grid.coords)
    y = tree_ensemble.values[:, k, :]
    w = tree_ensemble.weights
    h_direct = float(w @ ((y ** 2 * kv) @ np.ones(grid.n_nodes))) \
        * grid.quad_weight
    gy = np.stack([grid.gradient(y[p]) for p in range(y.shape[0])])
    d_direct = float(w @ ((gy[:, :, 0] ** 2 * kv).sum(axis=1))) \
        * grid.quad_weight
    tr = compute_hdn(tree_ensemble, weight, coeffs=coeffs)
    assert np.isclose(tr.h[k], h_direct, rtol=1e-12)
    assert np.isclose(tr.d[k], d_direct, rtol=1e-12)


def test_hdn_scale_invariance_of_n(y0, coeffs, tree, mesh, grid, weight):
    base = solve_forward(y0, coeffs, tree, mesh, grid)
    scaled = solve_forward(3.0 * y0, coeffs, tree, mesh, grid)
    n1 = compute_hdn(base, weight, coeffs=coeffs).n
    n2 = compute_hdn(scaled, weight, coeffs=coeffs).n
    assert np.allclose(n1, n2, rtol=1e-12)


def test_hdn_agrees_between_tree_and_moments(y0, coeffs, tree, mesh, grid,
                                             weight):
    ens = solve_forward(y0, coeffs, tree, mesh, grid)
    mom = solve_forward_moments(y0, coeffs, mesh, grid)
    t1 = compute_hdn(ens, weight, coeffs=coeffs)
    t2 = compute_hdn(mom, weight, coeffs=coeffs)
    assert np.allclose(t1.h, t2.h, rtol=1e-10)
    assert np.allclose(t1.d, t2.d, rtol=1e-10)


def _integrated_residual(steps, mode):
    fine_grid = build_grid([(0.0, 1.0)], (63,))
    x = fine_grid.coords[:, 0]
    y0 = np.sin(np.pi * x)
    mesh = TimeMesh(horizon=0.1, steps=steps)
    coeffs = CoefficientField.constant(fine_grid, mesh, 0.3, 0.4)
    mom = solve_forward_moments(y0, coeffs, mesh, fine_grid)
    w = HeatKernelWeight(horizon=0.1, shift=0.25, center=(0.5,), dim=1)
    return hprime_identity_residual(mom, w, coeffs,
                                    rhs_eval=mode)["integrated_residual"]


def test_hprime_identity_residual_refines():
    # the energy-derivative identity residual shrinks under dt refinement
    # (moment recursion keeps expectations exact at every depth)
    coarse = _integrated_residual(10, "midpoint")
    fine = _integrated_residual(40, "midpoint")
    assert fine < coarse
    assert fine < 0.05


def test_hprime_left_mode_is_first_order():
    # left-endpoint evaluation exposes the O(dt) term: successive Richardson
    # differences halve (the spatial floor cancels in the differences)
    res = {s: _integrated_residual(s, "left") for s in (10, 20, 40)}
    ratio = (res[10] - res[20]) / (res[20] - res[40])
    assert 1.4 < ratio < 2.6


def test_hprime_rejects_unknown_mode(tree_ensemble, weight, coeffs):
    with pytest.raises(NumericalError):
        hprime_identity_residual(tree_ensemble, weight, coeffs,
                                 rhs_eval="right")


def test_frequency_bound_holds(tree_ensemble, weight, coeffs, grid, mesh):
    tol = default_tolerance(mesh, grid)
    cutoff = build_cutoff(Ball((0.5,), 0.18), Ball((0.5,), 0.24), grid)
    rep = frequency_bound_check(tree_ensemble, weight, coeffs, cutoff=cutoff,
                                slack=tol)
    assert rep["holds"]
    rep_convex = frequency_bound_check(tree_ensemble, weight, coeffs,
                                       convex=True, slack=tol)
    assert rep_convex["holds"]


def test_frequency_bound_localized_b_norm(tree_ensemble, weight, grid, mesh):
    # the bound must use the W^{1,inf} norm of b over the cutoff support,
    # not the global one
    b = np.where(np.abs(grid.coords[:, 0] - 0.5) < 0.3, 0.1, 5.0)
    coeffs = CoefficientField(grid, mesh, a=0.0, b=b)
    cutoff = build_cutoff(Ball((0.5,), 0.1), Ball((0.5,), 0.15), grid)
    rep = frequency_bound_check(tree_ensemble, weight, coeffs, cutoff=cutoff)
    assert rep["b_norm"] < 5.0


def test_boundary_sign_audit(weight, grid, mesh):
    rep = boundary_sign_audit(weight, grid, mesh.times[1:-1])
    assert rep["nonpositive"]
    assert rep["max_flux"] <= 1e-14
    # a center outside the box breaks the geometric factor
    bad = HeatKernelWeight(horizon=0.5, shift=0.25, center=(1.5,), dim=1)
    rep_bad = boundary_sign_audit(bad, grid, [0.2])
    assert not rep_bad["nonpositive"]
