"""Parabolic frequency function for the stochastic heat equation.

With a backward heat-kernel weight K and a spatial cutoff phi, the localized
field Phi = phi*y carries the quantities

    H(t) = E int Phi^2 K,   D(t) = E int |grad Phi|^2 K,   N(t) = 2 D / H,

plus the commutator source F = a*Phi - y*Lap(phi) - 2 grad(phi).grad(y).
Everything is evaluated through quadratic functionals E[y^T Q y], so the same
code runs on a sampled ensemble, an exact Bernoulli tree, or the closed-form
second-moment recursion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, NumericalError
from .forward import CoefficientField
from .geometry import CutoffFunction, HeatKernelWeight, SpatialGrid

__all__ = [
    "LocalizedOperators",
    "FrequencyTrace",
    "localize",
    "compute_hdn",
    "hprime_identity_residual",
    "frequency_bound_check",
    "boundary_sign_audit",
]

H_FLOOR = 1e-300


@dataclass
class LocalizedOperators:
    """Sparse operators for the cutoff phi (phi = 1 when cutoff is None).

    mult_phi sends y to Phi = phi*y; grad_ops differentiate Phi; source(k)
    sends y to F at step k.
    """

    grid: SpatialGrid
    phi: np.ndarray
    mult_phi: sp.spmatrix | None
    grad_phi_ops: list
    source_static: sp.spmatrix | None  # -Lap(phi) - 2 grad(phi).grad
    support_mask: np.ndarray

    def source(self, a_k: np.ndarray) -> sp.spmatrix:
        op = sp.diags(a_k * self.phi)
        if self.source_static is not None:
            op = op + self.source_static
        return sp.csr_matrix(op)


def localize(grid: SpatialGrid, cutoff: CutoffFunction | None) -> LocalizedOperators:
    grads = grid.gradient_ops()
    if cutoff is None:
        return LocalizedOperators(grid=grid, phi=np.ones(grid.n_nodes),
                                  mult_phi=None, grad_phi_ops=list(grads),
                                  source_static=None,
                                  support_mask=np.ones(grid.n_nodes, dtype=bool))
    phi = cutoff.values
    mult = sp.diags(phi)
    static = sp.csr_matrix(-sp.diags(cutoff.lap))
    for ax, g in enumerate(grads):
        static = static - 2.0 * sp.diags(cutoff.grad[:, ax]) @ g
    loc_grads = [g @ mult for g in grads]
    return LocalizedOperators(grid=grid, phi=phi, mult_phi=mult,
                              grad_phi_ops=loc_grads,
                              source_static=sp.csr_matrix(static),
                              support_mask=phi > 0.0)


@dataclass
class FrequencyTrace:
    times: np.ndarray
    h: np.ndarray
    d: np.ndarray
    n: np.ndarray
    aux: dict = field(default_factory=dict, repr=False)


def _weight_nodes(weight: HeatKernelWeight, grid: SpatialGrid, t: float) -> np.ndarray:
    return weight.values(t, grid.coords)


def compute_hdn(ens, weight: HeatKernelWeight,
                cutoff: CutoffFunction | None = None,
                coeffs: CoefficientField | None = None) -> FrequencyTrace:
    """H, D, N traces plus the derivative-identity integrands.

    aux carries, per time node: `phi_f` = E int Phi F K, `b_sq` =
    E int b^2 Phi^2 K, `f_sq` = E int F^2 K (the latter two need `coeffs`).
    """
    grid, mesh = ens.grid, ens.mesh
    loc = localize(grid, cutoff)
    w = grid.quad_weight
    n_t = mesh.steps + 1
    h_arr = np.empty(n_t)
    d_arr = np.empty(n_t)
    phi_f = np.full(n_t, np.nan)
    b_sq = np.full(n_t, np.nan)
    f_sq = np.full(n_t, np.nan)
    phi_sq = loc.phi ** 2
    for k in range(n_t):
        kv = _weight_nodes(weight, grid, mesh.times[k])
        kw = kv * w
        h_arr[k] = ens.quad_diag(k, phi_sq * kw)
        dk = sp.diags(kw)
        q_d = None
        for g in loc.grad_phi_ops:
            term = (g.T @ dk @ g).tocsr()
            q_d = term if q_d is None else q_d + term
        d_arr[k] = ens.quad(k, q_d)
        if coeffs is not None:
            kc = min(k, mesh.steps - 1)  # coefficients live on steps
            a_k = coeffs.a_at(kc)
            b_k = coeffs.b_at(kc)
            src = loc.source(a_k)
            left = sp.diags(loc.phi * kw)
            phi_f[k] = ens.quad(k, (left @ src).tocsr())
            b_sq[k] = ens.quad_diag(k, (b_k ** 2) * phi_sq * kw)
            f_sq[k] = ens.quad(k, (src.T @ dk @ src).tocsr())
    if np.any(h_arr < 0):
        raise NumericalError("negative weighted energy; quadrature is broken")
    n_arr = 2.0 * d_arr / np.maximum(h_arr, H_FLOOR)
    return FrequencyTrace(times=mesh.times.copy(), h=h_arr, d=d_arr, n=n_arr,
                          aux={"phi_f": phi_f, "b_sq": b_sq, "f_sq": f_sq,
                               "support_mask": loc.support_mask})


def hprime_identity_residual(ens, weight: HeatKernelWeight,
                             coeffs: CoefficientField,
                             cutoff: CutoffFunction | None = None,
                             rhs_eval: str = "midpoint") -> dict:
    """Residual of the energy-derivative identity

        H'(t) = -2 D(t) + 2 E int Phi F K + E int b^2 Phi^2 K

    measured per step as (H_{k+1}-H_k)/dt against the right-hand side,
    normalized by max H.  `rhs_eval` picks the evaluation point: "midpoint"
    (second-order in time, so the spatial floor dominates) or "left"
    (first-order, exposing the O(dt) term for refinement studies).
    """
    if rhs_eval not in ("midpoint", "left"):
        raise NumericalError(f"unknown rhs_eval '{rhs_eval}'")
    tr = compute_hdn(ens, weight, cutoff=cutoff, coeffs=coeffs)
    dt = ens.mesh.dt
    rhs = -2.0 * tr.d + 2.0 * tr.aux["phi_f"] + tr.aux["b_sq"]
    lhs = np.diff(tr.h) / dt
    rhs_mid = 0.5 * (rhs[:-1] + rhs[1:]) if rhs_eval == "midpoint" else rhs[:-1]
    scale = max(float(np.max(tr.h)), H_FLOOR)
    res = (lhs - rhs_mid) / scale
    integrated = float(np.sum(np.abs(res)) * dt)
    # magnitude of the cancelling derivative terms, for tolerance budgets
    rhs_scale = float(np.max(np.abs(rhs))) / scale
    return {"residuals": res, "max_residual": float(np.max(np.abs(res))),
            "integrated_residual": integrated, "rhs_scale": rhs_scale,
            "trace": tr}


def frequency_bound_check(ens, weight: HeatKernelWeight,
                          coeffs: CoefficientField,
                          cutoff: CutoffFunction | None = None,
                          convex: bool = False,
                          slack: float = 1e-9) -> dict:
    """Check the frequency drift inequality over all discrete time pairs.

    General form (localized field): for s < t,

        N(t) - N(s) <= int_s^t [1/(T-tau+lambda) + 2|b|^2] N dtau
                       + 2|b|^2 (t-s) + int_s^t (E int F^2 K)/H dtau,

    with |b| the W^{1,inf} norm over the cutoff support.  The convex variant
    (no cutoff, convex domain) replaces the source integral by the constant
    (|a|^2 + 2|b|^2)(t-s) and uses the weaker Gronwall rate
    1/(T-tau+lambda) + |b|^2.
    """
    tr = compute_hdn(ens, weight, cutoff=cutoff, coeffs=coeffs)
    times = tr.times
    mask = tr.aux["support_mask"]
    b_norm = coeffs.sup_b_over(mask)
    if convex:
        rate = 1.0 / (weight.horizon - times + weight.shift) + b_norm ** 2
        integrand = rate * tr.n
        const_rate = coeffs.sup_a ** 2 + 2.0 * b_norm ** 2
    else:
        rate = 1.0 / (weight.horizon - times + weight.shift) + 2.0 * b_norm ** 2
        f_over_h = tr.aux["f_sq"] / np.maximum(tr.h, H_FLOOR)
        integrand = rate * tr.n + f_over_h
        const_rate = 2.0 * b_norm ** 2
    dt = ens.mesh.dt
    # cumulative trapezoid of the integrand
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[:-1] + integrand[1:]) * dt)])
    n_nodes = len(times)
    worst = -np.inf
    worst_pair = (0, 0)
    scale = max(float(np.max(np.abs(tr.n))), 1.0)
    for i in range(n_nodes):
        gain = tr.n[i + 1:] - tr.n[i]
        bound = (cum[i + 1:] - cum[i]) + const_rate * (times[i + 1:] - times[i])
        if gain.size:
            viol = np.max(gain - bound)
            if viol > worst:
                worst = float(viol)
                j = int(np.argmax(gain - bound))
                worst_pair = (i, i + 1 + j)
    ok = worst <= slack * scale
    return {"holds": bool(ok), "worst_violation": worst,
            "worst_pair": worst_pair, "relative_violation": worst / scale,
            "b_norm": b_norm, "trace": tr}


def boundary_sign_audit(weight: HeatKernelWeight, grid: SpatialGrid,
                        times) -> dict:
    """Verify grad(K) . nu <= 0 on the boundary of the box.

    grad K = -(x - x0) K / (2 (T-t+lambda)), so the sign reduces to
    (x - x0) . nu >= 0, which holds whenever the weight center lies in the
    closed box.  Both the geometric factor and the full flux are reported.
    """
    coords, normals = grid.boundary_coords, grid.boundary_normals
    x0 = np.asarray(weight.center, dtype=float)
    geom = np.einsum("bi,bi->b", coords - x0, normals)
    min_geom = float(np.min(geom))
    worst_flux = -np.inf
    for t in np.atleast_1d(times):
        flux = np.einsum("bi,bi->b", weight.gradient(float(t), coords), normals)
        worst_flux = max(worst_flux, float(np.max(flux)))
    return {"nonpositive": bool(worst_flux <= 1e-14 and min_geom >= -1e-14),
            "min_geometric_factor": min_geom, "max_flux": worst_flux}
