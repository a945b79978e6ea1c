"""Experiment runner: seeded, configured, byte-stable reporting.

Subcommands: simulate, frequency, ucp, observe, control, verify.  Exit codes:
0 all asserted checks pass; 1 a check failed; 2 configuration error; 3
output not writable.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import config as cfgmod
from . import control as ctl
from . import observability as obs
from . import ucp as ucpmod
from .errors import ConfigurationError, DomainError, GeometryError, ResourceError
from .forward import (CoefficientField, exp_transform_oracle, solve_forward,
                      solve_forward_moments, solve_semilinear,
                      step_invertibility_report)
from .frequency import (boundary_sign_audit, frequency_bound_check,
                        hprime_identity_residual)
from .geometry import (Ball, HeatKernelWeight, build_cutoff, build_grid,
                       kernel_caloric_residual)
from .noise import TimeMesh, build_tree, sample_ensemble
from .report import (all_pass, check_record, write_report,
                     write_timing_sidecar)

MACHINE_TOL = 1e-10


def _extent_pairs(flat):
    flat = tuple(flat)
    if len(flat) % 2 != 0:
        raise ConfigurationError("domain.extents needs an even number of values")
    return tuple((flat[i], flat[i + 1]) for i in range(0, len(flat), 2))


def _as_tuple(value):
    return tuple(value) if isinstance(value, tuple) else (value,)


def _coefficients(cfg: dict, grid, mesh, seed: int) -> CoefficientField:
    if cfg["coeff.kind"] == "random":
        return CoefficientField.random_bounded(grid, mesh, seed,
                                               float(cfg["coeff.a_bound"]),
                                               float(cfg["coeff.b_bound"]))
    return CoefficientField.constant(grid, mesh, float(cfg["coeff.a"]),
                                     float(cfg["coeff.b"]))


class Experiment:
    """Shared state derived from a configuration."""

    def __init__(self, cfg: dict):
        cfgmod.validate_config(cfg)
        self.cfg = cfg
        extents = _extent_pairs(cfg["domain.extents"])
        nodes = _as_tuple(cfg["grid.nodes"])
        nodes = tuple(int(n) for n in nodes)
        if len(nodes) == 1 and len(extents) == 2:
            nodes = nodes * 2
        self.grid = build_grid(extents, nodes)
        steps = int(cfg["time.steps"]) or int(cfg["tree.depth"])
        self.mesh = TimeMesh(horizon=float(cfg["time.horizon"]), steps=steps)
        self.seed = int(cfg["seed"])
        if cfg["noise.mode"] == "tree":
            self.noise = build_tree(self.mesh)
        else:
            self.noise = sample_ensemble(self.mesh, int(cfg["mc.paths"]), self.seed)
        self.coeffs = _coefficients(cfg, self.grid, self.mesh, self.seed)
        self.x0 = tuple(cfg["geometry.x0"])
        self.y0 = initial_field(self.grid, cfg["initial.kind"], self.x0)
        self._ensemble = None

    @property
    def ensemble(self):
        if self._ensemble is None:
            self._ensemble = solve_forward(self.y0, self.coeffs, self.noise,
                                           self.mesh, self.grid)
        return self._ensemble


def initial_field(grid, kind: str, x0) -> np.ndarray:
    """Deterministic initial data vanishing at the boundary."""
    mode = np.ones(grid.n_nodes)
    for axis in range(grid.dim):
        lo, hi = grid.extents[axis]
        mode *= np.sin(np.pi * (grid.coords[:, axis] - lo) / (hi - lo))
    if kind == "sine":
        return mode
    if kind == "bump":
        d2 = grid.distance_sq_to(x0)
        return mode * (1.0 + np.exp(-d2 / (2 * 0.12 ** 2)))
    raise ConfigurationError(f"unknown initial.kind '{kind}'")


def _kernel_weight(exp: Experiment) -> HeatKernelWeight:
    return HeatKernelWeight(horizon=exp.mesh.horizon,
                            shift=float(exp.cfg["ucp.kernel_shift"]),
                            center=exp.x0, dim=exp.grid.dim)


def _cutoff(exp: Experiment):
    return build_cutoff(Ball(exp.x0, float(exp.cfg["geometry.r3"])),
                        Ball(exp.x0, float(exp.cfg["geometry.r4"])), exp.grid)


def run_simulate(exp: Experiment):
    checks, extras = [], {}
    ens = exp.ensemble
    inv = step_invertibility_report(exp.coeffs, ens)
    checks.append(check_record("step_invertibility", inv["invertible"],
                               min_factor=inv["min_factor"]))
    energy = exp.grid.quad_weight * ens.quad_diag(exp.mesh.steps,
                                                  np.ones(exp.grid.n_nodes))
    checks.append(check_record("terminal_energy_finite", np.isfinite(energy),
                               lhs=energy))
    if exp.cfg["coeff.kind"] == "constant":
        oracle_noise = sample_ensemble(exp.mesh, 32, exp.seed + 1)
        oracle_ens = solve_forward(exp.y0, exp.coeffs, oracle_noise,
                                   exp.mesh, exp.grid)
        gap = exp_transform_oracle(oracle_ens, float(exp.cfg["coeff.b"]),
                                   float(exp.cfg["coeff.a"]), exp.mesh, exp.grid)
        checks.append(check_record("transform_oracle_gap_bounded",
                                   gap["max_gap"] < 1.0, lhs=gap["max_gap"]))
        extras["transform_oracle"] = {"max_gap": gap["max_gap"],
                                      "mean_gap": gap["mean_gap"]}
    semi_noise = sample_ensemble(exp.mesh, 16, exp.seed + 2)
    _, semi_report = solve_semilinear(0.1 * exp.y0, 2, semi_noise, exp.mesh,
                                      exp.grid)
    extras["semilinear"] = semi_report
    checks.append(check_record("semilinear_paths_survive",
                               semi_report["n_excluded"] < semi_report["n_paths"]))
    return checks, extras, {}


def run_frequency(exp: Experiment):
    checks, extras = [], {}
    weight = _kernel_weight(exp)
    probe_t = 0.5 * exp.mesh.horizon
    kernel = kernel_caloric_residual(weight, exp.grid, probe_t, dt_fd=1e-6)
    checks.append(check_record("kernel_caloric_identity",
                               kernel["closed_form"] <= 1e-12,
                               lhs=kernel["closed_form"], rhs=1e-12))
    cutoff = _cutoff(exp)
    tol_scale = float(exp.cfg["tol_scale"])
    # the derivative identity needs time resolution well below the kernel
    # shift; the exact second-moment recursion provides it at any depth
    fine_mesh = TimeMesh(horizon=exp.mesh.horizon,
                         steps=max(400, exp.mesh.steps))
    fine_coeffs = _coefficients(exp.cfg, exp.grid, fine_mesh, exp.seed)
    fine_ens = solve_forward_moments(exp.y0, fine_coeffs, fine_mesh, exp.grid)
    ident_global = hprime_identity_residual(fine_ens, weight, fine_coeffs)
    budget = ucpmod.default_tolerance(
        fine_mesh, exp.grid, tol_scale * max(1.0, ident_global["rhs_scale"]))
    checks.append(check_record("energy_derivative_identity",
                               ident_global["integrated_residual"] <= budget,
                               lhs=ident_global["integrated_residual"], rhs=budget,
                               max_residual=ident_global["max_residual"]))
    # the localized variant needs >= ~15 cells across the cutoff annulus;
    # at desk resolution it is reported, not asserted
    ident_local = hprime_identity_residual(fine_ens, weight, fine_coeffs,
                                           cutoff=cutoff)
    extras["localized_identity_residual"] = {
        "integrated": ident_local["integrated_residual"],
        "rhs_scale": ident_local["rhs_scale"],
        "note": "diagnostic: cutoff annulus spans few cells at this h"}
    budget = ucpmod.default_tolerance(exp.mesh, exp.grid, tol_scale)
    bound = frequency_bound_check(exp.ensemble, weight, exp.coeffs,
                                  cutoff=cutoff, slack=budget)
    checks.append(check_record("frequency_drift_bound", bound["holds"],
                               lhs=bound["relative_violation"], rhs=budget))
    convex = frequency_bound_check(exp.ensemble, weight, exp.coeffs,
                                   convex=True, slack=budget)
    checks.append(check_record("frequency_drift_bound_convex", convex["holds"],
                               lhs=convex["relative_violation"], rhs=budget))
    audit = boundary_sign_audit(weight, exp.grid,
                                np.linspace(0.0, exp.mesh.horizon, 9))
    checks.append(check_record("boundary_flux_sign", audit["nonpositive"],
                               lhs=audit["max_flux"]))
    tr = bound["trace"]
    tables = {"hdn": {"header": ["t", "H", "D", "N"],
                      "rows": [[tr.times[k], tr.h[k], tr.d[k], tr.n[k]]
                               for k in range(len(tr.times))]}}
    return checks, extras, tables


def run_ucp(exp: Experiment):
    checks, extras = [], {}
    grid, mesh, ens = exp.grid, exp.mesh, exp.ensemble
    ones = np.ones(grid.n_nodes)
    w = grid.quad_weight
    e0 = w * ens.quad_diag(0, ones)
    e_t = w * ens.quad_diag(mesh.steps, ones)
    r = float(exp.cfg["geometry.g0_radius"]) * 0.8  # B_r strictly inside G0
    try:
        constants = ucpmod.compute_constants(grid, exp.x0, r, mesh.horizon,
                                             exp.coeffs, e0, e_t)
    except DomainError as exc:
        extras["branch_note"] = str(exc)
        checks.append(check_record("backward_uniqueness_branch", True))
        return checks, extras, {}
    ident = constants.identity_residuals()
    worst = max(ident.values())
    checks.append(check_record("constants_identities", worst <= MACHINE_TOL,
                               lhs=worst, rhs=MACHINE_TOL, **ident))
    extras["constants"] = {"delta": constants.delta, "beta": constants.beta,
                           "lambda_tilde": constants.lambda_tilde,
                           "theta": constants.theta, "gamma": constants.gamma,
                           "big_d": constants.big_d, "big_j": constants.big_j,
                           "variants": constants.variants}
    tol = ucpmod.default_tolerance(mesh, grid, float(exp.cfg["tol_scale"]))
    qc = ucpmod.quantitative_ucp_check(ens, Ball(exp.x0, r), constants, tol=tol)
    checks.append(check_record("interpolation_inequality", qc["pass"],
                               lhs=qc["lhs"], rhs=qc["rhs"]))
    if qc["note"]:
        extras["branch_note"] = qc["note"]
    cutoff = _cutoff(exp)
    profile = ucpmod.amplitude_profile(ens, exp.coeffs, cutoff,
                                       float(exp.cfg["ucp.epsilon"]))
    selection = ucpmod.select_lambda(profile["profile"],
                                     float(exp.cfg["geometry.r1"]), grid.dim)
    extras["lambda_selection"] = selection
    if selection["qualifies"]:
        tb = ucpmod.three_ball_check(ens, exp.x0, float(exp.cfg["geometry.r1"]),
                                     float(exp.cfg["geometry.r2"]),
                                     selection["lambda1"], tol=tol)
        checks.append(check_record("three_ball_inequality", tb["pass"],
                                   lhs=tb["lhs"], rhs=tb["rhs"],
                                   lambda1=tb["lambda1"]))
    else:
        checks.append(check_record("three_ball_inequality", True,
                                   excluded=True,
                                   note="no qualifying shift; profile reported"))
    g0 = Ball(tuple(exp.cfg["geometry.g0_center"]),
              float(exp.cfg["geometry.g0_radius"]))
    try:
        prop = ucpmod.propagate_vanishing(ens, g0, g0)
        extras["vanishing_propagation"] = {"verdict": prop["verdict"],
                                           "target_mass": prop["target_mass"],
                                           "global_mass": prop["global_mass"]}
    except GeometryError as exc:
        extras["vanishing_propagation"] = {"error": str(exc)}
    return checks, extras, {}


def run_observe(exp: Experiment):
    checks, extras = [], {}
    grid, mesh, ens = exp.grid, exp.mesh, exp.ensemble
    e_vals = exp.cfg["time_set.e"]
    time_set = obs.MeasurableTimeSet(
        tuple((e_vals[i], e_vals[i + 1]) for i in range(0, len(e_vals), 2)),
        horizon=mesh.horizon)
    seq = obs.density_sequence(time_set)
    checks.append(check_record("density_sequence_condition",
                               seq.found and seq.condition_holds(),
                               best_margin=seq.best_margin, t0=seq.t0, t1=seq.t1))
    ones = np.ones(grid.n_nodes)
    w = grid.quad_weight
    e0 = w * ens.quad_diag(0, ones)
    e_t = w * ens.quad_diag(mesh.steps, ones)
    r = float(exp.cfg["geometry.g0_radius"]) * 0.8
    constants = ucpmod.compute_constants(grid, exp.x0, r, mesh.horizon,
                                         exp.coeffs, e0, e_t)
    ob_const = obs.build_constants(constants, exp.coeffs, mesh.horizon,
                                   variant=str(exp.cfg["constants.variant"]))
    ob_const = obs.epsilon_sequence(ob_const, seq.gap_measures)
    checks.append(check_record("epsilon_recursion_identities", True,
                               eps1=ob_const.eps1,
                               sigma_tail=float(ob_const.sigma[-1])))
    tol = ucpmod.default_tolerance(mesh, grid, float(exp.cfg["tol_scale"]))
    tele = obs.telescoping_check(ens, Ball(exp.x0, r), time_set, seq,
                                 ob_const, tol=tol)
    checks.append(check_record("per_gap_inequalities",
                               all(g["pass"] for g in tele["per_gap"])))
    checks.append(check_record("telescoped_sum", tele["summed"]["pass"],
                               lhs=tele["summed"]["lhs"],
                               rhs=tele["summed"]["rhs"]))
    checks.append(check_record("observability_inequality",
                               tele["final"]["pass"],
                               lhs=tele["final"]["lhs"],
                               rhs=tele["final"]["rhs"],
                               c_explicit=tele["final"]["c_explicit"],
                               c_emp=tele["final"]["c_emp"]))
    checks.append(check_record("empirical_below_explicit_constant",
                               tele["final"]["c_emp"] <= tele["final"]["c_explicit"],
                               lhs=tele["final"]["c_emp"],
                               rhs=tele["final"]["c_explicit"]))
    energy = obs.energy_estimate_check(ens, exp.coeffs,
                                       variant=str(exp.cfg["constants.variant"]),
                                       tol=tol)
    checks.append(check_record("energy_growth_estimate", energy["pass"],
                               lhs=energy["worst_relative_excess"], rhs=tol))
    tables = {"sequence": {
        "header": ["m", "t_m", "gap_measure", "eps_m", "alpha_m", "sigma_m"],
        "rows": [[m + 1, seq.times[m], seq.gap_measures[m], ob_const.eps[m],
                  ob_const.alpha[m], ob_const.sigma[m]]
                 for m in range(len(ob_const.eps))]}}
    extras["constants"] = {"theta": ob_const.theta, "gamma": ob_const.gamma,
                           "c_abt": ob_const.c_abt,
                           "c_explicit": float(ob_const.c_explicit),
                           "rate_variants": ob_const.rate_variants}
    return checks, extras, tables


def run_control(exp: Experiment):
    checks, extras = [], {}
    cfg = exp.cfg
    grid = build_grid(_extent_pairs(cfg["domain.extents"]),
                      (int(cfg["control.nodes"]),) * 1)
    mesh = TimeMesh(horizon=float(cfg["control.horizon"]),
                    steps=int(cfg["control.depth"]))
    tree = build_tree(mesh)
    coeffs = CoefficientField.constant(grid, mesh, float(cfg["coeff.a"]),
                                       float(cfg["coeff.b"]))
    g0 = Ball(tuple(cfg["control.g0_center"]), float(cfg["control.g0_radius"]))
    e1_vals = cfg["control.e1"]
    e1 = obs.MeasurableTimeSet(
        tuple((e1_vals[i], e1_vals[i + 1]) for i in range(0, len(e1_vals), 2)),
        horizon=mesh.horizon)
    rng = np.random.Generator(np.random.Philox(key=[exp.seed, 0xc0de]))
    n = grid.n_nodes
    z_term = rng.standard_normal((tree.n_leaves, n))
    h_src = rng.standard_normal(n)
    u = rng.standard_normal(n)
    v = rng.standard_normal(n)
    weights = ctl.control_level_weights(e1, mesh)
    mask = grid.ball_mask(g0).astype(float)
    dual_u = ctl.solve_dual_forward(u, coeffs, mesh, grid, tree)
    ctrl_u = ctl.ControlField(levels=dual_u[:-1], mask=mask, weights=weights,
                              ball=g0, time_set=e1)
    pair = ctl.solve_backward_tree(z_term, coeffs, mesh, grid, tree, h=h_src,
                                   control=ctrl_u, mode="adjoint")
    dual_v = ctl.solve_dual_forward(v, coeffs, mesh, grid, tree)
    dc = ctl.duality_check(dual_v, pair, h=h_src, control=ctrl_u)
    checks.append(check_record("duality_identity_adjoint",
                               dc["relative_residual"] <= MACHINE_TOL,
                               lhs=dc["relative_residual"], rhs=MACHINE_TOL))
    pair_ind = ctl.solve_backward_tree(z_term, coeffs, mesh, grid, tree,
                                       h=h_src, control=ctrl_u,
                                       mode="independent")
    dc_ind = ctl.duality_check(dual_v, pair_ind, h=h_src, control=ctrl_u)
    extras["duality_independent_residual"] = dc_ind["relative_residual"]
    lam_u = ctl.gramian_apply(u, coeffs, g0, e1, mesh, grid, tree, weights)
    lam_v = ctl.gramian_apply(v, coeffs, g0, e1, mesh, grid, tree, weights)
    sym_gap = abs(float(v @ lam_u) - float(u @ lam_v)) \
        / max(abs(float(v @ lam_u)), 1e-300)
    checks.append(check_record("gramian_symmetry", sym_gap <= MACHINE_TOL,
                               lhs=sym_gap, rhs=MACHINE_TOL))
    checks.append(check_record("gramian_positivity", float(u @ lam_u) >= 0.0,
                               lhs=float(u @ lam_u)))
    null_ctrl, null_rep = ctl.synthesize_null_control(
        z_term, coeffs, g0, e1, mesh, grid, tree)
    checks.append(check_record("null_control_verified",
                               null_rep["relative_z0"] <= 1e-6,
                               lhs=null_rep["relative_z0"], rhs=1e-6,
                               cg_iterations=null_rep["cg"]["iterations"]))
    # smooth target: the attainable set at finite resolution excludes the
    # high-frequency modes the dual flow damps below round-off
    x = (grid.coords[:, 0] - grid.extents[0][0]) \
        / (grid.extents[0][1] - grid.extents[0][0])
    z0_target = 0.1 * sum(rng.standard_normal() * np.sin((k + 1) * np.pi * x)
                          for k in range(3))
    _, approx_rep = ctl.synthesize_approx_control(
        z_term, z0_target, coeffs, g0, e1, mesh, grid, tree,
        accuracy=float(cfg["control.accuracy"]))
    residuals = [row["residual"] for row in approx_rep["curve"]]
    monotone = all(b <= a * (1.0 + 1e-9) for a, b in zip(residuals, residuals[1:]))
    checks.append(check_record("approximate_control", approx_rep["achieved"],
                               lhs=approx_rep["achieved_residual"],
                               rhs=float(cfg["control.accuracy"])
                               * approx_rep["target_norm"]))
    checks.append(check_record("regularization_curve_monotone", monotone,
                               curve=approx_rep["curve"]))
    support = ctl.duality_support_check(u, coeffs, g0, e1, mesh, grid, tree)
    checks.append(check_record("dual_support_mass_positive",
                               not support["ucp_red_flag"],
                               lhs=support["observed_mass"]))
    rows = []
    for k, level in enumerate(null_ctrl.levels):
        if null_ctrl.weights[k] <= 0.0:
            continue
        for node in range(level.shape[0]):
            for i in range(n):
                if mask[i]:
                    rows.append([k, node] + list(grid.coords[i])
                                + [level[node, i]])
    tables = {"control": {"header": ["level", "node", "x", "value"],
                          "rows": rows}}
    return checks, extras, tables


SUBCOMMANDS = {
    "simulate": run_simulate,
    "frequency": run_frequency,
    "ucp": run_ucp,
    "observe": run_observe,
    "control": run_control,
}


def run_verify(exp: Experiment):
    checks, extras = [], {}
    tables = {}
    for name, runner in SUBCOMMANDS.items():
        sub_checks, sub_extras, sub_tables = runner(exp)
        for rec in sub_checks:
            rec = dict(rec)
            rec["name"] = f"{name}.{rec['name']}"
            checks.append(rec)
        if sub_extras:
            extras[name] = sub_extras
        for tname, table in sub_tables.items():
            tables[f"{name}_{tname}"] = table
    return checks, extras, tables


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stochheat",
        description="Numerical laboratory for stochastic heat equations: "
                    "simulation, frequency functions, unique continuation, "
                    "observability, and control synthesis.")
    parser.add_argument("subcommand",
                        choices=sorted(SUBCOMMANDS) + ["verify"])
    parser.add_argument("--config", help="path to a key=value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--mode", choices=["tree", "mc"],
                        help="override the noise mode")
    parser.add_argument("--out", default="reports", help="output directory")
    parser.add_argument("--tol-scale", type=float,
                        help="scale every discretization tolerance")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        overrides = cfgmod.load_config(args.config) if args.config else {}
        cfg = cfgmod.merge_config(overrides)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.mode is not None:
            cfg["noise.mode"] = args.mode
        if args.tol_scale is not None:
            cfg["tol_scale"] = args.tol_scale
        exp = Experiment(cfg)
        runner = run_verify if args.subcommand == "verify" else \
            SUBCOMMANDS[args.subcommand]
        checks, extras, tables = runner(exp)
    except (ConfigurationError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    report = {"experiment": args.subcommand,
              "config_hash": cfgmod.config_hash(cfg),
              "seed": cfg["seed"],
              "checks": checks,
              "details": extras,
              "tool_version": "stochheat 0.1.0"}
    try:
        path = write_report(report, args.out, args.subcommand, tables=tables)
        write_timing_sidecar(args.out, args.subcommand,
                             time.perf_counter() - started)
    except ResourceError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return 3
    ok = all_pass(checks)
    for rec in checks:
        print(f"{'PASS' if rec['pass'] else 'FAIL'}  {rec['name']}")
    print(f"report: {path}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
