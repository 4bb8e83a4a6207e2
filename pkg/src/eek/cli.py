"""Command-line entry point binding the toolkit pipeline.

Subcommands: norms, symbol, reconstruct, constraints, evolve, properties,
pipeline.  Exit codes: 0 success, 2 validation failure, 3 numerical
failure.  A key = value config file can preload any long flag; explicit
flags win.  All randomized sampling is seeded (--seed, default 0).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import constraints as cst
from . import evolve as evo
from .fields import (
    FieldFormatError, Grid, GridField, SobolevIndex, read_field, write_field,
)
from .fluid import (
    EquationOfState, HyperbolicityError, SpacetimeMetric, MINKOWSKI,
    characteristic_det, classify_covector, euler_matrices,
)
from .idata import (
    NewtonConvergenceError, RegionViolationError, ScaledMatter, full_velocity,
    phi_inverse,
)
from .spaces import property_suite, weighted_norm

VALIDATION_ERRORS = (
    ValueError, FieldFormatError, RegionViolationError, FileNotFoundError,
    IsADirectoryError, KeyError,
)
NUMERICAL_ERRORS = (
    cst.EllipticSolveError, evo.EvolutionError, NewtonConvergenceError,
    HyperbolicityError, FloatingPointError,
)


def _load_config(path):
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = val
    return values


def _parse_floats(text, count=None):
    vals = [float(v) for v in text.split(",") if v.strip() != ""]
    if count is not None and len(vals) != count:
        raise ValueError(f"expected {count} comma-separated values, got {len(vals)}")
    return np.array(vals)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def build_parser():
    p = argparse.ArgumentParser(prog="eek", description=__doc__)
    p.add_argument("--version", action="version", version=f"eek {__version__}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="key = value file of defaults")
    sub = p.add_subparsers(dest="command", required=True)

    n = sub.add_parser("norms", help="weighted Sobolev norms of a field file")
    n.add_argument("--field", required=True)
    n.add_argument("--s", type=float, required=True)
    n.add_argument("--delta", type=float, required=True)
    n.add_argument("--gamma-psi", type=int, default=2, choices=(1, 2, 4))
    n.add_argument("--report", default=None)

    s = sub.add_parser("symbol", help="characteristic analysis of one state")
    s.add_argument("--gamma", type=float, required=True)
    s.add_argument("--K", type=float, required=True)
    s.add_argument("--state", required=True,
                   help="w=W,u=U0,U1,U2,U3")
    s.add_argument("--metric", default="minkowski",
                   help="'minkowski' or 16 comma-separated entries")
    s.add_argument("--xi", required=True, help="4 covector components")

    r = sub.add_parser("reconstruct", help="matter sources -> fluid data")
    r.add_argument("--gamma", type=float, required=True)
    r.add_argument("--K", type=float, required=True)
    r.add_argument("--in", dest="matter", required=True,
                   help="field file with (z, j1, j2, j3)")
    r.add_argument("--metric", required=True, help="6-component slice metric")
    r.add_argument("--out", required=True)
    r.add_argument("--u0-convention", default="sqrt", choices=("sqrt", "linear"))

    c = sub.add_parser("constraints", help="conformal constraint pipeline")
    c.add_argument("--free", required=True,
                   help="'trivial' or a 16-component free-data file "
                        "(hbar 6, Abar 6, yhat 1, vhat 3)")
    c.add_argument("--gamma", type=float, required=True)
    c.add_argument("--K", type=float, required=True)
    c.add_argument("--n", type=int, default=32, help="grid for --free trivial")
    c.add_argument("--L", type=float, default=8.0)
    c.add_argument("--out", required=True)
    c.add_argument("--report", default=None)

    e = sub.add_parser("evolve", help="symmetric-hyperbolic evolution")
    e.add_argument("--data", required=True, help="constraints output file")
    e.add_argument("--fluid", default=None, help="reconstruct output file")
    e.add_argument("--gamma", type=float, required=True)
    e.add_argument("--K", type=float, required=True)
    e.add_argument("--T", type=float, default=1.0)
    e.add_argument("--cfl", type=float, default=0.25)
    e.add_argument("--s", type=float, required=True)
    e.add_argument("--delta", type=float, default=-1.0)
    e.add_argument("--dissipation", type=float, default=0.05)
    e.add_argument("--monitor", default=None)
    e.add_argument("--picard", type=int, default=None, metavar="K_MAX")

    q = sub.add_parser("properties", help="inequality harness")
    q.add_argument("--suite", default="spaces", choices=("spaces",))
    q.add_argument("--n", type=int, default=32)
    q.add_argument("--L", type=float, default=16.0)
    q.add_argument("--report", default=None)

    pl = sub.add_parser("pipeline", help="constraints -> reconstruct -> evolve")
    pl.add_argument("--free", required=True)
    pl.add_argument("--gamma", type=float, default=1.8)
    pl.add_argument("--K", type=float, default=1.0)
    pl.add_argument("--n", type=int, default=24)
    pl.add_argument("--L", type=float, default=8.0)
    pl.add_argument("--T", type=float, default=0.25)
    pl.add_argument("--s", type=float, default=3.6)
    pl.add_argument("--delta", type=float, default=-1.0)
    pl.add_argument("--cfl", type=float, default=0.25)
    pl.add_argument("--outdir", default=".")
    return p


def cmd_norms(args):
    u = read_field(args.field)
    idx = SobolevIndex(args.s, args.delta)
    rep = weighted_norm(u, idx, gamma_psi=args.gamma_psi)
    print(f"dyadic norm (s={args.s}, delta={args.delta}): {rep.dyadic:.12e}")
    if rep.truncation_warning:
        print("warning: outermost shell holds >10% of the norm "
              "(field may not be decayed inside the box)")
    if args.report:
        cum = np.sqrt(np.cumsum(np.square(rep.shell_terms)))
        rows = [
            [j, term, 2.0 ** ((1.5 + args.delta) * 2 * j), c]
            for j, (term, c) in enumerate(zip(rep.shell_terms, cum))
        ]
        _write_csv(args.report, ["j", "shell_term", "weight", "cumulative"], rows)
    return 0


def cmd_symbol(args):
    eos = EquationOfState(K=args.K, gamma=args.gamma)
    parts = dict(item.split("=", 1) for item in args.state.split(";")) \
        if ";" in args.state else None
    if parts is None:
        # format w=W,u=U0,U1,U2,U3
        text = args.state
        if not text.startswith("w="):
            raise ValueError("state must look like w=0.3,u=1.02,0.2,0,0")
        w_text, u_text = text.split(",u=", 1)
        w = float(w_text[2:])
        u = _parse_floats(u_text, 4)
    if args.metric == "minkowski":
        metric = MINKOWSKI
    else:
        metric = SpacetimeMetric(_parse_floats(args.metric, 16).reshape(4, 4))
    xi = _parse_floats(args.xi, 4)
    det, Q = characteristic_det(eos, metric, w, u, xi)
    A = euler_matrices(eos, metric, w, u)
    out = {
        "det": float(det),
        "Q": float(Q),
        "classification": classify_covector(eos, metric, w, u, xi),
        "A0_spectrum": np.linalg.eigvalsh(A[0]).tolist(),
    }
    print(json.dumps(out, indent=2))
    return 0


def cmd_reconstruct(args):
    eos = EquationOfState(K=args.K, gamma=args.gamma)
    matter = read_field(args.matter)
    hfield = read_field(args.metric, warn_decay=False)
    if matter.components != 4:
        raise ValueError("matter file needs components (z, j1, j2, j3)")
    if hfield.components != 6:
        raise ValueError("metric file needs 6 symmetric components")
    if matter.grid != hfield.grid:
        raise ValueError("matter and metric grids differ")
    h_full = cst.sym_to_full(hfield.data)
    z = matter.data[0]
    j = np.moveaxis(matter.data[1:4], 0, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(z[..., None] > 0, j / z[..., None], 0.0)
    sm = ScaledMatter(z ** (0.5 * (eos.gamma - 1.0)), v)
    point = phi_inverse(eos, h_full, sm)
    u0, ubar = full_velocity(h_full, point, u0_convention=args.u0_convention)
    out = np.concatenate([point.w[None], np.moveaxis(ubar, -1, 0), u0[None]])
    write_field(args.out, GridField(matter.grid, out))
    print(f"wrote fluid data (w, u1, u2, u3, u0) to {args.out}")
    return 0


def _read_free_data(args):
    if args.free == "trivial":
        grid = Grid(args.n, args.L)
        return cst.trivial_free_data(grid)
    f = read_field(args.free, warn_decay=False)
    if f.components != 16:
        raise ValueError(
            "free-data file needs 16 components (hbar 6, Abar 6, yhat, vhat 3)"
        )
    g = f.grid
    return cst.ConstraintFreeData(
        hbar=GridField(g, f.data[0:6]),
        Abar=GridField(g, f.data[6:12]),
        yhat=GridField(g, f.data[12:13]),
        vhat=GridField(g, f.data[13:16]),
    )


GD_LAYOUT = "h(6) K(6) z(1) j(3) alpha(1) phi(1) W(3)"


def _write_gravitational(path, gd):
    data = np.concatenate([
        gd.h.data, gd.Kext.data, gd.z.data, gd.j.data,
        gd.alpha.data, gd.phi.data, gd.W.data,
    ])
    write_field(path, GridField(gd.grid, data))


def _read_gravitational(path):
    f = read_field(path, warn_decay=False)
    if f.components != 21:
        raise ValueError(f"data file needs 21 components: {GD_LAYOUT}")
    g = f.grid
    return cst.GravitationalData(
        h=GridField(g, f.data[0:6]), Kext=GridField(g, f.data[6:12]),
        z=GridField(g, f.data[12:13]), j=GridField(g, f.data[13:16]),
        alpha=GridField(g, f.data[16:17]), phi=GridField(g, f.data[17:18]),
        W=GridField(g, f.data[18:21]),
    )


def cmd_constraints(args):
    eos = EquationOfState(K=args.K, gamma=args.gamma)
    free = _read_free_data(args)
    reports = []
    gd = cst.assemble_physical_data(free, eos, collect=reports)
    _write_gravitational(args.out, gd)
    _, _, norms = cst.constraint_residuals(gd)
    print(f"wrote {GD_LAYOUT} to {args.out}")
    print(f"hamiltonian residual norm {norms['hamiltonian']:.3e}, "
          f"momentum {norms['momentum']:.3e}")
    if args.report:
        rows = [[r.stage, r.residual, r.iterations, r.wall_time] for r in reports]
        rows.append(["hamiltonian", norms["hamiltonian"], 0, 0.0])
        rows.append(["momentum", norms["momentum"], 0, 0.0])
        _write_csv(args.report, ["stage", "residual_norm", "iterations",
                                 "wall_time"], rows)
    return 0


def cmd_evolve(args):
    eos = EquationOfState(K=args.K, gamma=args.gamma)
    evo.validate_order(args.gamma, args.s)
    gd = _read_gravitational(args.data)
    if args.fluid:
        f = read_field(args.fluid, warn_decay=False)
        if f.components != 5:
            raise ValueError("fluid file needs components (w, u1, u2, u3, u0)")
        w = GridField(f.grid, f.data[0:1])
        ubar = GridField(f.grid, f.data[1:4])
        state0 = evo.initial_state(gd, w, ubar)
    else:
        state0 = evo.initial_state(gd)
    system = evo.assemble_einstein_system(eos, dissipation=args.dissipation)
    dt = evo.dt_from_cfl(system, state0, args.cfl)
    n_steps = max(1, int(np.ceil(args.T / dt)))
    dt = args.T / n_steps

    if args.picard:
        traj, report = evo.picard_iteration(
            system, state0, args.T, dt, args.picard, delta=args.delta
        )
        print(f"picard ratios: {[round(r, 4) for r in report.ratios]}")
        if not report.converged:
            raise evo.EvolutionError(
                "fixed-point iteration did not contract; reduce T"
            )
        return 0

    state, monitor = evo.monitor_run(
        system, state0, args.T, dt, args.s, args.delta, cfl=args.cfl
    )
    print(f"evolved to T={args.T} in {n_steps} steps; "
          f"energy {monitor.energy[0]:.6e} -> {monitor.energy[-1]:.6e}; "
          f"fitted growth constant {monitor.growth_constant:.3f}")
    if args.monitor:
        header, rows = monitor.rows()
        _write_csv(args.monitor, header, rows)
    return 0


def cmd_properties(args):
    grid = Grid(args.n, args.L)

    def gaussian(width, center):
        cx, cy, cz = center, 0.0, 0.0

        def f(X, Y, Z):
            return np.exp(-((X - cx) ** 2 + Y ** 2 + Z ** 2) / width ** 2)

        return f

    family = [
        GridField.from_function(grid, gaussian(w, c))
        for w, c in [(3.0, 0.0), (4.0, 0.0), (2.5, 2.0), (3.0, 4.0), (2.5, 6.0)]
    ]
    results = property_suite(family, seed=args.seed)
    rows = []
    all_pass = True
    for name, res in sorted(results.items()):
        status = "PASS" if res.passed else "FAIL"
        all_pass &= res.passed
        print(f"{name:>18}: fitted constant {res.c_max:10.4f} "
              f"(spread {res.spread:6.2f}x) {status}")
        rows.append([name, res.c_max, res.spread, status])
    if args.report:
        _write_csv(args.report, ["inequality", "constant", "spread", "status"], rows)
    return 0 if all_pass else 3


def cmd_pipeline(args):
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    eos = EquationOfState(K=args.K, gamma=args.gamma)
    evo.validate_order(args.gamma, args.s)

    free = _read_free_data(args)
    reports = []
    gd = cst.assemble_physical_data(free, eos, collect=reports)
    _write_gravitational(outdir / "data.eek", gd)
    _, _, norms = cst.constraint_residuals(gd)
    print(f"constraints: ham {norms['hamiltonian']:.3e} "
          f"mom {norms['momentum']:.3e}")

    # matter sources -> fluid unknowns on the solved slice
    h_full = cst.sym_to_full(gd.h.data)
    z = gd.z.data[0]
    j = np.moveaxis(gd.j.data, 0, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(z[..., None] > 0, j / z[..., None], 0.0)
    sm = ScaledMatter(z ** (0.5 * (eos.gamma - 1.0)), v)
    point = phi_inverse(eos, h_full, sm)
    u0, ubar = full_velocity(h_full, point)
    fluid_out = np.concatenate([point.w[None], np.moveaxis(ubar, -1, 0), u0[None]])
    write_field(outdir / "fluid.eek", GridField(gd.grid, fluid_out))

    w = GridField(gd.grid, point.w[None])
    ub = GridField(gd.grid, np.moveaxis(ubar, -1, 0))
    state0 = evo.initial_state(gd, w, ub)
    system = evo.assemble_einstein_system(eos)
    dt = evo.dt_from_cfl(system, state0, args.cfl)
    n_steps = max(1, int(np.ceil(args.T / dt)))
    state, monitor = evo.monitor_run(
        system, state0, args.T, args.T / n_steps, args.s, args.delta, cfl=args.cfl
    )
    header, rows = monitor.rows()
    _write_csv(outdir / "monitor.csv", header, rows)
    print(f"pipeline complete: T={args.T}, energy "
          f"{monitor.energy[0]:.6e} -> {monitor.energy[-1]:.6e}")
    return 0


COMMANDS = {
    "norms": cmd_norms,
    "symbol": cmd_symbol,
    "reconstruct": cmd_reconstruct,
    "constraints": cmd_constraints,
    "evolve": cmd_evolve,
    "properties": cmd_properties,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    # config preloading: values act as defaults, explicit flags override
    if "--config" in argv:
        idx = argv.index("--config")
        try:
            values = _load_config(argv[idx + 1])
        except (OSError, ValueError, IndexError) as exc:
            print(f"error: bad config file: {exc}", file=sys.stderr)
            return 2
        known = {a.dest for a in parser._actions}
        for subparsers in [a for a in parser._actions
                           if isinstance(a, argparse._SubParsersAction)]:
            for sp_ in subparsers.choices.values():
                defaults = {k: v for k, v in values.items()
                            if any(k == act.dest for act in sp_._actions)}
                for key, val in defaults.items():
                    act = next(a for a in sp_._actions if a.dest == key)
                    if act.type is not None:
                        val = act.type(val)
                    sp_.set_defaults(**{key: val})
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    np.random.seed(args.seed)
    try:
        return COMMANDS[args.command](args)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
