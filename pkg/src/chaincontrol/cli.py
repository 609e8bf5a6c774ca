"""Command line interface.

Subcommands mirror the library layers: decompose reports the spectral
structure of a derivation, simulate integrates one controlled trajectory,
chainset runs the full grid pipeline, conjugate quotients a run onto its
hyperbolic part, and verify executes the whole acceptance battery.

Every run writes report.json into the output directory.  The file holds a
"body" (canonically ordered, reproducible for a fixed config and seed) and
a separate "timings" key that stays outside the reproducibility contract.
Exit codes: 0 all verdicts passed, 2 validation failure, 3 a theorem check
failed.
"""

import argparse
import copy
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import config as cfg
from .chains import (
    build_chain_graph,
    central_fiber_nodes,
    estimate_source_constants,
    extract_chain_sets,
    theoretical_bound,
    verify_uniqueness_and_containment,
    write_edges_csv,
    write_nodes_csv,
    write_plot_slice,
    write_sets_jsonl,
)
from .errors import NotHyperbolicError, TauTooSmallError, ValidationError
from .group import ConjugationMap
from .lcs import ControlFunction, cross_check_residual, integrate
from .spectral import SpectralSplit, check_derivation, decay_constants
from .verify import DEFAULT_SEED, acceptance_report


# -- shared plumbing ---------------------------------------------------------


def _raw_config(args):
    """Raw config dict from --preset or --config, plus flag overrides."""
    preset = getattr(args, "preset", None)
    path = getattr(args, "config", None)
    if (preset is None) == (path is None):
        raise ValidationError("pass exactly one of --preset / --config")
    if preset is not None:
        if preset not in cfg.PRESETS:
            known = ", ".join(sorted(cfg.PRESETS))
            raise ValidationError(f"unknown preset {preset!r}; known: {known}")
        data = copy.deepcopy(cfg.PRESETS[preset])
    else:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}")
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    chain = data.setdefault("chain", {})
    if getattr(args, "eps", None) is not None:
        chain["eps"] = args.eps
    if getattr(args, "tau", None) is not None:
        chain["tau"] = args.tau
    if getattr(args, "delta", None) is not None:
        chain["delta"] = [float(v) for v in args.delta.split(",")]
    return data


def _out_dir(args, command):
    out = Path(args.out) if args.out else Path("out") / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(out, body, timings):
    report = {"body": body, "timings": timings}
    path = out / "report.json"
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return path


def _residual_row(name, value, tolerance):
    return {"name": name, "value": float(value),
            "tolerance": float(tolerance),
            "passed": bool(value <= tolerance)}


def _exit_code(body):
    """0 when every residual and boolean verdict passed, else 3."""
    for row in body.get("residuals", []):
        if not row["passed"]:
            return 3
    for value in body.get("verdicts", {}).values():
        if value is False:
            return 3
    return 0


def _structure_residuals(system):
    """Rows for the structural identities every run silently relies on."""
    c = system.algebra.structure
    anti = float(np.max(np.abs(c + c.transpose(1, 0, 2)))) if c.size else 0.0
    t1 = np.einsum("bcl,alm->abcm", c, c)
    t2 = np.einsum("cal,blm->abcm", c, c)
    t3 = np.einsum("abl,clm->abcm", c, c)
    jac = float(np.max(np.abs(t1 + t2 + t3))) if c.size else 0.0
    leib = check_derivation(system.algebra, system.derivation)
    return [
        _residual_row("bracket_antisymmetry", anti, 1e-12),
        _residual_row("jacobi_identity", jac, 1e-12),
        _residual_row("leibniz_rule", leib, 1e-10),
        _residual_row("automorphism_flow", system.flow_residual, 1e-8),
    ]


# -- decompose ---------------------------------------------------------------


def cmd_decompose(args):
    t0 = time.perf_counter()
    config = cfg.parse_config(_raw_config(args))
    system = cfg.build_system(config)
    alg = system.algebra

    split = SpectralSplit(system.derivation)
    dims = {"stable": int(split.dims[0]), "center": int(split.dims[1]),
            "unstable": int(split.dims[2])}
    levels = []
    hyperbolic = True
    for i in range(1, alg.nilpotency_class + 1):
        block = system.blocks.block(i, i)
        entry = {"level": i, "dim": int(block.shape[0])}
        try:
            dec = decay_constants(block)
            entry["kappa"] = float(dec["kappa"])
            entry["mu"] = float(dec["mu"])
        except NotHyperbolicError as exc:
            hyperbolic = False
            entry["kappa"] = None
            entry["mu"] = None
            entry["note"] = str(exc)
        levels.append(entry)

    body = {
        "command": "decompose",
        "name": config.name,
        "seed": config.seed,
        "spectrum": [[float(z.real), float(z.imag)]
                     for z in np.sort_complex(split.eigenvalues)],
        "subspace_dims": dims,
        "levels": levels,
        "hyperbolic": hyperbolic,
        "residuals": _structure_residuals(system),
        "verdicts": {"structure_valid": True},
    }
    out = _out_dir(args, "decompose")
    timings = {"total": time.perf_counter() - t0}
    path = _write_report(out, body, timings)
    print(f"spectrum: {body['spectrum']}")
    print(f"subspace dims: {dims}")
    print(f"hyperbolic: {hyperbolic}")
    print(f"report: {path}")
    return _exit_code(body)


# -- simulate ----------------------------------------------------------------


def _parse_control(args, m, duration):
    if args.control is not None and args.control_file is not None:
        raise ValidationError("pass at most one of --control / --control-file")
    if args.control_file is not None:
        rows = []
        try:
            with open(args.control_file) as fh:
                for line in fh:
                    line = line.strip()
                    if not line or line.startswith("#"):
                        continue
                    rows.append([float(v) for v in line.split(",")])
        except OSError as exc:
            raise ValidationError(f"cannot read control file: {exc}")
        if not rows or any(len(r) != m + 1 for r in rows):
            raise ValidationError(
                f"control file rows must be: start_time, {m} control values")
        starts = [r[0] for r in rows]
        if abs(starts[0]) > 1e-12:
            raise ValidationError("first control piece must start at time 0")
        values = [r[1:] for r in rows]
        return ControlFunction(starts + [duration], values)
    if args.control is not None:
        value = [float(v) for v in args.control.split(",")]
        if len(value) != m:
            raise ValidationError(f"--control needs {m} comma separated values")
    else:
        value = [0.0] * m
    return ControlFunction.constant(value, 0.0, duration)


def cmd_simulate(args):
    t0 = time.perf_counter()
    config = cfg.parse_config(_raw_config(args))
    system = cfg.build_system(config)
    group = system.group
    duration = float(args.duration)
    if duration <= 0:
        raise ValidationError("--duration must be positive")
    control = _parse_control(args, system.range.m, duration)

    if args.start is not None:
        g0 = np.array([float(v) for v in args.start.split(",")])
        if g0.shape != (group.dim,):
            raise ValidationError(
                f"--start needs {group.dim} comma separated coordinates")
    else:
        g0 = np.zeros(group.dim)

    traj = integrate(system, duration, g0, control, record=True)
    out = _out_dir(args, "simulate")
    names = [f"theta{j}" for j in range(group.h_dim)] + \
        [f"x{j}" for j in range(group.x_dim)]
    csv_path = None
    if "csv" in config.formats:
        csv_path = out / "trajectory.csv"
        with open(csv_path, "w") as fh:
            fh.write(",".join(["t"] + names) + "\n")
            for t, pt in zip(traj.times, traj.points):
                fh.write(",".join(f"{v:.12g}" for v in [t, *pt]) + "\n")

    residuals = [_residual_row("integrator_error_estimate",
                               traj.stats["error_estimate"],
                               1e-8 * duration)]
    if args.cross_check:
        gap = cross_check_residual(system, duration, g0, control)
        residuals.append(_residual_row("closed_form_cross_check", gap, 1e-6))

    body = {
        "command": "simulate",
        "name": config.name,
        "seed": config.seed,
        "duration": duration,
        "start": [float(v) for v in g0],
        "endpoint": [float(v) for v in traj.endpoint],
        "steps": int(traj.stats["steps"]),
        "residuals": residuals,
        "verdicts": {"integration_accurate": residuals[0]["passed"]},
    }
    if args.cross_check:
        body["verdicts"]["closed_form_agrees"] = residuals[1]["passed"]
    timings = {"total": time.perf_counter() - t0}
    path = _write_report(out, body, timings)
    print(f"endpoint after t={duration}: {body['endpoint']}")
    if csv_path:
        print(f"trajectory: {csv_path}")
    print(f"report: {path}")
    return _exit_code(body)


# -- chainset ----------------------------------------------------------------


def _chain_run(config):
    """System, window, graph, sets, fiber nodes for a parsed config."""
    system = cfg.build_system(config)
    window = cfg.build_window(config, system)
    graph = build_chain_graph(system, window, config.eps, config.tau,
                              control_family=config.family,
                              time_samples=config.times)
    sets = extract_chain_sets(graph)
    fiber = central_fiber_nodes(window)
    return system, window, graph, sets, fiber


def _chain_verdict_rows(config, sets, fiber, bound, report):
    """Verdicts plus the residual rows backing each of them."""
    verdicts = {
        "unique": report.unique,
        "fiber_containment": report.fiber_contained,
        "extents": report.extents_ok if bound is not None else "n/a",
        "interior": ((not report.boundary_touched)
                     if config.require_interior else "n/a"),
    }
    residuals = [
        _residual_row("extra_chain_sets", max(len(sets) - 1, 0), 0),
        _residual_row("missing_fiber_nodes", report.missing_fiber_nodes, 0),
    ]
    if len(sets) == 0:
        residuals[0] = _residual_row("extra_chain_sets", 1, 0)
    if bound is not None and sets:
        main = max(sets, key=lambda s: s.size)
        for i, (ext, lim) in enumerate(zip(main.extents, bound.bounds), 1):
            residuals.append(_residual_row(f"level_{i}_extent", ext, lim))
    if config.require_interior and sets:
        main = max(sets, key=lambda s: s.size)
        residuals.append(_residual_row("boundary_touches",
                                       int(main.boundary_touch.sum()), 0))
    return verdicts, residuals


def cmd_chainset(args):
    t0 = time.perf_counter()
    config = cfg.parse_config(_raw_config(args))
    system, window, graph, sets, fiber = _chain_run(config)
    t_graph = time.perf_counter() - t0

    bound = None
    diagnostic = None
    try:
        consts = estimate_source_constants(system, window, config.tau,
                                           control_family=config.family)
        bound = theoretical_bound(system, config.tau, consts)
    except NotHyperbolicError as exc:
        diagnostic = f"unbounded direction detected: {exc}"
    except TauTooSmallError as exc:
        diagnostic = f"no contraction at this tau: {exc}"

    report = verify_uniqueness_and_containment(sets, fiber, bounds=bound)
    verdicts, residuals = _chain_verdict_rows(config, sets, fiber, bound,
                                              report)
    residuals = _structure_residuals(system) + residuals

    out = _out_dir(args, "chainset")
    if "csv" in config.formats:
        write_nodes_csv(out / "nodes.csv", graph, sets)
        write_edges_csv(out / "edges.csv", graph)
        box_axes = [a for a in range(window.n_axes)
                    if window.axis_kind[a] != "angle"]
        cols = box_axes[:2] if len(box_axes) >= 2 else []
        if not cols and window.n_axes >= 2:
            cols = [0, 1]
        if cols:
            plotdir = out / "plotdata"
            plotdir.mkdir(exist_ok=True)
            for i, s in enumerate(sets):
                write_plot_slice(plotdir / f"set{i}.csv", graph, s,
                                 columns=tuple(cols))
    if "jsonl" in config.formats:
        write_sets_jsonl(out / "sets.jsonl", sets, bounds=bound)

    body = {
        "command": "chainset",
        "name": config.name,
        "seed": config.seed,
        "eps": config.eps,
        "tau": config.tau,
        "nodes": int(window.n_nodes),
        "edges": int(graph.n_edges),
        "n_sets": len(sets),
        "set_sizes": [s.size for s in sets],
        "extents": ([float(v) for v in max(sets, key=lambda s: s.size).extents]
                    if sets else None),
        "bounds": ([float(v) for v in bound.bounds]
                   if bound is not None else None),
        "hyperbolic": bound is not None,
        "diagnostic": diagnostic,
        "failures": list(report.failures),
        "residuals": residuals,
        "verdicts": verdicts,
    }
    timings = {"graph_and_extract": t_graph,
               "total": time.perf_counter() - t0}
    path = _write_report(out, body, timings)
    print(f"nodes {body['nodes']}, edges {body['edges']}, "
          f"chain sets {body['n_sets']}")
    for key, value in verdicts.items():
        print(f"  {key}: {value}")
    if diagnostic:
        print(f"  note: {diagnostic}")
    print(f"report: {path}")
    return _exit_code(body)


# -- conjugate ---------------------------------------------------------------


def _downstairs_raw(config, psi):
    """Raw config dict for the quotient system psi maps onto."""
    target = psi.target
    data = {
        "schema": cfg.SCHEMA_VERSION,
        "name": config.name + "-quotient",
        "seed": config.seed,
        "algebra": {"structure": target.algebra.structure.tolist()},
        "derivation": psi.matrix_hat.tolist(),
        "torus": {
            "dim": int(target.h_dim),
            "speeds": [float(v) for v in target.torus.speeds],
            "generators": [g.tolist() for g in target.action.generators],
        },
        "control": {
            "z": (config.control_vectors @ psi.w).tolist(),
            "lower": config.lower.tolist(),
            "upper": config.upper.tolist(),
        },
        "chain": {
            "eps": config.eps,
            "tau": config.tau,
            "delta": config.delta.tolist(),
            "angle_cells": list(config.angle_cells),
        },
        "output": {"formats": list(config.formats)},
    }
    if config.torus_controls is not None:
        data["control"]["torus_controls"] = config.torus_controls.tolist()
    if config.family is not None:
        data["control"]["family"] = config.family.tolist()
    if config.x_lower is not None:
        data["chain"]["x_lower"] = config.x_lower.tolist()
        data["chain"]["x_upper"] = config.x_upper.tolist()
    else:
        data["chain"]["level_bounds"] = config.level_bounds.tolist()
        data["chain"]["window_factor"] = config.window_factor
    if config.times is not None:
        data["chain"]["times"] = config.times.tolist()
    return data


def cmd_conjugate(args):
    t0 = time.perf_counter()
    config = cfg.parse_config(_raw_config(args))
    system = cfg.build_system(config)
    window = cfg.build_window(config, system)
    psi = ConjugationMap(system.group, system.derivation,
                         extra_kernel=config.extra_kernel)

    full = np.linalg.eigvals(system.derivation)
    nonzero = np.sort_complex(full[np.abs(full.real) > 1e-9])
    hat = np.sort_complex(np.linalg.eigvals(psi.matrix_hat))
    eig_gap = (float(np.max(np.abs(nonzero - hat)))
               if nonzero.size or hat.size else 0.0)
    hom = float(psi.homomorphism_residual())
    flow = float(psi.flow_equivariance_residual())

    down_raw = _downstairs_raw(config, psi)
    down_cfg = cfg.parse_config(down_raw)
    out = _out_dir(args, "conjugate")
    cfg.dump_config(down_raw, out / "downstairs.yaml")

    graph = build_chain_graph(system, window, config.eps, config.tau,
                              control_family=config.family,
                              time_samples=config.times)
    usets = extract_chain_sets(graph)

    down_sys = cfg.build_system(down_cfg)
    down_win = cfg.build_window(down_cfg, down_sys)
    dgraph = build_chain_graph(down_sys, down_win, config.eps, config.tau,
                               control_family=config.family,
                               time_samples=config.times)
    dsets = extract_chain_sets(dgraph)

    spacing = float(np.max(config.delta))
    if config.angle_cells:
        spacing = max(spacing, 2.0 * np.pi / min(config.angle_cells))
    tol_incl = config.eps + spacing
    worst = np.inf
    mapped = None
    if usets and dsets:
        up_main = max(usets, key=lambda s: s.size)
        down_main = max(dsets, key=lambda s: s.size)
        mapped = psi.apply(window.points[up_main.nodes])
        dpts = down_win.points[down_main.nodes]
        dist = psi.target.distance(mapped[:, None, :], dpts[None, :, :])
        worst = float(dist.min(axis=1).max())

    if mapped is not None and "csv" in config.formats:
        names = [f"theta{j}" for j in range(psi.target.h_dim)] + \
            [f"x{j}" for j in range(psi.target.x_dim)]
        with open(out / "mapped_nodes.csv", "w") as fh:
            fh.write(",".join(names) + "\n")
            for row in mapped:
                fh.write(",".join(f"{v:.12g}" for v in row) + "\n")

    residuals = [
        _residual_row("eigenvalue_match", eig_gap, 1e-9),
        _residual_row("homomorphism", hom, 1e-9),
        _residual_row("flow_equivariance", flow, 1e-9),
        _residual_row("set_inclusion", worst, tol_incl),
    ]
    body = {
        "command": "conjugate",
        "name": config.name,
        "seed": config.seed,
        "quotient_dim": int(psi.target.x_dim),
        "identity_map": bool(psi.target is system.group),
        "n_sets_upstairs": len(usets),
        "n_sets_downstairs": len(dsets),
        "inclusion_tolerance": tol_incl,
        "residuals": residuals,
        "verdicts": {
            "unique_upstairs": len(usets) == 1,
            "unique_downstairs": len(dsets) == 1,
            "inclusion": residuals[3]["passed"],
        },
    }
    timings = {"total": time.perf_counter() - t0}
    path = _write_report(out, body, timings)
    print(f"quotient dimension {body['quotient_dim']}, "
          f"sets {len(usets)} up / {len(dsets)} down")
    for key, value in body["verdicts"].items():
        print(f"  {key}: {value}")
    print(f"downstairs config: {out / 'downstairs.yaml'}")
    print(f"report: {path}")
    return _exit_code(body)


# -- verify ------------------------------------------------------------------


def cmd_verify(args):
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    report = acceptance_report(seed)
    out = _out_dir(args, "verify")
    path = out / "report.json"
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    all_passed = True
    for rec in report["body"]["checks"]:
        status = "PASS" if rec["passed"] else "FAIL"
        print(f"check {rec['id']} {rec['name']}: {status}")
        all_passed = all_passed and rec["passed"]
    print(f"report: {path}")
    return 0 if all_passed else 3


# -- parser ------------------------------------------------------------------


def _add_config_args(sp, chain=False):
    sp.add_argument("--preset", help="bundled config name")
    sp.add_argument("--config", help="path to a YAML config file")
    sp.add_argument("--out", help="output directory (default out/<command>)")
    sp.add_argument("--seed", type=int, help="override the config seed")
    if chain:
        sp.add_argument("--eps", type=float, help="override chain.eps")
        sp.add_argument("--tau", type=float, help="override chain.tau")
        sp.add_argument("--delta", help="override chain.delta, comma separated")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="chaincontrol",
        description="Chain control sets of linear control systems "
                    "on low-dimensional Lie groups.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("decompose",
                        help="spectral structure of the drift derivation")
    _add_config_args(sp)
    sp.set_defaults(func=cmd_decompose)

    sp = sub.add_parser("simulate", help="integrate one controlled trajectory")
    _add_config_args(sp)
    sp.add_argument("--duration", type=float, default=1.0)
    sp.add_argument("--control", help="constant control, comma separated")
    sp.add_argument("--control-file",
                    help="piecewise control CSV: start_time, values...")
    sp.add_argument("--start", help="initial point, comma separated")
    sp.add_argument("--cross-check", action="store_true",
                    help="compare against the closed level-by-level solve")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("chainset", help="grid approximation of chain "
                                         "control sets")
    _add_config_args(sp, chain=True)
    sp.set_defaults(func=cmd_chainset)

    sp = sub.add_parser("conjugate", help="quotient the run onto its "
                                          "hyperbolic part")
    _add_config_args(sp, chain=True)
    sp.set_defaults(func=cmd_conjugate)

    sp = sub.add_parser("verify", help="run the full acceptance battery")
    sp.add_argument("--out", help="output directory (default out/verify)")
    sp.add_argument("--seed", type=int, help="battery seed")
    sp.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args))
    except ValidationError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return 2
    except TauTooSmallError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
