"""End-to-end verification battery.

Each check exercises one headline property of the package on random data
or on a bundled preset run and returns a json-safe record: a pass flag,
the measured residuals, and the tolerances they were held to.  The battery
is deterministic given the seed, so running it twice must reproduce the
report body byte for byte; acceptance_report does exactly that and appends
the comparison as a final record.
"""

import json
import time

import numpy as np

from . import config as cfg
from .algebra import NilpotentAlgebra, bch_dynkin
from .chains import (
    GridWindow,
    build_chain_graph,
    central_fiber_nodes,
    estimate_source_constants,
    extract_chain_sets,
    level_extents,
    theoretical_bound,
    verify_uniqueness_and_containment,
)
from .errors import NotHyperbolicError
from .group import ConjugationMap
from .lcs import (
    ControlFunction,
    LinearControlSystem,
    cocycle_residual,
    cross_check_residual,
    translation_identity_residual,
)
from .spectral import GradedBlocks, SpectralSplit

DEFAULT_SEED = 20260818

REPORT_SCHEMA = 1


def _run_preset(name, times_override=None):
    """Build system, window, graph, and extracted sets for a bundled preset."""
    c = cfg.preset_config(name)
    system = cfg.build_system(c)
    window = cfg.build_window(c, system)
    times = c.times if times_override is None else times_override
    graph = build_chain_graph(system, window, c.eps, c.tau,
                              control_family=c.family, time_samples=times)
    return c, system, window, graph, extract_chain_sets(graph)


def check_bracket_laws(seed):
    """Bracket axioms and the closed-form group product.

    Antisymmetry and Jacobi are evaluated on the raw structure tensors.
    The product is checked for associativity on random triples and against
    the slow series oracle on random pairs, on both a two-step and a
    three-step graded example.
    """
    rng = np.random.default_rng(seed)
    worst_anti = worst_jacobi = worst_assoc = worst_oracle = 0.0
    n_triples = 100
    n_pairs = 20
    for name in ("heisenberg3", "filiform4"):
        alg = NilpotentAlgebra.from_preset(name)
        c = alg.structure
        worst_anti = max(worst_anti,
                         float(np.max(np.abs(c + c.transpose(1, 0, 2)))))
        t1 = np.einsum("bcl,alm->abcm", c, c)
        t2 = np.einsum("cal,blm->abcm", c, c)
        t3 = np.einsum("abl,clm->abcm", c, c)
        worst_jacobi = max(worst_jacobi, float(np.max(np.abs(t1 + t2 + t3))))
        for _ in range(n_triples):
            x, y, z = rng.uniform(-1.0, 1.0, (3, alg.dim))
            left = alg.bch(alg.bch(x, y), z)
            right = alg.bch(x, alg.bch(y, z))
            worst_assoc = max(worst_assoc, float(np.max(np.abs(left - right))))
        for _ in range(n_pairs):
            x, y = rng.uniform(-1.0, 1.0, (2, alg.dim))
            ref = bch_dynkin(alg.bracket, x, y, max_class=alg.nilpotency_class)
            gap = float(np.max(np.abs(alg.bch(x, y) - ref)))
            worst_oracle = max(worst_oracle, gap)
    tol = {"antisymmetry": 1e-12, "jacobi": 1e-12,
           "associativity": 1e-9, "series_oracle": 1e-10}
    measured = {"antisymmetry": worst_anti, "jacobi": worst_jacobi,
                "associativity": worst_assoc, "series_oracle": worst_oracle,
                "triples_per_algebra": n_triples, "pairs_per_algebra": n_pairs}
    passed = all(measured[k] < tol[k] for k in tol)
    return {"passed": passed, "tolerances": tol, "measured": measured}


def check_graded_triangularity(seed):
    """Filtration shift of ad and triangularity of the product.

    On the three-step filiform example: if the lowest nonzero level of x
    is p then every graded block (i, j) of ad(x) with i < p + j vanishes,
    and the level-i correction of the product x * y (the part beyond
    x_i + y_i) never depends on components at levels >= i.
    """
    rng = np.random.default_rng(seed + 1)
    alg = NilpotentAlgebra.from_preset("filiform5")
    k = alg.nilpotency_class
    worst_block = 0.0
    n_tuples = 100
    for trial in range(n_tuples):
        p = 1 + trial % 3
        xg = np.zeros(alg.dim)
        for level in range(p, k + 1):
            sl = alg.level_slices[level - 1]
            xg[sl] = rng.uniform(-1.0, 1.0, sl.stop - sl.start)
        sl = alg.level_slices[p - 1]
        while np.linalg.norm(xg[sl]) < 0.1:
            xg[sl] = rng.uniform(-1.0, 1.0, sl.stop - sl.start)
        blocks = GradedBlocks(alg, alg.ad(alg.from_graded(xg)))
        for i in range(1, k + 1):
            for j in range(1, k + 1):
                if i < p + j and blocks.block(i, j).size:
                    worst_block = max(
                        worst_block,
                        float(np.max(np.abs(blocks.block(i, j)))))

    worst_product = 0.0
    n_pairs = 100
    for _ in range(n_pairs):
        x, y = rng.uniform(-1.0, 1.0, (2, alg.dim))
        for i in range(1, k + 1):
            base = (alg.component(alg.bch(x, y), i)
                    - alg.component(x, i) - alg.component(y, i))
            pg = np.zeros((2, alg.dim))
            for level in range(i, k + 1):
                sl = alg.level_slices[level - 1]
                pg[:, sl] = rng.uniform(-1.0, 1.0, (2, sl.stop - sl.start))
            x2 = x + alg.from_graded(pg[0])
            y2 = y + alg.from_graded(pg[1])
            moved = (alg.component(alg.bch(x2, y2), i)
                     - alg.component(x2, i) - alg.component(y2, i))
            worst_product = max(worst_product,
                                float(np.max(np.abs(moved - base))))
    tol = {"block_vanishing": 1e-12, "product_triangularity": 1e-12}
    measured = {"block_vanishing": worst_block,
                "product_triangularity": worst_product,
                "shift_tuples": n_tuples, "product_pairs": n_pairs}
    passed = all(measured[k] < tol[k] for k in tol)
    return {"passed": passed, "tolerances": tol, "measured": measured}


def check_flow_identities(seed):
    """Structural identities of the controlled flow.

    The left-translation identity and the cocycle property are integrated
    on the circle-over-plane model for 50 random samples of start points,
    durations, and piecewise controls; points are batched per (t, s,
    control) bucket so the integrations stay cheap.  The closed
    level-by-level solve is cross-checked against integration on the
    expanding graded example.
    """
    rng = np.random.default_rng(seed + 2)
    system = cfg.build_system(cfg.preset_config("rotation-plane"))
    worst_translation = 0.0
    worst_cocycle = 0.0
    n_batches, per_batch = 5, 10
    for _ in range(n_batches):
        t = float(rng.uniform(0.5, 2.0))
        s = float(rng.uniform(0.25, 1.0))
        b1 = float(rng.uniform(0.4, 1.2))
        b2 = float(rng.uniform(1.6, 2.6))
        values = rng.uniform(-1.0, 1.0, (3, per_batch, 1))
        control = ControlFunction([0.0, b1, b2, 3.2], values)
        theta = rng.uniform(0.0, 2.0 * np.pi, (2, per_batch, 1))
        xs = rng.uniform(-1.0, 1.0, (2, per_batch, 2))
        g = np.concatenate([theta[0], xs[0]], axis=1)
        h = np.concatenate([theta[1], xs[1]], axis=1)
        r_t = translation_identity_residual(system, t, h, g, control)
        r_c = cocycle_residual(system, t, s, g, control)
        worst_translation = max(worst_translation, float(np.max(r_t)))
        worst_cocycle = max(worst_cocycle, float(np.max(r_c)))

    hsys = cfg.build_system(cfg.preset_config("heisenberg-expanding"))
    worst_cross = 0.0
    n_cross = 5
    for _ in range(n_cross):
        dur = float(rng.uniform(0.5, 1.5))
        breaks = [0.0, dur / 3.0, 2.0 * dur / 3.0, dur]
        control = ControlFunction(breaks, rng.uniform(-1.0, 1.0, (3, 1)))
        g0 = rng.uniform(-0.5, 0.5, 3)
        worst_cross = max(worst_cross,
                          float(cross_check_residual(hsys, dur, g0, control)))
    tol = {"translation_identity": 1e-6, "cocycle": 1e-6, "cross_check": 1e-6}
    measured = {"translation_identity": worst_translation,
                "cocycle": worst_cocycle, "cross_check": worst_cross,
                "flow_samples": n_batches * per_batch,
                "cross_samples": n_cross}
    passed = all(measured[k] < tol[k] for k in tol)
    return {"passed": passed, "tolerances": tol, "measured": measured}


def check_scalar_line_sets(seed):
    """Scalar stable and unstable runs recover the interval [-1, 1].

    For rates -1 and +1 with unit control box the chain control set is
    exactly [-1, 1]; the graph approximation must return one set whose
    hull matches within eps + 2 delta.
    """
    details = {}
    passed = True
    for name in ("scalar-stable", "scalar-unstable"):
        c, system, window, graph, sets = _run_preset(name)
        tol = c.eps + 2.0 * float(np.max(c.delta))
        ok = len(sets) == 1
        hull = None
        identity = False
        if sets:
            main = max(sets, key=lambda st: st.size)
            centers = window.points[main.nodes][:, system.group.h_dim:]
            hull = [float(centers.min()), float(centers.max())]
            identity = bool(main.contains_identity)
            ok = ok and abs(hull[0] + 1.0) <= tol and abs(hull[1] - 1.0) <= tol
            ok = ok and identity
        details[name] = {"n_sets": len(sets), "hull": hull,
                         "contains_identity": identity, "tolerance": tol}
        passed = passed and ok
    return {"passed": passed,
            "tolerances": {"hull_deviation": "eps + 2 delta"},
            "measured": details}


def check_rotation_fiber_glue(seed):
    """Trivial-drift circle fibers glue into a single chain control set.

    The circle part never moves, so each angle fiber carries its own copy
    of the contracting plane dynamics; the jump slack must glue all fibers
    into exactly one set that contains every central-fiber node.
    """
    c, system, window, graph, sets = _run_preset("rotation-plane")
    fiber = central_fiber_nodes(window)
    covered = 0
    frac = 0.0
    if sets:
        main = max(sets, key=lambda st: st.size)
        inside = np.isin(fiber, main.nodes)
        frac = float(inside.mean())
        theta_idx = window.axis_indices()[main.nodes, 0]
        covered = int(np.unique(theta_idx).size)
    n_angles = int(window.shape[0])
    passed = len(sets) == 1 and frac == 1.0 and covered == n_angles
    measured = {"n_sets": len(sets), "fiber_fraction": frac,
                "angle_cells_covered": covered, "angle_cells": n_angles,
                "fiber_nodes": int(fiber.size)}
    return {"passed": bool(passed),
            "tolerances": {"fiber_fraction": 1.0},
            "measured": measured}


def check_expanding_containment(seed):
    """Fully expanding graded run stays inside the theoretical box.

    The derivation has all eigenvalues positive, so tau-contraction holds
    backward in time; the extracted set must be unique, contain the
    identity cell, keep its per-level extents below the bound, and stay
    off the window boundary.  The run window itself must sit inside the
    bound box inflated by 1.5, so no part of the predicted region is cut.
    """
    c, system, window, graph, sets = _run_preset("heisenberg-expanding")
    consts = estimate_source_constants(system, window, c.tau,
                                       control_family=c.family)
    bound = theoretical_bound(system, c.tau, consts)
    fiber = central_fiber_nodes(window)
    report = verify_uniqueness_and_containment(sets, fiber, bounds=bound)

    corners = np.array([[sx, sy, sz]
                        for sx in (c.x_lower[0], c.x_upper[0])
                        for sy in (c.x_lower[1], c.x_upper[1])
                        for sz in (c.x_lower[2], c.x_upper[2])])
    window_ext = level_extents(system.algebra, corners)
    window_inside = bool(np.all(window_ext <= 1.5 * bound.bounds))

    extents = max(sets, key=lambda st: st.size).extents if sets else None
    measured = {
        "n_sets": len(sets),
        "set_nodes": int(max(sets, key=lambda st: st.size).size) if sets else 0,
        "extents": [float(v) for v in extents] if extents is not None else None,
        "bounds": [float(v) for v in bound.bounds],
        "contraction": [float(v) for v in bound.contraction],
        "source_constants": [float(v) for v in consts],
        "window_extents": [float(v) for v in window_ext],
        "window_inside_inflated_box": window_inside,
        "failures": list(report.failures),
    }
    passed = (report.passed and window_inside
              and bool(np.all(bound.contraction < 1.0)))
    tol = {"contraction": 1.0, "extents": "2 C_i (1 + k/m) / (1 - k e^(-tau m))",
           "window_inflation": 1.5}
    return {"passed": bool(passed), "tolerances": tol, "measured": measured}


def check_quotient_conjugation(seed):
    """Quotient map onto the hyperbolic part conjugates the two runs.

    Upstairs the nilpotent part carries a flow-trivial central circle;
    quotienting it away must reproduce the nonzero-real-part spectrum
    exactly, keep the homomorphism and flow-equivariance residuals at
    rounding level, and map the upstairs chain set into the downstairs
    one within eps plus one cell spacing.
    """
    c = cfg.preset_config("conjugation-upstairs")
    system = cfg.build_system(c)
    window = cfg.build_window(c, system)
    psi = ConjugationMap(system.group, system.derivation)

    full = np.linalg.eigvals(system.derivation)
    nonzero = np.sort_complex(full[np.abs(full.real) > 1e-9])
    hat = np.sort_complex(SpectralSplit(psi.matrix_hat).eigenvalues)
    eig_gap = float(np.max(np.abs(nonzero - hat))) if nonzero.size else 0.0
    hom = float(psi.homomorphism_residual())
    flow = float(psi.flow_equivariance_residual())

    z_hat = c.control_vectors @ psi.w
    down = LinearControlSystem(psi.target, psi.matrix_hat, z_hat,
                               system.range, torus_controls=c.torus_controls)
    dwin = GridWindow(psi.target, c.x_lower, c.x_upper, c.delta,
                      angle_cells=c.angle_cells)

    ugraph = build_chain_graph(system, window, c.eps, c.tau,
                               control_family=c.family, time_samples=c.times)
    usets = extract_chain_sets(ugraph)
    dgraph = build_chain_graph(down, dwin, c.eps, c.tau,
                               control_family=c.family, time_samples=c.times)
    dsets = extract_chain_sets(dgraph)

    spacing = max(float(np.max(c.delta)),
                  2.0 * np.pi / min(c.angle_cells or (1,)))
    tol_incl = c.eps + spacing
    worst = np.inf
    frac = 0.0
    if usets and dsets:
        up_main = max(usets, key=lambda st: st.size)
        down_main = max(dsets, key=lambda st: st.size)
        mapped = psi.apply(window.points[up_main.nodes])
        dpts = dwin.points[down_main.nodes]
        dist = psi.target.distance(mapped[:, None, :], dpts[None, :, :])
        nearest = dist.min(axis=1)
        worst = float(nearest.max())
        frac = float(np.mean(nearest <= tol_incl))
    tol = {"eigenvalue_match": 1e-9, "homomorphism": 1e-9,
           "flow_equivariance": 1e-9, "inclusion": tol_incl,
           "mapped_fraction": 1.0}
    measured = {"eigenvalue_match": eig_gap, "homomorphism": hom,
                "flow_equivariance": flow, "inclusion": worst,
                "mapped_fraction": frac,
                "n_sets_upstairs": len(usets), "n_sets_downstairs": len(dsets),
                "quotient_dim": int(psi.target.x_dim)}
    passed = (eig_gap < 1e-9 and hom < 1e-9 and flow < 1e-9
              and len(usets) == 1 and len(dsets) == 1 and frac == 1.0)
    return {"passed": bool(passed), "tolerances": tol, "measured": measured}


def check_flat_direction_growth(seed):
    """A zero eigenvalue leaks through every window and kills the bound.

    With one flat and one contracting direction the extracted set must be
    unique and touch the window boundary along the flat axis (both ends,
    never the contracting one) at every window width, and the theoretical
    box must refuse to exist.
    """
    details = {}
    passed = True
    for w in (2, 4, 8):
        c, system, window, graph, sets = _run_preset(f"halfstable-w{w}")
        ok = len(sets) == 1
        touch = None
        if sets:
            main = max(sets, key=lambda st: st.size)
            bt = main.boundary_touch
            touch = bt.astype(bool).tolist()
            ok = ok and bool(bt[0, 0]) and bool(bt[0, 1])
            ok = ok and not bool(bt[1].any())
        try:
            theoretical_bound(system, c.tau, [1.0])
            raised = False
            message = ""
        except NotHyperbolicError as exc:
            raised = True
            message = str(exc)
        ok = ok and raised
        details[f"w{w}"] = {"n_sets": len(sets), "boundary_touch": touch,
                            "bound_refused": raised, "message": message}
        passed = passed and ok
    return {"passed": bool(passed),
            "tolerances": {"flat_axis_touch": "both ends, every width"},
            "measured": details}


CHECKS = [
    (1, "bracket-laws-and-product", check_bracket_laws),
    (2, "graded-triangularity", check_graded_triangularity),
    (3, "flow-identities", check_flow_identities),
    (4, "scalar-line-sets", check_scalar_line_sets),
    (5, "rotation-fiber-glue", check_rotation_fiber_glue),
    (6, "expanding-containment", check_expanding_containment),
    (7, "quotient-conjugation", check_quotient_conjugation),
    (8, "flat-direction-growth", check_flat_direction_growth),
]


def run_battery(seed=DEFAULT_SEED):
    """Run checks 1 through 8; returns (records, per-check timings)."""
    records = []
    timings = {}
    for num, name, fn in CHECKS:
        t0 = time.perf_counter()
        rec = fn(seed)
        timings[str(num)] = time.perf_counter() - t0
        rec["id"] = num
        rec["name"] = name
        records.append(rec)
    return records, timings


def canonical_body(records, seed):
    return {"schema": REPORT_SCHEMA, "seed": int(seed), "checks": records}


def encode_body(body):
    """Canonical serialization: sorted keys, no whitespace."""
    return json.dumps(body, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def acceptance_report(seed=DEFAULT_SEED):
    """Full battery run twice; the report carries the determinism record.

    Returns {"body": ..., "timings": ...}; the body is what canonical
    serialization covers, timings stay outside it by design.
    """
    first, t_first = run_battery(seed)
    second, t_second = run_battery(seed)
    b1 = encode_body(canonical_body(first, seed))
    b2 = encode_body(canonical_body(second, seed))
    identical = b1 == b2
    det = {
        "id": 9,
        "name": "deterministic-reports",
        "passed": bool(identical),
        "tolerances": {"byte_difference": 0},
        "measured": {"identical": bool(identical),
                     "body_bytes": len(b1.encode())},
    }
    body = canonical_body(first + [det], seed)
    timings = {"first": t_first, "second": t_second}
    return {"body": body, "timings": timings}
