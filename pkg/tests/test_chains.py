import json

import numpy as np
import pytest

from chaincontrol.algebra import NilpotentAlgebra, preset_structure
from chaincontrol.chains import (
    ChainControlSetApprox,
    GridWindow,
    audit_edges,
    build_chain_graph,
    central_fiber_nodes,
    estimate_source_constants,
    extract_chain_sets,
    jump_and_tube_sets,
    level_extents,
    strongly_connected_components,
    theoretical_bound,
    verify_uniqueness_and_containment,
    write_edges_csv,
    write_nodes_csv,
    write_plot_slice,
    write_sets_jsonl,
)
from chaincontrol.errors import (
    NotHyperbolicError,
    TauTooSmallError,
    ValidationError,
)
from chaincontrol.group import RhoAction, SemidirectGroup, TorusGroup
from chaincontrol.lcs import ControlRange, LinearControlSystem

ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


def scalar_system(rate):
    alg = NilpotentAlgebra(preset_structure("abelian:1"))
    group = SemidirectGroup(TorusGroup(0), alg, RhoAction(alg, []))
    return LinearControlSystem(group, [[rate]], [[1.0]],
                               ControlRange([-1.0], [1.0]))


def scalar_window(system, half=2.0, delta=0.05):
    return GridWindow(system.group, [-half], [half], [delta])


# Sampled durations used by the scalar reference runs.  The lower sample
# must stay in (1.263, 1.391): below that fringe cells of the contracting
# case keep a self-loop, above it the expanding case loses the bridge onto
# its outermost cells.
SCALAR_TIMES = [1.35, 2.0]


@pytest.fixture(scope="module")
def stable_setup():
    system = scalar_system(-1.0)
    window = scalar_window(system)
    graph = build_chain_graph(system, window, eps=0.1, tau=1.0,
                              time_samples=SCALAR_TIMES)
    return system, window, graph


@pytest.fixture(scope="module")
def unstable_setup():
    system = scalar_system(1.0)
    window = scalar_window(system)
    graph = build_chain_graph(system, window, eps=0.1, tau=1.0,
                              time_samples=SCALAR_TIMES)
    return system, window, graph


# -- grid window -------------------------------------------------------------


def test_grid_window_centers():
    system = scalar_system(-1.0)
    window = scalar_window(system)
    assert window.n_nodes == 80
    pts = window.points[:, 0]
    assert pts[0] == pytest.approx(-1.975)
    assert pts[-1] == pytest.approx(1.975)
    assert np.allclose(np.diff(pts), 0.05)
    # half diameter of a 1d cell is half the spacing, plus the safety pad
    assert window.half_diameter == pytest.approx(0.0255, abs=1e-9)


def test_grid_window_validation():
    system = scalar_system(-1.0)
    group = system.group
    with pytest.raises(ValidationError):
        GridWindow(group, [-1.0], [1.0], [0.3])  # cells do not tile the span
    with pytest.raises(ValidationError):
        GridWindow(group, [-1.0], [1.0], [-0.1])
    with pytest.raises(ValidationError):
        GridWindow(group, [1.0], [1.0], [0.1])  # empty extent
    with pytest.raises(ValidationError):
        GridWindow(group, [-1.0], [1.0], [0.1], angle_cells=(8,))


def test_grid_window_from_bounds():
    system = scalar_system(-1.0)
    window = GridWindow.from_bounds(system.group, [1.0], [0.25])
    # factor 1.5 on a unit bound, ceil to whole cells
    assert window.x_lower[0] == pytest.approx(-1.5)
    assert window.x_upper[0] == pytest.approx(1.5)
    with pytest.raises(ValidationError):
        GridWindow.from_bounds(system.group, [1.0], [0.25], factor=1.0)
    with pytest.raises(ValidationError):
        GridWindow.from_bounds(system.group, [np.inf], [0.25])


def test_grid_window_boundary_layer():
    system = scalar_system(-1.0)
    window = scalar_window(system)
    layer = window.boundary_layer()
    assert layer.shape == (80, 1, 2)
    assert layer[0, 0, 0] and not layer[0, 0, 1]
    assert layer[-1, 0, 1] and not layer[-1, 0, 0]
    assert not layer[1:-1].any()


def test_identity_and_fiber_cells_scalar():
    system = scalar_system(-1.0)
    window = scalar_window(system)
    ids = window.identity_cells()
    # centers at +-0.025 straddle the origin, both within half a cell
    assert list(window.points[ids, 0]) == pytest.approx([-0.025, 0.025])
    assert np.array_equal(central_fiber_nodes(window), ids)


def test_central_fiber_nodes_torus():
    alg = NilpotentAlgebra(preset_structure("abelian:2"))
    group = SemidirectGroup(TorusGroup(1), alg, RhoAction(alg, [ROT]))
    window = GridWindow(group, [-1.0, -1.0], [1.0, 1.0], [0.5, 0.5],
                        angle_cells=(8,))
    fiber = central_fiber_nodes(window)
    # four x-cells tie for the minimal norm in each of the 8 angle cells
    assert fiber.size == 32
    theta_idx = window.axis_indices(fiber)[:, 0]
    assert set(theta_idx.tolist()) == set(range(8))
    x = window.points[fiber][:, 1:]
    assert np.allclose(np.abs(x), 0.25)


def test_embedding_factor_at_least_one():
    alg = NilpotentAlgebra(preset_structure("abelian:2"))
    group = SemidirectGroup(TorusGroup(1), alg, RhoAction(alg, [ROT]))
    window = GridWindow(group, [-1.0, -1.0], [1.0, 1.0], [0.5, 0.5],
                        angle_cells=(8,))
    assert window.embedding_factor(0.3) >= 1.0
    # chord through the embedding underestimates arc length, so the factor
    # must actually exceed 1 once angles are involved
    assert window.embedding_factor(1.5) > 1.0


# -- graph construction ------------------------------------------------------


def test_graph_shape_and_witnesses(stable_setup):
    _, window, graph = stable_setup
    assert graph.n_nodes == 80
    assert graph.n_edges > 0
    assert graph.src.shape == graph.dst.shape
    assert np.all(graph.witness_u >= 0)
    assert np.all(graph.witness_u < len(graph.control_family))
    assert np.all(graph.witness_t >= 0)
    assert np.all(graph.witness_t < len(graph.snapshot_steps))
    # snapped durations stay inside [tau, 2 tau]
    assert np.all(graph.time_samples >= graph.tau - 1e-9)
    assert np.all(graph.time_samples <= 2 * graph.tau + 1e-9)
    pairs = graph.edge_pairs()
    assert len(np.unique(pairs, axis=0)) == len(pairs)


def test_graph_validation():
    system = scalar_system(-1.0)
    window = scalar_window(system)
    with pytest.raises(ValidationError):
        build_chain_graph(system, window, eps=0.0, tau=1.0)
    with pytest.raises(ValidationError):
        build_chain_graph(system, window, eps=0.1, tau=-1.0)
    with pytest.raises(ValidationError):
        build_chain_graph(system, window, eps=0.1, tau=1.0,
                          control_family=[[2.0]])
    with pytest.raises(ValidationError):
        build_chain_graph(system, window, eps=0.1, tau=1.0,
                          time_samples=[0.5])
    with pytest.raises(ValidationError):
        build_chain_graph(system, window, eps=0.1, tau=1.0,
                          time_samples=[2.5])
    other = scalar_system(1.0)
    with pytest.raises(ValidationError):
        build_chain_graph(other, window, eps=0.1, tau=1.0)


def test_graph_determinism(stable_setup):
    system, window, graph = stable_setup
    again = build_chain_graph(system, window, eps=0.1, tau=1.0,
                              time_samples=SCALAR_TIMES)
    assert np.array_equal(graph.src, again.src)
    assert np.array_equal(graph.dst, again.dst)
    assert np.array_equal(graph.witness_u, again.witness_u)
    assert np.array_equal(graph.witness_t, again.witness_t)


def test_edge_monotone_in_controls_and_times():
    system = scalar_system(-1.0)
    window = GridWindow(system.group, [-1.0], [1.0], [0.1])
    base = build_chain_graph(system, window, eps=0.1, tau=1.0,
                             control_family=[[-1.0], [0.0], [1.0]],
                             time_samples=[1.35])
    more_u = build_chain_graph(system, window, eps=0.1, tau=1.0,
                               time_samples=[1.35])
    more_t = build_chain_graph(system, window, eps=0.1, tau=1.0,
                               control_family=[[-1.0], [0.0], [1.0]],
                               time_samples=SCALAR_TIMES)
    pairs = {tuple(p) for p in base.edge_pairs().tolist()}
    assert pairs <= {tuple(p) for p in more_u.edge_pairs().tolist()}
    assert pairs <= {tuple(p) for p in more_t.edge_pairs().tolist()}


def test_truncation_empties_graph():
    # expanding dynamics on a window strictly right of the equilibria:
    # every run exits the inflated window before the first snapshot
    system = scalar_system(1.0)
    window = GridWindow(system.group, [3.0], [5.0], [0.1])
    graph = build_chain_graph(system, window, eps=0.1, tau=2.0,
                              control_family=[[0.0]])
    assert graph.n_edges == 0
    assert graph.truncated.all()
    assert extract_chain_sets(graph) == []


# -- chain control set extraction -------------------------------------------


def test_scalar_stable_reference_set(stable_setup):
    _, window, graph = stable_setup
    sets = extract_chain_sets(graph)
    assert len(sets) == 1
    s = sets[0]
    pts = window.points[s.nodes, 0]
    assert pts.min() == pytest.approx(-1.125)
    assert pts.max() == pytest.approx(1.125)
    assert s.contains_identity and s.contains_central_fiber
    assert not s.touches_boundary
    assert s.internal_edges > 0
    # hull endpoints approximate the exact region [-1, 1] within eps + 2 delta
    assert abs(pts.min() + 1.0) <= 0.2
    assert abs(pts.max() - 1.0) <= 0.2


def test_scalar_unstable_reference_set(unstable_setup):
    _, window, graph = unstable_setup
    sets = extract_chain_sets(graph)
    assert len(sets) == 1
    s = sets[0]
    pts = window.points[s.nodes, 0]
    assert pts.min() == pytest.approx(-1.025)
    assert pts.max() == pytest.approx(1.025)
    assert s.contains_identity
    assert not s.touches_boundary


def test_scc_partition(stable_setup):
    _, _, graph = stable_setup
    comps = strongly_connected_components(graph)
    all_nodes = np.concatenate(comps)
    assert len(all_nodes) == graph.n_nodes
    assert len(np.unique(all_nodes)) == graph.n_nodes
    # relabeled by smallest member, so starts are strictly increasing
    starts = [int(c[0]) for c in comps]
    assert starts == sorted(starts)


def test_zero_control_collapses_to_origin_cluster():
    # with u = 0 only, the contraction leaves nothing but a cluster of
    # cells around the identity
    system = scalar_system(-1.0)
    window = scalar_window(system)
    graph = build_chain_graph(system, window, eps=0.1, tau=1.0,
                              control_family=[[0.0]],
                              time_samples=SCALAR_TIMES)
    sets = extract_chain_sets(graph)
    assert len(sets) == 1
    s = sets[0]
    assert s.contains_identity
    assert np.max(np.abs(window.points[s.nodes, 0])) < 0.2


def test_eps_shrink_nests_sets(stable_setup):
    system, window, graph = stable_setup
    tight = build_chain_graph(system, window, eps=0.05, tau=1.0,
                              time_samples=SCALAR_TIMES)
    wide_sets = extract_chain_sets(graph)
    tight_sets = extract_chain_sets(tight)
    assert wide_sets and tight_sets
    wide_main = max(wide_sets, key=lambda s: s.size)
    tight_main = max(tight_sets, key=lambda s: s.size)
    assert tight_main.contains_identity
    assert set(tight_main.nodes.tolist()) <= set(wide_main.nodes.tolist())


def test_full_torus_fiber_single_set():
    # free spinning on the circle with a contracting line attached: the
    # unique chain control set covers every angle cell
    alg = NilpotentAlgebra(preset_structure("abelian:1"))
    group = SemidirectGroup(TorusGroup(1), alg, RhoAction(alg, [np.zeros((1, 1))]))
    system = LinearControlSystem(group, [[-1.0]], [[0.0]],
                                 ControlRange([-1.0], [1.0]),
                                 torus_controls=[[1.0]])
    window = GridWindow(group, [-0.5], [0.5], [0.25], angle_cells=(16,))
    graph = build_chain_graph(system, window, eps=0.3, tau=1.0)
    sets = extract_chain_sets(graph)
    assert len(sets) == 1
    s = sets[0]
    assert s.contains_central_fiber
    theta = window.axis_indices(s.nodes)[:, 0]
    assert set(theta.tolist()) == set(range(16))


def test_rotation_plane_small_window():
    alg = NilpotentAlgebra(preset_structure("abelian:2"))
    group = SemidirectGroup(TorusGroup(1), alg, RhoAction(alg, [ROT]))
    z = np.array([[0.0, 0.0], [1.0, 0.0]])
    system = LinearControlSystem(group, -np.eye(2), z,
                                 ControlRange([-1.0] * 2, [1.0] * 2),
                                 torus_controls=np.array([[1.0], [0.0]]))
    window = GridWindow(group, [-1.0, -1.0], [1.0, 1.0], [0.5, 0.5],
                        angle_cells=(16,))
    graph = build_chain_graph(system, window, eps=0.1, tau=1.0)
    sets = extract_chain_sets(graph)
    assert len(sets) == 1
    s = sets[0]
    # coarse cells make the acceptance radius fat, so the set fills the
    # small window; this checks connectivity across the fibers only
    assert s.contains_central_fiber
    theta = window.axis_indices(s.nodes)[:, 0]
    assert set(theta.tolist()) == set(range(16))


def test_level_extents_heisenberg():
    alg = NilpotentAlgebra(preset_structure("heisenberg3"))
    x = np.array([[0.3, -0.4, 0.0], [0.0, 0.0, 0.7]])
    ext = level_extents(alg, x)
    graded = x @ alg.frame
    s1, s2 = alg.level_slices
    assert ext[0] == pytest.approx(np.max(np.linalg.norm(graded[:, s1], axis=1)))
    assert ext[1] == pytest.approx(np.max(np.linalg.norm(graded[:, s2], axis=1)))
    masked = level_extents(alg, x, x_mask=np.array([False, False, True]))
    assert masked[0] == pytest.approx(ext[0])


def test_level_extents_empty():
    alg = NilpotentAlgebra(preset_structure("heisenberg3"))
    ext = level_extents(alg, np.zeros((0, 3)))
    assert ext.shape == (2,)
    assert np.all(ext == 0.0)


# -- bounds ------------------------------------------------------------------


def test_theoretical_bound_scalar_frozen():
    system = scalar_system(-1.0)
    lb = theoretical_bound(system, 1.0, [1.0])
    assert lb.kappa[0] == pytest.approx(1.0)
    assert lb.mu[0] == pytest.approx(0.9)
    assert lb.contraction[0] == pytest.approx(np.exp(-0.9))
    # 2 * 1 * (1 + 1/0.9) / (1 - e^{-0.9})
    assert lb.bounds[0] == pytest.approx(7.11497, abs=1e-4)


def test_theoretical_bound_tau_monotone():
    system = scalar_system(-1.0)
    taus = [0.5, 1.0, 2.0, 4.0, 8.0]
    vals = [theoretical_bound(system, t, [1.0]).bounds[0] for t in taus]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    # large tau limit: 2 C (1 + kappa/mu)
    assert vals[-1] == pytest.approx(2 * (1 + 1 / 0.9), rel=1e-3)


def test_theoretical_bound_heisenberg_levels():
    alg = NilpotentAlgebra(preset_structure("heisenberg3"))
    group = SemidirectGroup(TorusGroup(0), alg, RhoAction(alg, []))
    system = LinearControlSystem(group, np.diag([1.0, 2.0, 3.0]),
                                 [[1.0, 1.0, 0.0]],
                                 ControlRange([-1.0], [1.0]))
    lb = theoretical_bound(system, 1.0, [1.0, 1.0])
    assert lb.bounds.shape == (2,)
    assert np.all(lb.contraction < 1.0)
    assert np.all(lb.bounds > 0.0)


def test_theoretical_bound_tau_too_small():
    alg = NilpotentAlgebra(preset_structure("abelian:2"))
    group = SemidirectGroup(TorusGroup(0), alg, RhoAction(alg, []))
    system = LinearControlSystem(group, [[1.0, 4.0], [0.0, 1.2]],
                                 np.eye(2), ControlRange([-1.0] * 2, [1.0] * 2))
    with pytest.raises(TauTooSmallError):
        theoretical_bound(system, 0.01, [1.0])
    # a long enough dwell restores the contraction
    lb = theoretical_bound(system, 10.0, [1.0])
    assert lb.contraction[0] < 1.0


def test_theoretical_bound_not_hyperbolic():
    alg = NilpotentAlgebra(preset_structure("abelian:2"))
    group = SemidirectGroup(TorusGroup(0), alg, RhoAction(alg, []))
    system = LinearControlSystem(group, np.diag([0.0, -1.0]),
                                 np.eye(2), ControlRange([-1.0] * 2, [1.0] * 2))
    with pytest.raises(NotHyperbolicError):
        theoretical_bound(system, 1.0, [1.0])


def test_theoretical_bound_validation():
    system = scalar_system(-1.0)
    with pytest.raises(ValidationError):
        theoretical_bound(system, -1.0, [1.0])
    with pytest.raises(ValidationError):
        theoretical_bound(system, 1.0, [1.0, 2.0])
    with pytest.raises(ValidationError):
        theoretical_bound(system, 1.0, [-1.0])


def test_estimate_source_constants_scalar(stable_setup):
    system, window, _ = stable_setup
    c = estimate_source_constants(system, window, 1.0)
    assert c.shape == (1,)
    # source term is exactly u, sup |u| = 1 over the family, plus the
    # trivial jump factor 1
    assert c[0] == pytest.approx(2.0, abs=1e-6)
    lb = theoretical_bound(system, 1.0, c)
    assert lb.bounds[0] == pytest.approx(14.2299, abs=1e-3)


# -- verification report -----------------------------------------------------


def _fake_set(nodes, extents, touch=False, identity=True):
    n_free = 1
    bt = np.zeros((n_free, 2), dtype=bool)
    if touch:
        bt[0, 1] = True
    return ChainControlSetApprox(
        nodes=np.asarray(nodes, dtype=np.int64), internal_edges=len(nodes),
        extents=np.asarray(extents, dtype=float), contains_identity=identity,
        contains_central_fiber=identity, boundary_touch=bt, component_count=1)


def test_verify_report_passes():
    s = _fake_set([3, 4, 5], [0.5])
    rep = verify_uniqueness_and_containment([s], [4], bounds=[1.0])
    assert rep.passed
    assert rep.unique and rep.fiber_contained and rep.extents_ok
    assert not rep.boundary_touched
    assert rep.failures == []


def test_verify_report_itemizes_failures():
    a = _fake_set([0, 1, 2], [2.0], touch=True)
    b = _fake_set([10], [0.1])
    rep = verify_uniqueness_and_containment([a, b], [5], bounds=[1.0])
    assert not rep.passed
    assert rep.n_sets == 2
    assert not rep.unique
    assert rep.missing_fiber_nodes == 1
    assert not rep.extents_ok
    assert rep.boundary_touched
    assert len(rep.failures) == 4


def test_verify_report_no_sets():
    rep = verify_uniqueness_and_containment([], [0], bounds=None)
    assert not rep.passed
    assert rep.n_sets == 0 and not rep.unique


# -- audit, jump and tube ----------------------------------------------------


def test_audit_edges_clean(stable_setup):
    system, _, graph = stable_setup
    report = audit_edges(system, graph, fraction=0.05, seed=99)
    assert report["checked"] > 0
    assert report["failures"] == 0
    assert report["worst_excess"] <= 1e-6


def test_jump_and_tube_scalar(stable_setup):
    system, window, graph = stable_setup
    s = extract_chain_sets(graph)[0]
    jt = jump_and_tube_sets(system, graph, s)
    # jump set extends the node set by at most the landing spread
    assert set(s.nodes.tolist()) <= set(jt.jump_nodes.tolist())
    assert jt.jump_extents[0] >= window.points[s.nodes, 0].max() - 1e-9
    # the tube starts on the jump nodes, so it can only be wider
    assert jt.tube_extents[0] >= jt.jump_extents[0] - 1e-9
    assert jt.tube_samples > 0
    # contraction plus unit controls keep everything inside |x| <= 2.3
    assert jt.tube_extents[0] <= 2.3


# -- writers -----------------------------------------------------------------


def test_writers_roundtrip(tmp_path, stable_setup):
    system, window, graph = stable_setup
    sets = extract_chain_sets(graph)
    lb = theoretical_bound(system, 1.0,
                           estimate_source_constants(system, window, 1.0))

    nodes_path = tmp_path / "nodes.csv"
    write_nodes_csv(nodes_path, graph, sets)
    lines = nodes_path.read_text().strip().splitlines()
    assert len(lines) == graph.n_nodes + 1
    assert lines[0].startswith("node,")

    edges_path = tmp_path / "edges.csv"
    write_edges_csv(edges_path, graph)
    lines = edges_path.read_text().strip().splitlines()
    assert len(lines) == graph.n_edges + 1

    sets_path = tmp_path / "sets.jsonl"
    write_sets_jsonl(sets_path, sets, bounds=lb)
    recs = [json.loads(l) for l in sets_path.read_text().splitlines()]
    assert len(recs) == 1
    assert recs[0]["contains_identity"] is True
    assert recs[0]["within_bounds"] is True

    plot_path = tmp_path / "slice.csv"
    with pytest.raises(ValidationError):
        write_plot_slice(plot_path, graph, sets[0])
