import numpy as np
import pytest

from chaincontrol.algebra import NilpotentAlgebra, preset_structure
from chaincontrol.errors import NotAutomorphismError, ValidationError
from chaincontrol.group import RhoAction, SemidirectGroup, TorusGroup
from chaincontrol.lcs import (
    ControlFunction,
    ControlRange,
    LinearControlSystem,
    cocycle_residual,
    cross_check_residual,
    integrate,
    level_source,
    translation_identity_residual,
    triangular_solve,
)

ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


def scalar_system(rate):
    """One-dimensional xdot = rate*x + u with u in [-1, 1]."""
    alg = NilpotentAlgebra(preset_structure("abelian:1"))
    group = SemidirectGroup(TorusGroup(0), alg, RhoAction(alg, []))
    return LinearControlSystem(group, [[rate]], [[1.0]],
                               ControlRange([-1.0], [1.0]))


def heisenberg_system(diag=(1.0, 2.0, 3.0)):
    alg = NilpotentAlgebra(preset_structure("heisenberg3"))
    group = SemidirectGroup(TorusGroup(0), alg, RhoAction(alg, []))
    z = np.array([[1.0, 1.0, 0.0]])
    return LinearControlSystem(group, np.diag(diag), z,
                               ControlRange([-1.0], [1.0]))


def rotation_plane_system():
    """Torus circle acting by rotation on the plane; one control spins the
    circle, the other pushes along the first plane axis."""
    alg = NilpotentAlgebra(preset_structure("abelian:2"))
    group = SemidirectGroup(TorusGroup(1), alg, RhoAction(alg, [ROT]))
    z = np.array([[0.0, 0.0], [1.0, 0.0]])
    yh = np.array([[1.0], [0.0]])
    return LinearControlSystem(group, -np.eye(2), z,
                               ControlRange([-1.0] * 2, [1.0] * 2),
                               torus_controls=yh)


def test_control_range_family_1d():
    family = ControlRange([-1.0], [1.0]).sample_family()
    assert np.allclose(family, [[-1.0], [-0.5], [0.0], [0.5], [1.0]])


def test_control_range_family_2d():
    family = ControlRange([-1.0, -1.0], [1.0, 1.0]).sample_family()
    assert family.shape == (9, 2)
    expected = {(-1, -1), (-1, 1), (1, -1), (1, 1), (0, 0),
                (-0.5, 0), (0.5, 0), (0, -0.5), (0, 0.5)}
    assert {tuple(row) for row in family} == expected


def test_control_range_validation():
    with pytest.raises(ValidationError):
        ControlRange([0.0], [1.0])  # zero on the boundary
    with pytest.raises(ValidationError):
        ControlRange([-1e-9], [1.0])  # margin too small
    with pytest.raises(ValidationError):
        ControlRange([1.0], [-1.0])
    rng = ControlRange([-1.0, -2.0], [1.0, 0.5])
    assert rng.contains([0.5, -1.5])
    assert not rng.contains([0.5, 0.6])


def test_control_function_value_shift_pieces():
    u = ControlFunction([0.0, 1.0, 2.0], [[0.0], [1.0]])
    assert u.value(0.5) == pytest.approx(0.0)
    assert u.value(1.0) == pytest.approx(1.0)  # right-continuous
    assert u.value(2.0) == pytest.approx(1.0)  # closed at the right end
    with pytest.raises(ValidationError):
        u.value(2.5)
    shifted = u.shift(1.0)
    assert shifted.t_begin == pytest.approx(-1.0)
    assert shifted.value(0.0) == pytest.approx(1.0)
    pieces = u.pieces_over(0.5, 1.5)
    assert len(pieces) == 2
    assert pieces[0][0] == pytest.approx(0.5)
    assert np.allclose(pieces[0][1], [0.0])
    assert pieces[1][0] == pytest.approx(0.5)
    with pytest.raises(ValidationError):
        u.pieces_over(-0.5, 1.0)


def test_field_zero_state_gives_control_vector():
    system = heisenberg_system()
    g = np.zeros(3)
    out = system.field_eval([1.0], g)
    assert np.allclose(out, [1.0, 1.0, 0.0], atol=1e-12)


def test_field_abelian_is_affine():
    alg = NilpotentAlgebra(preset_structure("abelian:2"))
    group = SemidirectGroup(TorusGroup(0), alg, RhoAction(alg, []))
    system = LinearControlSystem(group, np.diag([2.0, -1.0]), [[1.0, 3.0]],
                                 ControlRange([-1.0], [1.0]))
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.standard_normal(2)
        u = rng.uniform(-1, 1)
        expected = np.diag([2.0, -1.0]) @ x + u * np.array([1.0, 3.0])
        assert np.allclose(system.field_eval([u], x), expected, atol=1e-12)


def test_field_heisenberg_series_hand_value():
    # value of the invariant extension of e1 at x = e2: e1 plus half e3
    alg = NilpotentAlgebra(preset_structure("heisenberg3"))
    group = SemidirectGroup(TorusGroup(0), alg, RhoAction(alg, []))
    system = LinearControlSystem(group, np.zeros((3, 3)), [[1.0, 0.0, 0.0]],
                                 ControlRange([-1.0], [1.0]))
    out = system.field_eval([1.0], np.array([0.0, 1.0, 0.0]))
    assert np.allclose(out, [1.0, 0.0, 0.5], atol=1e-12)


def test_field_torus_control_drives_plane():
    system = rotation_plane_system()
    g = np.array([0.3, 2.0, 0.0])
    out = system.field_eval([1.0, 0.0], g)
    # circle speed 1; plane feels the drift plus the action generator
    assert out[0] == pytest.approx(1.0)
    assert np.allclose(out[1:], -g[1:] + ROT @ g[1:], atol=1e-12)


def test_field_eval_rejects_outside_range():
    system = scalar_system(1.0)
    with pytest.raises(ValidationError):
        system.field_eval([2.0], np.zeros(1))


def test_scalar_exponential_endpoint():
    system = scalar_system(1.0)
    u = ControlFunction.constant([1.0], 0.0, 1.0)
    out = integrate(system, 1.0, np.zeros(1), u)
    expected = np.e - 1.0
    assert abs(float(out.endpoint[0]) - expected) / expected < 1e-7
    assert out.stats["error_estimate"] < 1e-8


def test_identity_is_equilibrium():
    system = rotation_plane_system()
    u = ControlFunction.constant([0.0, 0.0], 0.0, 2.0)
    out = integrate(system, 2.0, np.zeros(3), u)
    assert system.group.distance(out.endpoint, np.zeros(3)) < 1e-12


def test_zero_control_matches_drift_flow():
    system = rotation_plane_system()
    u = ControlFunction.constant([0.0, 0.0], 0.0, 1.5)
    rng = np.random.default_rng(1)
    for _ in range(5):
        g0 = np.concatenate([rng.uniform(-np.pi, np.pi, 1),
                             rng.standard_normal(2)])
        end = integrate(system, 1.5, g0, u, record=False).endpoint
        ref = system.group.linear_flow(1.5, g0, system.derivation)
        assert system.group.distance(end, ref) < 1e-8


def test_trajectory_records_grid():
    system = scalar_system(-1.0)
    u = ControlFunction([0.0, 0.4, 1.0], [[0.5], [-0.5]])
    out = integrate(system, 1.0, np.zeros(1), u)
    assert out.times[0] == 0.0
    assert out.times[-1] == pytest.approx(1.0)
    assert np.all(np.diff(out.times) > 0)
    assert out.points.shape == (out.times.size, 1)


def test_integrate_rejects_uncovered_span():
    system = scalar_system(1.0)
    u = ControlFunction.constant([1.0], 0.0, 1.0)
    with pytest.raises(ValidationError):
        integrate(system, 2.0, np.zeros(1), u)


def test_integrate_rejects_control_outside_range():
    system = scalar_system(1.0)
    u = ControlFunction.constant([3.0], 0.0, 1.0)
    with pytest.raises(ValidationError):
        integrate(system, 1.0, np.zeros(1), u)


def test_backward_integration_returns_home():
    system = rotation_plane_system()
    u = ControlFunction([0.0, 0.8, 1.5], [[0.4, -0.6], [-0.2, 0.9]])
    g0 = np.array([0.5, 1.0, -0.5])
    forward = integrate(system, 1.5, g0, u, record=False).endpoint
    back = integrate(system, -1.5, forward, u.shift(1.5), record=False).endpoint
    assert system.group.distance(back, g0) < 1e-7


def test_cocycle_residual_small():
    system = rotation_plane_system()
    rng = np.random.default_rng(2)
    breaks = np.array([0.0, 0.7, 1.6, 2.4, 4.0])
    for _ in range(5):
        u = ControlFunction(breaks, rng.uniform(-1, 1, size=(4, 2)))
        g = np.concatenate([rng.uniform(-np.pi, np.pi, 1),
                            rng.standard_normal(2)])
        t, s = rng.uniform(0.2, 1.8, size=2)
        assert cocycle_residual(system, t, s, g, u) < 1e-6


def test_translation_identity_residual_small():
    system = rotation_plane_system()
    rng = np.random.default_rng(3)
    breaks = np.array([0.0, 0.9, 2.0])
    for _ in range(5):
        u = ControlFunction(breaks, rng.uniform(-1, 1, size=(2, 2)))
        h_pt = np.concatenate([rng.uniform(-np.pi, np.pi, 1),
                               rng.standard_normal(2)])
        g_pt = np.concatenate([rng.uniform(-np.pi, np.pi, 1),
                               rng.standard_normal(2)])
        t = rng.uniform(0.2, 2.0)
        assert translation_identity_residual(system, t, h_pt, g_pt, u) < 1e-6


def test_translation_identity_trivial_cases():
    system = rotation_plane_system()
    u = ControlFunction.constant([0.3, -0.4], 0.0, 1.0)
    h_pt = np.array([0.4, 1.0, 2.0])
    e = system.group.identity()
    assert translation_identity_residual(system, 1.0, h_pt, e, u) < 1e-12


def test_translation_identity_batched():
    system = rotation_plane_system()
    u = ControlFunction.constant([0.3, -0.4], 0.0, 1.0)
    rng = np.random.default_rng(4)
    h_pts = np.concatenate([rng.uniform(-np.pi, np.pi, (4, 1)),
                            rng.standard_normal((4, 2))], axis=1)
    g_pts = np.concatenate([rng.uniform(-np.pi, np.pi, (4, 1)),
                            rng.standard_normal((4, 2))], axis=1)
    batch = translation_identity_residual(system, 1.0, h_pts, g_pts, u)
    assert batch.shape == (4,)
    for i in range(4):
        single = translation_identity_residual(system, 1.0, h_pts[i], g_pts[i], u)
        assert abs(batch[i] - single) < 1e-12


def test_triangular_scalar_piecewise_hand_value():
    system = scalar_system(1.0)
    u = ControlFunction([0.0, 0.5, 1.0], [[1.0], [-0.3]])
    sol = triangular_solve(system, 1.0, np.zeros(1), u)
    x_half = (np.exp(0.5) - 1.0) * 1.0
    expected = np.exp(0.5) * x_half + (np.exp(0.5) - 1.0) * (-0.3)
    assert sol.combined[0] == pytest.approx(expected, abs=1e-8)
    assert cross_check_residual(system, 1.0, np.zeros(1), u) < 1e-6


def test_triangular_abelian_classical_formula():
    alg = NilpotentAlgebra(preset_structure("abelian:2"))
    group = SemidirectGroup(TorusGroup(0), alg, RhoAction(alg, []))
    d = np.array([[0.5, 0.0], [1.0, -1.0]])
    system = LinearControlSystem(group, d, [[1.0, 0.5]],
                                 ControlRange([-1.0], [1.0]))
    u = ControlFunction([0.0, 0.6, 1.3], [[0.8], [-0.5]])
    x0 = np.array([0.3, -0.2])
    sol = triangular_solve(system, 1.3, x0, u)
    end = integrate(system, 1.3, x0, u, record=False).endpoint
    assert np.allclose(sol.combined, end, atol=1e-7)


def test_triangular_heisenberg_matches_integrate():
    system = heisenberg_system()
    rng = np.random.default_rng(5)
    for _ in range(3):
        breaks = np.concatenate([[0.0], np.sort(rng.uniform(0.2, 1.6, 2)), [1.7]])
        u = ControlFunction(breaks, rng.uniform(-1, 1, size=(3, 1)))
        x0 = 0.5 * rng.standard_normal(3)
        assert cross_check_residual(system, 1.7, x0, u) < 1e-6


def test_triangular_zero_control_zero_start():
    system = heisenberg_system()
    u = ControlFunction.constant([0.0], 0.0, 2.0)
    sol = triangular_solve(system, 2.0, np.zeros(3), u)
    assert np.all(sol.combined == 0.0)
    for part in sol.components:
        assert np.all(part == 0.0)


def test_triangular_rejects_torus_controls():
    system = rotation_plane_system()
    u = ControlFunction.constant([0.2, 0.2], 0.0, 1.0)
    with pytest.raises(ValidationError):
        triangular_solve(system, 1.0, np.zeros(3), u)


def test_level_source_independence():
    system = heisenberg_system()
    alg = system.algebra
    rng = np.random.default_rng(6)
    for level in (1, 2):
        for _ in range(10):
            x = rng.standard_normal(3)
            noise = np.zeros(3)
            for j in range(level, alg.nilpotency_class + 1):
                frame = alg.component_frames[j - 1]
                noise = noise + frame @ rng.standard_normal(frame.shape[1])
            base = level_source(system, level, x, [0.7])
            shifted = level_source(system, level, x + noise, [0.7])
            assert np.max(np.abs(shifted - base)) < 1e-10


def test_continuity_in_control():
    system = scalar_system(-1.0)
    base = ControlFunction.constant([0.2], 0.0, 2.0)
    ref = integrate(system, 2.0, np.zeros(1), base, record=False).endpoint
    deltas = [0.2, 0.1, 0.05, 0.025]
    gaps = []
    for delta in deltas:
        u = ControlFunction([0.0, 1.0, 1.0 + delta, 2.0],
                            [[0.2], [1.0], [0.2]])
        end = integrate(system, 2.0, np.zeros(1), u, record=False).endpoint
        gaps.append(abs(float(end[0] - ref[0])))
    rate = gaps[0] / deltas[0]
    for delta, gap in zip(deltas, gaps):
        assert gap <= rate * delta * 1.05
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


def test_system_rejects_torus_drift():
    alg = NilpotentAlgebra(preset_structure("abelian:2"))
    group = SemidirectGroup(TorusGroup(1, speeds=(1.0,)), alg,
                            RhoAction(alg, [ROT]))
    with pytest.raises(NotAutomorphismError):
        LinearControlSystem(group, -np.eye(2), [[1.0, 0.0]],
                            ControlRange([-1.0], [1.0]))
