"""Controlled dynamics on semidirect-product groups.

A system pairs the drift (a derivation flow on the nilpotent part) with
control fields that are right-invariant extensions of fixed algebra
directions.  The module provides field evaluation, fixed-step integration
with an error estimate, the structural identity residuals (cocycle and the
left-translation property), and the level-by-level closed-form solver for
the nilpotent coordinates.
"""

import itertools
import math

import numpy as np
from scipy.linalg import expm

from .errors import ValidationError
from .group import validate_linear_flow
from .spectral import block_decompose


class ControlRange:
    """Compact box of admissible control values, 0 strictly inside."""

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValidationError("control bounds must be two equal-length vectors")
        if np.any(self.upper <= self.lower):
            raise ValidationError("control range must have positive volume")
        # zero must be an interior point with definite margin
        if np.any(self.lower > -1e-6) or np.any(self.upper < 1e-6):
            raise ValidationError(
                "zero control must lie in the interior of the range")
        self.m = self.lower.size

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    def contains(self, u, tol=1e-9):
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))

    def sample_family(self):
        """Default control-value family: vertices, center, and the points
        halfway from the center to each face barycenter.  Deduplicated and
        lexicographically sorted, so the family is deterministic."""
        c = self.center
        points = [c]
        for corner in itertools.product(*zip(self.lower, self.upper)):
            points.append(np.array(corner))
        for axis in range(self.m):
            for bound in (self.lower[axis], self.upper[axis]):
                p = c.copy()
                p[axis] = 0.5 * (c[axis] + bound)
                points.append(p)
        arr = np.vstack(points)
        return np.unique(np.round(arr, 12), axis=0)


class ControlFunction:
    """Piecewise-constant control: values[i] on [breaks[i], breaks[i+1])."""

    def __init__(self, breaks, values):
        self.breaks = np.asarray(breaks, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        self.values = values
        if self.breaks.ndim != 1 or self.breaks.size < 2:
            raise ValidationError("need at least one control piece")
        if np.any(np.diff(self.breaks) <= 0):
            raise ValidationError("switching times must be strictly increasing")
        if self.values.shape[0] != self.breaks.size - 1:
            raise ValidationError("need one control value per piece")

    @classmethod
    def constant(cls, value, t_begin, t_end):
        return cls([t_begin, t_end], [np.atleast_1d(np.asarray(value, dtype=float))])

    @property
    def t_begin(self):
        return float(self.breaks[0])

    @property
    def t_end(self):
        return float(self.breaks[-1])

    @property
    def m(self):
        return self.values.shape[1]

    def value(self, t):
        if t < self.t_begin - 1e-12 or t > self.t_end + 1e-12:
            raise ValidationError(f"control undefined at time {t}")
        idx = int(np.searchsorted(self.breaks, t, side="right")) - 1
        idx = min(max(idx, 0), self.values.shape[0] - 1)
        return self.values[idx]

    def shift(self, s):
        """Time shift: the returned control at time r equals self at r + s."""
        return ControlFunction(self.breaks - s, self.values)

    def pieces_over(self, a, b):
        """Clip to [a, b]: list of (duration, value) in forward time order."""
        if b <= a:
            raise ValidationError("empty control span requested")
        if a < self.t_begin - 1e-9 or b > self.t_end + 1e-9:
            raise ValidationError(
                f"control undefined on [{a}, {b}] (domain "
                f"[{self.t_begin}, {self.t_end}])")
        pieces = []
        for i in range(self.values.shape[0]):
            lo = max(float(self.breaks[i]), a)
            hi = min(float(self.breaks[i + 1]), b)
            if hi - lo > 1e-12:
                pieces.append((hi - lo, self.values[i]))
        if not pieces:
            pieces.append((b - a, self.value(0.5 * (a + b))))
        return pieces


class Trajectory:
    """Integrated path: times[k] to points[k]; points may carry batch axes."""

    def __init__(self, times, points, control=None, stats=None):
        self.times = np.asarray(times, dtype=float)
        self.points = np.asarray(points, dtype=float)
        self.control = control
        self.stats = stats or {}

    @property
    def endpoint(self):
        return self.points[-1]


class LinearControlSystem:
    """Drift derivation plus right-invariant control fields on H x_rho U.

    control_vectors: (m, n) rows in the nilpotent algebra.
    torus_controls: optional (m, h_dim) rows of compact-part control speeds.
    The drift's compact part must vanish (a translation flow on the torus is
    not by automorphisms), which validate_linear_flow enforces.
    """

    def __init__(self, group, derivation, control_vectors, control_range,
                 torus_controls=None):
        self.group = group
        self.algebra = group.algebra
        self.derivation = np.asarray(derivation, dtype=float)
        self.range = control_range
        m = control_range.m

        z = np.atleast_2d(np.asarray(control_vectors, dtype=float))
        if z.shape != (m, group.x_dim):
            raise ValidationError(
                f"need {m} control vectors of dimension {group.x_dim}")
        self.z = z
        if torus_controls is None:
            yh = np.zeros((m, group.h_dim))
        else:
            yh = np.atleast_2d(np.asarray(torus_controls, dtype=float))
            if yh.shape != (m, group.h_dim):
                raise ValidationError(
                    f"torus control block must be {m} x {group.h_dim}")
        self.torus_vectors = yh

        # the drift flow must be automorphisms compatible with the action
        self.flow_residual = validate_linear_flow(group, self.derivation)
        self.blocks = block_decompose(self.algebra, self.derivation)

        # series coefficients for the right-invariant extension, fixed by
        # differentiating the group product rather than trusting a formula
        self.coefficients = self.algebra.translation_coefficients("right")
        self.gen_stack = (np.stack(group.action.generators)
                          if group.action.generators
                          else np.zeros((0, group.x_dim, group.x_dim)))
        norm_d = float(np.linalg.norm(self.derivation, 2)) if group.x_dim else 0.0
        self.step_limit = 1e-3 / max(1.0, norm_d)

    # -- field -------------------------------------------------------------

    def nilpotent_velocity(self, v, x):
        """Right-invariant series sum_p c_p ad(x)^p v, batched."""
        out = self.coefficients[0] * np.broadcast_to(
            v, np.broadcast_shapes(v.shape, x.shape)).astype(float)
        cur = v
        a = None
        for p in range(1, self.coefficients.size):
            if a is None:
                a = self.algebra.ad(x)
            cur = np.einsum("...ij,...j->...i", a, cur)
            if self.coefficients[p] != 0.0:
                out = out + self.coefficients[p] * cur
        return out

    def field(self, u, g):
        """Full tangent vector at g for control value u; both may batch."""
        u = np.asarray(u, dtype=float)
        g = np.asarray(g, dtype=float)
        h, x = self.group.split(g)
        w = u @ self.torus_vectors
        v = u @ self.z
        xdot = x @ self.derivation.T + self.nilpotent_velocity(v, x)
        if self.gen_stack.shape[0]:
            xdot = xdot + np.einsum("...l,lab,...b->...a", w, self.gen_stack, x)
        lead = np.broadcast_shapes(w.shape[:-1], xdot.shape[:-1])
        return np.concatenate([
            np.broadcast_to(w, lead + (self.group.h_dim,)),
            np.broadcast_to(xdot, lead + (self.group.x_dim,)),
        ], axis=-1)

    def field_eval(self, u, g):
        """Validated single evaluation: u must lie in the control range."""
        if not self.range.contains(u):
            raise ValidationError(f"control value {u} outside the admissible range")
        return self.field(np.atleast_1d(np.asarray(u, dtype=float)), g)


def _rk4_step(system, y, u, h):
    k1 = system.field(u, y)
    k2 = system.field(u, y + (0.5 * h) * k1)
    k3 = system.field(u, y + (0.5 * h) * k2)
    k4 = system.field(u, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(system, duration, g0, control, record=True):
    """Fixed-step 4th order integration over [0, duration].

    duration < 0 integrates backward (the control must cover [duration, 0]).
    Each accepted step is the two-half-step result; the difference to the
    full step, scaled by 1/15, accumulates into the error estimate, which
    must stay below 1e-8 per unit time.
    """
    group = system.group
    g0 = np.asarray(g0, dtype=float)
    if abs(duration) < 1e-15:
        point = group.normalize(g0)
        return Trajectory([0.0], [point], control,
                          {"steps": 0, "error_estimate": 0.0})
    if duration > 0:
        pieces = control.pieces_over(0.0, duration)
        sign = 1.0
    else:
        pieces = list(reversed(control.pieces_over(duration, 0.0)))
        sign = -1.0

    for _, value in pieces:
        if not system.range.contains(value):
            raise ValidationError("control function leaves the admissible range")

    y = group.normalize(g0)
    t = 0.0
    times = [0.0]
    points = [y]
    err = np.zeros(y.shape[:-1])
    steps = 0
    for length, u in pieces:
        n = max(1, math.ceil(length / system.step_limit))
        h = sign * length / n
        for _ in range(n):
            full = _rk4_step(system, y, u, h)
            half = _rk4_step(system, _rk4_step(system, y, u, 0.5 * h), u, 0.5 * h)
            err = err + group.distance(full, half) / 15.0
            y = group.normalize(half)
            t += h
            steps += 1
            if record:
                times.append(t)
                points.append(y)
    if not record:
        times.append(t)
        points.append(y)
    total = float(np.max(err))
    budget = 1e-8 * abs(duration)
    if total > budget:
        raise RuntimeError(
            f"integrator error estimate {total:.3e} exceeds budget {budget:.3e}")
    return Trajectory(times, points, control,
                      {"steps": steps, "error_estimate": total})


def translation_identity_residual(system, t, h_point, g_point, control):
    """Distance between the two sides of the left-translation identity.

    The trajectory from a product h*g equals the trajectory from h,
    right-multiplied by the drift flow of g.  Points may carry batch axes.
    """
    group = system.group
    lhs = integrate(system, t, group.multiply(h_point, g_point), control,
                    record=False).endpoint
    moving = integrate(system, t, h_point, control, record=False).endpoint
    rhs = group.multiply(moving, group.linear_flow(t, g_point, system.derivation))
    return group.distance(lhs, rhs)


def cocycle_residual(system, t, s, g, control):
    """Distance between the full run and the restart after time s."""
    full = integrate(system, t + s, g, control, record=False).endpoint
    mid = integrate(system, s, g, control, record=False).endpoint
    then = integrate(system, t, mid, control.shift(s), record=False).endpoint
    return system.group.distance(full, then)


# -- level-by-level closed solution -----------------------------------------


def level_source(system, level, x, u_val):
    """Source term of the given level: project the nilpotent velocity onto
    the level and subtract the diagonal-block contribution.

    By triangularity this depends only on levels strictly below, which
    triangular_solve asserts numerically on every call.
    """
    alg = system.algebra
    v = np.asarray(u_val, dtype=float) @ system.z
    vel = x @ system.derivation.T + system.nilpotent_velocity(v, x)
    sl = alg.level_slices[level - 1]
    graded_vel = vel @ alg.frame
    graded_x = x @ alg.frame
    b = system.blocks.block(level, level)
    return graded_vel[..., sl] - np.einsum("ij,...j->...i", b, graded_x[..., sl])


def _cumulative_simpson(f, h):
    """Cumulative integral of sampled f on a uniform grid with an even
    number of intervals: composite Simpson at even nodes, the half-panel
     4th-order rule plus shifted Simpson cells at odd nodes."""
    n = f.shape[0] - 1
    out = np.zeros_like(f)
    even = (h / 3.0) * (f[0:-2:2] + 4.0 * f[1:-1:2] + f[2::2])
    out[2::2] = np.cumsum(even, axis=0)
    out[1] = (h / 12.0) * (5.0 * f[0] + 8.0 * f[1] - f[2])
    if n >= 4:
        odd = (h / 3.0) * (f[1:-2:2] + 4.0 * f[2:-1:2] + f[3::2])
        out[3::2] = out[1] + np.cumsum(odd, axis=0)
    return out


def _power_stack(mat, count):
    """[I, M, M^2, ..., M^count] as one array."""
    d = mat.shape[0]
    out = np.empty((count + 1, d, d))
    out[0] = np.eye(d)
    for k in range(1, count + 1):
        out[k] = out[k - 1] @ mat
    return out


class TriangularSolution:
    def __init__(self, t, components, combined, grid_times):
        self.t = t
        self.components = components
        self.combined = combined
        self.grid_times = grid_times


def triangular_solve(system, duration, g0, control):
    """Nilpotent part of the trajectory by variation of constants per level.

    Marches the graded levels from the top: each level is a linear ODE with
    the diagonal block as generator and the already-computed lower levels
    feeding the source, integrated with kernel-weighted composite Simpson.
    Requires pure nilpotent-direction controls (no compact-part components),
    so the compact coordinate is constant and plays no role.
    """
    if np.any(system.torus_vectors != 0.0):
        raise ValidationError(
            "closed-form solve needs controls without compact-part components")
    if duration < 0:
        raise ValidationError("closed-form solve runs forward in time only")
    alg = system.algebra
    group = system.group
    _, x0 = group.split(np.asarray(g0, dtype=float))
    if x0.ndim != 1:
        raise ValidationError("closed-form solve takes a single start point")
    if duration == 0:
        comps = [alg.component(x0, i + 1) for i in range(alg.nilpotency_class)]
        return TriangularSolution(0.0, comps, x0.copy(), np.zeros(1))

    pieces = control.pieces_over(0.0, duration)
    for _, value in pieces:
        if not system.range.contains(value):
            raise ValidationError("control function leaves the admissible range")

    # uniform grid per piece with an even interval count; pieces share
    # boundary nodes, where the trailing piece recomputes its own source
    layout = []
    node_total = 0
    t0 = 0.0
    grid_times = [np.zeros(1)]
    for length, value in pieces:
        n = 2 * max(1, math.ceil(length / (2.0 * system.step_limit)))
        h = length / n
        layout.append((node_total, n, h, value))
        grid_times.append(t0 + h * np.arange(1, n + 1))
        node_total += n
        t0 += length
    grid_times = np.concatenate(grid_times)
    n_nodes = node_total + 1

    xg0 = alg.to_graded(x0)
    ambient = np.zeros((n_nodes, alg.dim))
    components = []
    rng = np.random.default_rng(77)

    for level in range(1, alg.nilpotency_class + 1):
        sl = alg.level_slices[level - 1]
        d = sl.stop - sl.start
        b = system.blocks.block(level, level)
        x_level = np.zeros((n_nodes, d))
        e_start = np.eye(d)
        p_start = np.eye(d)
        i_start = np.zeros(d)
        for start, n, h, value in layout:
            pts = ambient[start:start + n + 1]
            g_nodes = level_source(system, level, pts, value)

            # the source must ignore the levels it is about to produce
            probe = pts[min(n, 1)]
            noise = np.zeros(alg.dim)
            for j in range(level, alg.nilpotency_class + 1):
                frame_j = alg.component_frames[j - 1]
                noise = noise + frame_j @ rng.standard_normal(frame_j.shape[1])
            shifted = level_source(system, level, probe + noise, value)
            base = level_source(system, level, probe, value)
            if np.max(np.abs(shifted - base)) > 1e-10:
                raise ValidationError(
                    f"level {level} source depends on levels >= {level}")

            decay = _power_stack(expm(-h * b), n)
            grow = _power_stack(expm(h * b), n)
            f = np.einsum("kab,kb->ka", decay, g_nodes) @ e_start.T
            integral = _cumulative_simpson(f, h) + i_start
            x_piece = np.einsum(
                "kab,kb->ka", grow, xg0[sl] + integral) @ p_start.T
            x_level[start:start + n + 1] = x_piece
            e_start = e_start @ decay[n]
            p_start = p_start @ grow[n]
            i_start = integral[-1]
        ambient = ambient + x_level @ alg.component_frames[level - 1].T
        components.append(alg.component(ambient[-1], level))

    return TriangularSolution(duration, components, ambient[-1], grid_times)


def cross_check_residual(system, duration, g0, control):
    """Max per-level relative gap between the closed solve and integration."""
    sol = triangular_solve(system, duration, g0, control)
    end = integrate(system, duration, g0, control, record=False).endpoint
    _, x_end = system.group.split(end)
    worst = 0.0
    for level, part in enumerate(sol.components, start=1):
        ref = system.algebra.component(x_end, level)
        gap = float(np.linalg.norm(part - ref))
        worst = max(worst, gap / max(1.0, float(np.linalg.norm(ref))))
    return worst
