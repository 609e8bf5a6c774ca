"""Nilpotent Lie algebra arithmetic in a fixed linear basis.

A bracket tensor c with [e_i, e_j] = sum_k c[i, j, k] e_k defines the
algebra.  Everything downstream (graded splitting, group products, flows)
is built from this tensor, so the constructor validates it hard.
"""

import itertools
import math
from fractions import Fraction

import numpy as np

from .errors import NotNilpotentError, ValidationError

MAX_CLASS = 4
MAX_DIM = 8

_RANK_TOL = 1e-10


def bch_dynkin(bracket, x, y, max_class=MAX_CLASS):
    """Baker-Campbell-Hausdorff product summed straight from the Dynkin series.

    Slow reference implementation kept deliberately independent of the
    closed-form product: it enumerates words and right-nested brackets
    with the textbook combinatorial coefficients.  Used as an oracle in
    tests and nowhere else.

    bracket: callable (v, w) -> [v, w] on plain vectors.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    total = x + y  # n = 1 terms (1,0) and (0,1) give x and y outright
    letters = {0: x, 1: y}

    # pairs (r, s) of x/y repetition counts per block, at least one letter
    pairs = [(r, s) for r in range(max_class + 1) for s in range(max_class + 1)
             if 1 <= r + s <= max_class]

    for n in range(1, max_class + 1):
        for combo in itertools.product(pairs, repeat=n):
            degree = sum(r + s for r, s in combo)
            if degree > max_class or degree < 2:
                continue  # degree-1 terms already in `total`
            word = []
            for r, s in combo:
                word.extend([0] * r)
                word.extend([1] * s)
            # right-nested bracket [w1,[w2,[...,[w_{m-1}, w_m]...]]]
            if word[-1] == word[-2]:
                continue  # innermost [a, a] kills the term
            value = letters[word[-1]]
            for letter in reversed(word[:-1]):
                value = bracket(letters[letter], value)
            denom = degree
            for r, s in combo:
                denom *= math.factorial(r) * math.factorial(s)
            coeff = (-1.0) ** (n - 1) / n / denom
            total = total + coeff * value
    return total


def preset_structure(name):
    """Bracket tensor for a named example algebra.

    heisenberg3        [e1,e2] = e3
    abelian:N          zero bracket in dimension N
    filiform4          [e1,e2] = e3, [e1,e3] = e4
    filiform5          filiform4 plus [e1,e4] = e5 (class 4)
    """
    def tensor(dim, relations):
        c = np.zeros((dim, dim, dim))
        for i, j, k in relations:
            c[i, j, k] = 1.0
            c[j, i, k] = -1.0
        return c

    if name == "heisenberg3":
        return tensor(3, [(0, 1, 2)])
    if name.startswith("abelian:"):
        dim = int(name.split(":", 1)[1])
        if not 1 <= dim <= MAX_DIM:
            raise ValidationError(f"abelian preset dim out of range: {dim}")
        return np.zeros((dim, dim, dim))
    if name == "filiform4":
        return tensor(4, [(0, 1, 2), (0, 2, 3)])
    if name == "filiform5":
        return tensor(5, [(0, 1, 2), (0, 2, 3), (0, 3, 4)])
    raise ValidationError(f"unknown algebra preset: {name}")


def _orthonormal_range(columns):
    """Orthonormal basis of the column span, rank decided by singular values."""
    if columns.size == 0:
        return np.zeros((columns.shape[0], 0))
    u, s, _ = np.linalg.svd(columns, full_matrices=False)
    if s.size == 0 or s[0] < _RANK_TOL:
        return np.zeros((columns.shape[0], 0))
    rank = int(np.sum(s > _RANK_TOL * max(1.0, s[0])))
    return u[:, :rank]


def _projector_basis(proj):
    """Canonical orthonormal basis of a projector's range.

    Pivoted QR keeps the output aligned with coordinate axes whenever the
    projector is axis aligned, and the sign convention (largest entry of
    each column positive) makes graded coordinates reproducible.
    """
    from scipy.linalg import qr

    rank = int(round(np.trace(proj)))
    if rank == 0:
        return np.zeros((proj.shape[0], 0))
    q, _, _ = qr(proj, mode="economic", pivoting=True)
    basis = q[:, :rank].copy()
    for j in range(rank):
        col = basis[:, j]
        lead = np.argmax(np.abs(col))
        if col[lead] < 0:
            basis[:, j] = -col
    return basis


class NilpotentAlgebra:
    """Finite-dimensional nilpotent Lie algebra with graded orthogonal split.

    Validates antisymmetry and the Jacobi identity, computes the descending
    central series, and fixes the orthogonal complements V_i of each series
    step.  Coordinates ordered by level (columns of `frame`) make every
    structural map lower block triangular.
    """

    def __init__(self, structure, atol=1e-12):
        c = np.asarray(structure, dtype=float)
        if c.ndim != 3 or len(set(c.shape)) != 1:
            raise ValidationError(f"structure tensor must be (n,n,n), got {c.shape}")
        n = c.shape[0]
        if n > MAX_DIM:
            raise ValidationError(f"dimension {n} exceeds supported maximum {MAX_DIM}")

        anti = np.max(np.abs(c + c.transpose(1, 0, 2))) if n else 0.0
        if anti > atol:
            raise ValidationError(f"bracket not antisymmetric, residual {anti:.3e}")

        # Jacobi: [a,[b,c]] + [b,[c,a]] + [c,[a,b]] = 0 on basis triples
        t1 = np.einsum("bcl,alm->abcm", c, c)
        t2 = np.einsum("cal,blm->abcm", c, c)
        t3 = np.einsum("abl,clm->abcm", c, c)
        jac = np.max(np.abs(t1 + t2 + t3)) if n else 0.0
        if jac > atol:
            raise ValidationError(f"Jacobi identity fails, residual {jac:.3e}")

        self.dim = n
        self.structure = c

        # descending central series: U^1 = g, U^{p+1} = [g, U^p]
        bases = [np.eye(n)]
        for _ in range(MAX_CLASS):
            prev = bases[-1]
            if prev.shape[1] == 0:
                break
            spanned = np.einsum("ijk,jl->kil", c, prev).reshape(n, -1)
            bases.append(_orthonormal_range(spanned))
        if bases[-1].shape[1] != 0:
            raise NotNilpotentError(
                f"series not exhausted within class {MAX_CLASS}")
        while bases[-1].shape[1] == 0 and len(bases) > 1:
            bases.pop()
        self.nilpotency_class = len(bases)
        bases.append(np.zeros((n, 0)))
        self.series_bases = bases  # index p-1 holds U^p, last entry empty

        # V_i = orthogonal complement of U^{i+1} inside U^i
        frames = []
        for i in range(self.nilpotency_class):
            big, sub = bases[i], bases[i + 1]
            proj = big @ big.T - sub @ sub.T
            v = _projector_basis(proj)
            expected = big.shape[1] - sub.shape[1]
            if v.shape[1] != expected:
                raise ValidationError(
                    f"graded component {i + 1} has rank {v.shape[1]}, expected {expected}")
            frames.append(v)
        self.component_frames = frames
        self.component_dims = [v.shape[1] for v in frames]
        frame = np.hstack(frames)
        ortho = np.max(np.abs(frame.T @ frame - np.eye(n))) if n else 0.0
        if ortho > 1e-10:
            raise ValidationError(f"graded frame not orthogonal, residual {ortho:.3e}")
        self.frame = frame  # columns: V_1 then V_2 ... V_k

        starts = np.cumsum([0] + self.component_dims)
        self.level_slices = [slice(int(a), int(b)) for a, b in zip(starts, starts[1:])]
        self.level_of_slot = np.concatenate(
            [np.full(d, i + 1) for i, d in enumerate(self.component_dims)]
        ) if n else np.zeros(0, dtype=int)

        self._translation_coeffs = {}

    @classmethod
    def from_preset(cls, name):
        return cls(preset_structure(name))

    # -- basic operations ------------------------------------------------

    def bracket(self, x, y):
        """[x, y], batched over leading axes."""
        return np.einsum("ijk,...i,...j->...k", self.structure, x, y)

    def ad(self, x):
        """Matrix of ad(x) = [x, .], batched over leading axes of x."""
        return np.einsum("ijk,...i->...kj", self.structure, x)

    def bch(self, x, y):
        """Group product in exponential coordinates, exact through class 4.

        x + y + [x,y]/2 + ([x,[x,y]] - [y,[x,y]])/12 - [y,[x,[x,y]]]/24,
        batched over leading axes with broadcasting.
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        b = self.bracket(x, y)
        out = x + y + 0.5 * b
        if self.nilpotency_class >= 3:
            out = out + (self.bracket(x, b) - self.bracket(y, b)) / 12.0
        if self.nilpotency_class >= 4:
            out = out - self.bracket(y, self.bracket(x, b)) / 24.0
        return out

    def bch_inverse(self, x):
        """Group inverse is plain negation in exponential coordinates."""
        return -np.asarray(x, dtype=float)

    # -- graded structure ------------------------------------------------

    def projector(self, level):
        """Orthogonal projector onto V_level (1-based)."""
        v = self.component_frames[level - 1]
        return v @ v.T

    def component(self, x, level):
        """Component of x in V_level, batched."""
        v = self.component_frames[level - 1]
        return np.einsum("ij,...j->...i", v @ v.T, x)

    def to_graded(self, x):
        """Coordinates of x in the level-ordered orthonormal frame."""
        return np.einsum("ji,...j->...i", self.frame, x)

    def from_graded(self, xg):
        return np.einsum("ij,...j->...i", self.frame, xg)

    def series_projector(self, p):
        """Orthogonal projector onto U^p (1-based); zero map past the class."""
        if p > self.nilpotency_class:
            return np.zeros((self.dim, self.dim))
        b = self.series_bases[p - 1]
        return b @ b.T

    # -- translation derivative coefficients ------------------------------

    def translation_coefficients(self, side="left"):
        """Coefficients a_p with d/dt|0 of the translated curve equal to
        sum_p a_p ad(x)^p w.

        side "left": curve t -> product(x, t w); side "right": t -> product(t w, x).
        Fitted numerically from the group product (central differences plus
        one Richardson step, then least squares over random samples) and
        snapped to small rationals.  Cached per side.
        """
        if side not in ("left", "right"):
            raise ValidationError(f"side must be left or right, got {side!r}")
        if side in self._translation_coeffs:
            return self._translation_coeffs[side]

        k = self.nilpotency_class
        rng = np.random.default_rng(20240801)
        rows = []
        rhs = []
        h = 1e-4
        for _ in range(6 * k + 12):
            x = rng.standard_normal(self.dim)
            w = rng.standard_normal(self.dim)

            def curve(t):
                return self.bch(x, t * w) if side == "left" else self.bch(t * w, x)

            d1 = (curve(h) - curve(-h)) / (2 * h)
            d2 = (curve(h / 2) - curve(-h / 2)) / h
            deriv = (4 * d2 - d1) / 3  # Richardson, O(h^4)

            a = self.ad(x)
            col = w
            block = [col]
            for _ in range(k - 1):
                col = a @ col
                block.append(col)
            rows.append(np.stack(block, axis=1))
            rhs.append(deriv)

        design = np.vstack(rows)
        target = np.concatenate(rhs)
        fit, *_ = np.linalg.lstsq(design, target, rcond=None)

        snapped = np.empty_like(fit)
        for i, value in enumerate(fit):
            frac = Fraction(value).limit_denominator(24)
            if abs(float(frac) - value) > 1e-6:
                raise ValidationError(
                    f"translation coefficient {i} not near a small rational: {value!r}")
            snapped[i] = float(frac)
        self._translation_coeffs[side] = snapped
        return snapped


def quotient_by_central(algebra, kernel):
    """Quotient algebra by a central subspace, with the coordinate map.

    kernel: (n, m) columns spanning a central subspace (all brackets with it
    must vanish).  Returns (quotient NilpotentAlgebra, W) where the columns
    of W are an orthonormal basis of the orthogonal complement; W.T maps
    ambient coordinates to quotient coordinates.
    """
    kernel = np.atleast_2d(np.asarray(kernel, dtype=float))
    if kernel.shape[0] != algebra.dim:
        raise ValidationError("kernel basis has wrong ambient dimension")
    kb = _orthonormal_range(kernel)
    central_residual = np.max(np.abs(
        np.einsum("ijk,jl->ikl", algebra.structure, kb)))
    if central_residual > 1e-10:
        raise ValidationError(
            f"kernel is not central, bracket residual {central_residual:.3e}")
    w = _projector_basis(np.eye(algebra.dim) - kb @ kb.T)
    if w.shape[1] != algebra.dim - kb.shape[1]:
        raise ValidationError("complement extraction lost rank")
    # c'[a,b,k] = <w_k, [w_a, w_b]>; dropping kernel components is the quotient map
    amb = np.einsum("ijk,ia,jb->abk", algebra.structure, w, w)
    c_new = np.einsum("abk,kc->abc", amb, w)
    return NilpotentAlgebra(c_new), w
