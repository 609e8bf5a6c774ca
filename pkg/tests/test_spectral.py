import numpy as np
import pytest

from chaincontrol.algebra import NilpotentAlgebra
from chaincontrol.errors import (
    NotDerivationError,
    SeriesNotPreservedError,
    ValidationError,
)
from chaincontrol.spectral import (
    SpectralSplit,
    ad_chain_blocks,
    block_decompose,
    check_derivation,
    check_series_preservation,
    check_subalgebra_closure,
    decay_constants,
    quotient_derivation,
    validate_derivation_split,
)


def heis():
    return NilpotentAlgebra.from_preset("heisenberg3")


def test_diagonal_derivation_accepted():
    # weights add along the bracket: [e1,e2] = e3 forces w3 = w1 + w2
    assert check_derivation(heis(), np.diag([1.0, 2.0, 3.0])) < 1e-14


def test_identity_is_not_a_derivation_on_heisenberg():
    with pytest.raises(NotDerivationError):
        check_derivation(heis(), np.eye(3))


def test_general_heisenberg_derivation_shape():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b, c, d, e, f = rng.standard_normal(6)
        mat = np.array([[a, b, 0.0], [c, d, 0.0], [e, f, a + d]])
        assert check_derivation(heis(), mat) < 1e-12
        assert check_series_preservation(heis(), mat) < 1e-12


def test_series_preservation_rejects_upward_map():
    mat = np.zeros((3, 3))
    mat[0, 2] = 1.0  # sends the center back to level one
    with pytest.raises(SeriesNotPreservedError):
        check_series_preservation(heis(), mat)


def test_spectral_split_diagonal():
    split = SpectralSplit(np.diag([-2.0, 3.0, 0.0]))
    assert split.dims == (1, 1, 1)
    assert np.allclose(split.pi_stable, np.diag([1.0, 0.0, 0.0]), atol=1e-12)
    assert np.allclose(split.pi_center, np.diag([0.0, 0.0, 1.0]), atol=1e-12)
    assert np.allclose(split.pi_unstable, np.diag([0.0, 1.0, 0.0]), atol=1e-12)


def test_spectral_split_oblique_projection_hand_value():
    # eigenvectors e1 (lambda=-1) and (5,3) (lambda=2); the unstable
    # projection along e1 is [[0, 5/3], [0, 1]]
    split = SpectralSplit(np.array([[-1.0, 5.0], [0.0, 2.0]]))
    assert split.dims == (1, 0, 1)
    assert np.allclose(split.pi_unstable, [[0.0, 5.0 / 3.0], [0.0, 1.0]], atol=1e-10)
    assert np.allclose(split.pi_stable + split.pi_unstable, np.eye(2), atol=1e-10)


def test_spectral_split_rotation_is_center():
    split = SpectralSplit(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    assert split.dims == (0, 2, 0)


def test_spectral_split_random_consistency():
    rng = np.random.default_rng(23)
    for _ in range(20):
        d = rng.standard_normal((5, 5))
        split = SpectralSplit(d, tol=1e-8)
        total = split.pi_stable + split.pi_center + split.pi_unstable
        assert np.allclose(total, np.eye(5), atol=1e-8)
        # image of each projection is invariant and carries the right spectrum
        for pi, sgn in ((split.pi_stable, -1), (split.pi_unstable, 1)):
            sub = pi @ d @ pi
            eigs = np.linalg.eigvals(sub)
            live = eigs[np.abs(eigs) > 1e-7]
            assert np.all(sgn * live.real > 0)


def test_validate_derivation_split_filiform():
    alg = NilpotentAlgebra.from_preset("filiform4")
    d = np.diag([-1.0, 1.0, 0.0, -1.0])
    assert check_derivation(alg, d) < 1e-14
    validate_derivation_split(alg, SpectralSplit(d))


def test_subalgebra_closure_rejects_open_span():
    basis = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])  # span(e1, e2)
    with pytest.raises(ValidationError):
        check_subalgebra_closure(heis(), basis)


def test_block_decompose_lower_triangular():
    alg = NilpotentAlgebra.from_preset("filiform4")
    d = np.array([
        [-1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, -1.0],
    ])
    assert check_derivation(alg, d) < 1e-14
    blocks = block_decompose(alg, d)
    assert blocks.upper_residual() == 0.0
    assert np.allclose(blocks.block(1, 1), np.diag([-1.0, 1.0]), atol=1e-12)
    assert np.allclose(blocks.block(3, 1), [[1.0, 0.0]], atol=1e-12)
    diag = blocks.diagonal_blocks()
    assert [b.shape for b in diag] == [(2, 2), (1, 1), (1, 1)]


def test_block_decompose_rejects_non_preserving():
    mat = np.zeros((3, 3))
    mat[0, 2] = 1.0
    with pytest.raises(SeriesNotPreservedError):
        block_decompose(heis(), mat)


def test_ad_chain_blocks_filtration_shift():
    alg = NilpotentAlgebra.from_preset("filiform5")
    base = np.eye(5)
    for idx, expected_level in ((0, 1), (2, 2), (3, 3)):
        blocks, p = ad_chain_blocks(alg, base[idx])
        assert p == expected_level
        for i in range(1, 5):
            for j in range(1, 5):
                if i < p + j and blocks.block(i, j).size:
                    assert np.max(np.abs(blocks.block(i, j))) < 1e-12
    # level-one element really does move level 1 into level 2
    blocks, _ = ad_chain_blocks(alg, base[0])
    assert np.max(np.abs(blocks.block(2, 1))) > 0.5


def test_ad_chain_blocks_mixed_levels_uses_lowest():
    alg = NilpotentAlgebra.from_preset("filiform5")
    x = np.array([0.0, 1.0, 1.0, 0.0, 0.0])  # levels 1 and 2 present
    _, p = ad_chain_blocks(alg, x)
    assert p == 1
    _, p0 = ad_chain_blocks(alg, np.zeros(5))
    assert p0 == 0


def test_decay_constants_scalar():
    out = decay_constants(np.array([[-2.0]]))
    assert out["mu"] == pytest.approx(1.8)
    assert out["kappa"] == 1.0


def test_decay_constants_expanding_diagonal():
    out = decay_constants(np.diag([1.0, 3.0]))
    assert out["mu"] == pytest.approx(0.9)
    assert out["kappa"] == 1.0


def test_decay_constants_mixed_normal():
    out = decay_constants(np.diag([-2.0, 5.0]))
    assert out["mu"] == pytest.approx(1.8)
    assert out["kappa"] == 1.0


def test_decay_constants_spiral():
    out = decay_constants(np.array([[-1.0, 10.0], [-10.0, -1.0]]))
    assert out["mu"] == pytest.approx(0.9)
    assert out["kappa"] == 1.0


def test_decay_constants_jordan_overshoot():
    out = decay_constants(np.array([[-1.0, 1.0], [0.0, -1.0]]))
    assert out["kappa"] > 1.0
    assert out["kappa"] == pytest.approx(1.05 * out["raw"])
    assert out["raw"] > 1.0


def test_decay_constants_oblique_overshoot():
    out = decay_constants(np.array([[-1.0, 5.0], [0.0, 2.0]]))
    # the skewed unstable projection alone has norm sqrt(34)/3 > 1.9
    assert out["kappa"] > 1.9


def test_decay_constants_rejects_center_spectrum():
    with pytest.raises(ValidationError):
        decay_constants(np.array([[0.0, 1.0], [-1.0, 0.0]]))


def test_quotient_derivation_drops_kernel():
    d = np.diag([-1.0, -1.0, 0.0])
    kernel = np.array([[0.0], [0.0], [1.0]])
    d_hat, w = quotient_derivation(d, kernel)
    assert d_hat.shape == (2, 2)
    assert np.allclose(np.sort(np.linalg.eigvals(d_hat).real), [-1.0, -1.0])
    assert np.allclose(w.T @ kernel, 0.0, atol=1e-12)


def test_quotient_derivation_rejects_moving_kernel():
    d = np.diag([-1.0, -1.0, 1.0])
    with pytest.raises(ValidationError):
        quotient_derivation(d, np.array([[0.0], [0.0], [1.0]]))


def test_quotient_derivation_rejects_leftover_center():
    d = np.diag([-1.0, 0.0, 0.0])
    with pytest.raises(ValidationError):
        quotient_derivation(d, np.array([[0.0], [0.0], [1.0]]))
