import numpy as np
import pytest

from stoprec.matgen import (
    Family,
    GeneratorSpec,
    estimate_condition,
    gen_advdiff2d,
    gen_laplacian2d,
    gen_random_diag_dominant,
    generate,
)
from stoprec.sparse import transpose


def test_laplacian_dimension():
    assert gen_laplacian2d(16).shape == (225, 225)


def test_laplacian_g4_stencil():
    A = gen_laplacian2d(4).to_dense()
    assert A.shape == (9, 9)
    centre = A[4]
    assert centre[4] == 4
    assert sorted(centre[[1, 3, 5, 7]]) == [-1, -1, -1, -1]
    assert np.count_nonzero(centre) == 5


@pytest.mark.parametrize("g", [4, 8, 16, 32])
def test_laplacian_symmetric_and_spd(g):
    A = gen_laplacian2d(g)
    assert transpose(A).equals(A)
    if g <= 16:
        assert np.linalg.eigvalsh(A.to_dense()).min() > 0


def test_laplacian_sparsity_decreases():
    phis = [gen_laplacian2d(g).nnz / gen_laplacian2d(g).nrows ** 2 for g in (8, 16, 32, 64)]
    assert all(a > b for a, b in zip(phis, phis[1:]))


def test_grid_param_too_small():
    with pytest.raises(ValueError):
        gen_laplacian2d(3)


def test_advdiff_zero_peclet_is_laplacian():
    assert gen_advdiff2d(16, 0.0).equals(gen_laplacian2d(16))


def test_advdiff_nonsymmetric():
    A = gen_advdiff2d(16, 10.0)
    assert not transpose(A).equals(A)


def test_advdiff_condition_vs_peclet():
    # frozen from power/inverse iteration; upwinding adds to the diagonal,
    # so the estimate falls as the Peclet number grows
    k0 = estimate_condition(gen_advdiff2d(32, 0.0))
    k10 = estimate_condition(gen_advdiff2d(32, 10.0))
    assert k0 == pytest.approx(411.9, rel=2e-3)
    assert k10 == pytest.approx(293.0, rel=1e-2)
    dense = np.linalg.cond(gen_advdiff2d(32, 10.0).to_dense())
    assert k10 == pytest.approx(dense, rel=1e-2)


def test_random_diag_dominant_bound():
    A = gen_random_diag_dominant(8, 0.3, 7).to_dense()
    D = np.diag(A)
    T = np.eye(8) - A / D[:, None]
    assert np.abs(T).sum(axis=1).max() <= 0.5


def test_random_diag_dominant_deterministic():
    assert gen_random_diag_dominant(16, 0.25, 1).equals(gen_random_diag_dominant(16, 0.25, 1))
    assert not gen_random_diag_dominant(16, 0.25, 1).equals(gen_random_diag_dominant(16, 0.25, 2))


def test_random_diag_dominant_invertible():
    A = gen_random_diag_dominant(16, 0.25, 1).to_dense()
    assert np.linalg.cond(A) < 10


def test_generate_dispatch():
    spec = GeneratorSpec(Family.ADVDIFF2D, 8, peclet=2.0)
    assert spec.dimension == 49
    assert generate(spec).equals(gen_advdiff2d(8, 2.0))
    assert generate(GeneratorSpec("random_diag_dominant", 12, seed=3)).shape == (12, 12)


def test_condition_ratio_laplacian():
    ratio = estimate_condition(gen_laplacian2d(64)) / estimate_condition(gen_laplacian2d(32))
    assert 3.5 <= ratio <= 4.5
