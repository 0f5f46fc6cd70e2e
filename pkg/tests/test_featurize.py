import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_sparse
from stoprec.featurize import (
    FEATURE_NAMES,
    MatrixContext,
    build_graph,
    decode_params,
    encode_params,
    fit_standardizer,
    matrix_features,
)
from stoprec.krylov import Solver
from stoprec.matgen import gen_advdiff2d, gen_laplacian2d
from stoprec.mcmc import McmcParams
from stoprec.sparse import SparseMatrix, transpose


def test_graph_2x2(small_2x2):
    g = build_graph(small_2x2)
    assert g.edges == [(0, 0, 2.0), (0, 1, 1.0), (1, 1, 3.0)]
    np.testing.assert_array_equal(g.node_feature, [2, 1])


def test_graph_laplacian_interior_degree():
    g = build_graph(gen_laplacian2d(8))
    centre = 3 * 7 + 3
    assert g.node_feature[centre] == 5
    assert g.node_feature.sum() == gen_laplacian2d(8).nnz


def test_graph_diagonal_self_loops():
    g = build_graph(SparseMatrix.from_dense(np.diag([1.0, 2.0, 3.0])))
    assert g.edges == [(0, 0, 1.0), (1, 1, 2.0), (2, 2, 3.0)]
    np.testing.assert_array_equal(g.node_feature, [1, 1, 1])


@given(st.integers(0, 2**32 - 1))
def test_graph_transpose_reverses_edges(seed):
    A, _ = random_sparse(np.random.default_rng(seed), 15, 15, 0.2)
    fwd = {(s, d, w) for s, d, w in build_graph(A).edges}
    rev = {(d, s, w) for s, d, w in build_graph(transpose(A)).edges}
    assert fwd == rev


def test_features_laplacian():
    f = matrix_features(gen_laplacian2d(16))
    assert f.symmetric_flag == 1 and f.asymmetry_ratio == 0.0
    assert f.dimension_log == pytest.approx(math.log(225))


def test_features_advdiff():
    f = matrix_features(gen_advdiff2d(16, 10.0))
    assert f.symmetric_flag == 0 and f.asymmetry_ratio > 0


def test_features_identity():
    f = matrix_features(SparseMatrix.identity(4))
    assert f.sparsity == 0.25 and f.one_norm == 1 and f.inf_norm == 1 and f.frob_norm == 2
    assert len(f.as_vector()) == len(FEATURE_NAMES)


def test_standardizer_examples():
    st_ = fit_standardizer([[1.0], [2.0], [3.0]])
    assert st_.stds[0] == pytest.approx(0.816496580927726)
    np.testing.assert_allclose(st_.apply([[1.0], [2.0], [3.0]]).ravel(), [-1.224744871391589, 0, 1.224744871391589])
    const = fit_standardizer([[5.0], [5.0], [5.0]])
    np.testing.assert_array_equal(const.apply([[5.0], [5.0], [5.0]]).ravel(), [0, 0, 0])
    with pytest.raises(ValueError):
        fit_standardizer([])


@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=2, max_size=30))
def test_standardizer_properties(rows):
    X = np.array(rows)
    s = fit_standardizer(X)
    Z = s.apply(X)
    np.testing.assert_allclose(s.invert(Z), X, atol=1e-9, rtol=1e-12)
    live = X.std(axis=0) > 1e-6 * (1 + np.abs(X).max())
    np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(Z.std(axis=0)[live], 1, atol=1e-9)


def test_encode_examples():
    v = encode_params(McmcParams(4, 1 / 8, 1 / 8, Solver.GMRES))
    np.testing.assert_allclose(v, [4, -2.0794415416798357, -2.0794415416798357, 1, 0, 0])
    np.testing.assert_array_equal(encode_params(McmcParams(1, 1, 1, Solver.BICGSTAB)), [1, 0, 0, 0, 1, 0])


@given(st.floats(0, 10), st.floats(1e-6, 1), st.floats(1e-6, 1), st.sampled_from(list(Solver)))
def test_encode_decode_round_trip(a, e, d, s):
    p = McmcParams(a, e, d, s)
    q = decode_params(encode_params(p))
    assert q.solver is p.solver and q.alpha == p.alpha
    assert q.epsilon == pytest.approx(p.epsilon, rel=1e-15) and q.delta == pytest.approx(p.delta, rel=1e-15)


def test_context_neighbour_mean():
    A = SparseMatrix.from_dense(np.array([[2.0, 1.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 0.0]]))
    ctx = MatrixContext.from_matrix("m", A)
    np.testing.assert_array_equal(ctx.has_neighbors, [True, True, False])
    x = np.array([1.0, 5.0, 9.0])
    np.testing.assert_allclose(ctx.mean_op @ x, [3.0, 5.0, 0.0])
