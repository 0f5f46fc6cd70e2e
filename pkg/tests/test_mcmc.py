import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_sparse
from stoprec.krylov import Solver
from stoprec.matgen import gen_laplacian2d, gen_random_diag_dominant
from stoprec.mcmc import (
    McmcFixedSettings,
    McmcParams,
    build_preconditioner,
    chain_budget,
    perturb,
    row_fill_budget,
    splitting,
)
from stoprec.rng import counter_uniform, counter_uniforms
from stoprec.sparse import SparseMatrix, norms

A2 = SparseMatrix.from_dense(np.array([[2.0, 1.0], [0.0, 3.0]]))
AHAT2 = SparseMatrix.from_dense(np.array([[4.0, 1.0], [0.0, 6.0]]))


def chains_for(n):
    """epsilon giving exactly n chains."""
    return 0.6745 / math.sqrt(n)


def test_params_validation_and_round_trip():
    p = McmcParams(4, 0.125, 0.125, "bicgstab")
    assert p.solver is Solver.BICGSTAB
    assert McmcParams.from_dict(p.to_dict()) == p
    for bad in [(-1, 0.5, 0.5), (1, 0.0, 0.5), (1, 0.5, 1.5), (math.inf, 0.5, 0.5)]:
        with pytest.raises(ValueError):
            McmcParams(*bad)


def test_perturb():
    assert perturb(A2, 0.0).equals(A2)
    np.testing.assert_array_equal(perturb(A2, 1.0).to_dense(), [[4, 1], [0, 6]])
    L = perturb(gen_laplacian2d(16), 4.0)
    assert np.all(L.diagonal() == 20.0)
    _, T = splitting(L)
    assert norms(T)[1] == pytest.approx(0.2, abs=1e-15)


def test_perturb_zero_diagonal_names_row():
    A = SparseMatrix.from_dense(np.array([[1.0, 2.0], [3.0, 0.0]]))
    with pytest.raises(ValueError, match="row 1"):
        perturb(A, 1.0)


def test_splitting_examples():
    dinv, T = splitting(SparseMatrix.from_dense(np.diag([2.0, 4.0])))
    assert T.nnz == 0
    np.testing.assert_array_equal(dinv, [0.5, 0.25])
    dinv, T = splitting(AHAT2)
    np.testing.assert_array_equal(T.to_dense(), [[0, -0.25], [0, 0]])
    np.testing.assert_allclose(dinv, [0.25, 1 / 6], rtol=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_splitting_reconstructs(seed):
    rng = np.random.default_rng(seed)
    A, dense = random_sparse(rng, 20, 20, 0.2)
    dense = dense + np.diag(rng.uniform(1, 3, 20) * rng.choice([-1, 1], 20))
    A = SparseMatrix.from_dense(dense)
    dinv, T = splitting(A)
    assert np.all(T.diagonal() == 0)
    rebuilt = np.diag(1 / dinv) @ (np.eye(20) - T.to_dense())
    scale = np.abs(dense).max()
    assert np.max(np.abs(rebuilt - dense)) <= 1e-14 * scale


def test_chain_budget_examples():
    assert chain_budget(0.5, 0.5, 0.3)[0] == 2
    assert chain_budget(1 / 16, 0.5, 0.3)[0] == 117
    assert chain_budget(0.5, 1 / 16, 0.5)[1] == 4
    n, m, degen = chain_budget(0.5, 0.5, 1.0)
    assert degen and m == 10_000
    assert chain_budget(1e-6, 0.5, 0.5, chain_count_cap=1000)[0] == 1000
    assert chain_budget(0.5, 1e-300, 0.999, walk_length_cap=50)[1] == 50


def test_row_fill_budget():
    L = gen_laplacian2d(16)
    assert row_fill_budget(L, 2.0) == math.floor(2 * L.nnz / L.nrows)
    assert row_fill_budget(L, None) == L.nrows


def test_diagonal_matrix_exact_inverse():
    A = SparseMatrix.from_dense(np.diag([2.0, -4.0, 5.0]))
    rep = build_preconditioner(A, McmcParams(1.0, 0.5, 0.5))
    np.testing.assert_array_equal(rep.P.to_dense(), np.diag([1 / 4, -1 / 8, 1 / 10]))


def test_two_by_two_close_to_inverse():
    rep = build_preconditioner(A2, McmcParams(1.0, 1e-3, 1e-3), McmcFixedSettings(fill_factor_multiplier=None))
    exact = np.array([[0.25, -1 / 24], [0, 1 / 6]])
    assert np.max(np.abs(rep.P.to_dense() - exact)) <= 0.05


def test_unbiased_on_small_matrix():
    """Seed-averaged estimates sit within 3 standard errors of the true inverse."""
    A = gen_random_diag_dominant(6, 0.5, 3)
    exact = np.linalg.inv(A.to_dense())
    fixed = McmcFixedSettings(fill_factor_multiplier=None)
    params = McmcParams(0.0, chains_for(1000), 1e-8)
    est = np.stack([build_preconditioner(A, params, fixed.with_seed(s)).P.to_dense() for s in range(30)])
    mean = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / math.sqrt(len(est))
    assert np.all(np.abs(mean - exact) <= 3 * se + 1e-12)


def test_error_shrinks_with_budget():
    A = gen_random_diag_dominant(16, 0.25, 1)
    Ad = A.to_dense()
    fixed = McmcFixedSettings(fill_factor_multiplier=None)
    meds = []
    for tol in (1 / 2, 1 / 8, 1 / 32):
        errs = [np.linalg.norm(build_preconditioner(A, McmcParams(0, tol, tol), fixed.with_seed(s)).P.to_dense()
                               @ Ad - np.eye(16)) for s in range(5)]
        meds.append(np.median(errs))
    assert meds[0] > meds[1] > meds[2]


def test_sparsity_bound_and_diagonal_kept():
    A = gen_laplacian2d(16)
    rep = build_preconditioner(A, McmcParams(1.0, 1 / 16, 1 / 16))
    n = A.nrows
    assert rep.P.nnz <= 2.0 * A.nnz / n**2 * n**2 + n
    assert np.all(rep.P.diagonal() != 0)
    assert np.all(np.diff(rep.P.row_offsets) <= row_fill_budget(A, 2.0) + 1)


def test_degenerate_flag():
    rep = build_preconditioner(gen_laplacian2d(8), McmcParams(0.0, 0.5, 0.5), McmcFixedSettings(walk_length_cap=20))
    assert rep.degenerate and rep.max_walk_len == 20 and rep.spectral_bound == pytest.approx(1.0)
    assert not build_preconditioner(gen_laplacian2d(8), McmcParams(1.0, 0.5, 0.5)).degenerate


def test_seed_determinism():
    A = gen_laplacian2d(16)
    p = McmcParams(1.0, 1 / 8, 1 / 8)
    a = build_preconditioner(A, p, McmcFixedSettings(seed=5)).P
    b = build_preconditioner(A, p, McmcFixedSettings(seed=5)).P
    c = build_preconditioner(A, p, McmcFixedSettings(seed=6)).P
    assert a.equals(b) and not a.equals(c)


def test_large_seed_accepted():
    A = gen_laplacian2d(8)
    build_preconditioner(A, McmcParams(1.0, 0.5, 0.5), McmcFixedSettings(seed=2**64 - 1))


_THREADED = """
import sys, numpy as np
from stoprec.matgen import gen_advdiff2d
from stoprec.mcmc import McmcParams, McmcFixedSettings, build_preconditioner
P = build_preconditioner(gen_advdiff2d(16, 10.0), McmcParams(1.0, 1/16, 1/16), McmcFixedSettings(seed=9),
                         threads=int(sys.argv[1])).P
sys.stdout.write(np.concatenate([P.row_offsets, P.col_indices]).tobytes().hex() + ":" + P.values.tobytes().hex())
"""


def test_thread_count_independent():
    env = dict(os.environ, NUMBA_NUM_THREADS="4")
    outs = [subprocess.run([sys.executable, "-c", _THREADED, str(t)], env=env, capture_output=True, text=True,
                           check=True).stdout for t in (1, 4)]
    assert outs[0] == outs[1] and outs[0]


def test_counter_rng():
    u = counter_uniform(np.uint64(1), 2, 3, 4)
    assert u == counter_uniform(np.uint64(1), 2, 3, 4)
    assert 0.0 <= u < 1.0
    assert u != counter_uniform(np.uint64(1), 2, 3, 5)
    r, c, m = (g.ravel() for g in np.meshgrid(np.arange(200), np.arange(50), np.arange(4), indexing="ij"))
    draws = counter_uniforms(np.uint64(7), r, c, m)
    assert draws.min() >= 0 and draws.max() < 1
    assert abs(draws.mean() - 0.5) < 0.01
    assert len(np.unique(draws)) == draws.size
