import math

import numpy as np
import pytest

from stoprec.featurize import MatrixContext, encode_params
from stoprec.krylov import Solver
from stoprec.matgen import gen_advdiff2d, gen_laplacian2d
from stoprec.mcmc import McmcParams
from stoprec.sparse import SparseMatrix
from stoprec.surrogate import (
    SurrogateConfig,
    SurrogateNet,
    TrainingExample,
    grad_check,
    loss,
    train,
)

SMALL = SurrogateConfig(graph_hidden=8, xa_hidden=6, xm_hidden=5, combined_hidden=10, dropout=0.0, max_epochs=40)


@pytest.fixture(scope="module")
def contexts():
    return {"lap": MatrixContext.from_matrix("lap", gen_laplacian2d(8)),
            "adv": MatrixContext.from_matrix("adv", gen_advdiff2d(8, 5.0))}


def synthetic(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        p = McmcParams(rng.uniform(0.1, 6), math.exp(rng.uniform(-4, 0)), math.exp(rng.uniform(-4, 0)),
                       (Solver.GMRES, Solver.BICGSTAB)[rng.integers(2)])
        xm = encode_params(p)
        y = 0.5 + 0.1 * xm[0] - 0.05 * xm[1] + 0.02 * xm[2] ** 2
        out.append(TrainingExample("lap" if i % 2 else "adv", xm, y, 0.0))
    return out


def test_output_domains(contexts):
    net = SurrogateNet(SMALL, seed=1)
    xm = np.stack([encode_params(McmcParams(a, 0.25, 0.5)) for a in np.linspace(0, 8, 20)])
    mu, sigma, _ = net.forward([contexts["lap"]] * 20, xm)
    assert np.all(mu >= 0) and np.all(sigma > 0)


def test_heads(contexts):
    net = SurrogateNet(SMALL, seed=1)
    net.params["head_sigma.W"][:] = 0
    net.params["head_sigma.b"][:] = 0
    net.params["head_mu.W"][:] = 0
    net.params["head_mu.b"][:] = -3
    p = net.predict(contexts["lap"], encode_params(McmcParams(1, 0.5, 0.5)))
    assert p.sigma_hat == pytest.approx(math.log(2)) and p.mu_hat == 0.0


def test_isolated_nodes_and_size_invariance():
    net = SurrogateNet(SMALL, seed=2)
    xm = encode_params(McmcParams(1, 0.5, 0.5))
    diag = MatrixContext.from_matrix("d", SparseMatrix.from_dense(np.diag([1.0, 2.0, 3.0])))
    empty_row = MatrixContext.from_matrix("e", SparseMatrix.from_coo(3, 3, [0, 1], [0, 1], [1.0, 2.0]))
    for ctx in (diag, empty_row, MatrixContext.from_matrix("big", gen_laplacian2d(16))):
        p = net.predict(ctx, xm)
        assert math.isfinite(p.mu_hat) and p.sigma_hat > 0


def test_permutation_invariance():
    A = gen_advdiff2d(8, 3.0).to_dense()
    perm = np.random.default_rng(0).permutation(len(A))
    B = A[np.ix_(perm, perm)]
    net = SurrogateNet(SMALL, seed=3)
    xm = encode_params(McmcParams(2, 0.25, 0.125))
    a = net.predict(MatrixContext.from_matrix("a", SparseMatrix.from_dense(A)), xm)
    b = net.predict(MatrixContext.from_matrix("b", SparseMatrix.from_dense(B)), xm)
    assert a.mu_hat == pytest.approx(b.mu_hat, abs=1e-10)
    assert a.sigma_hat == pytest.approx(b.sigma_hat, abs=1e-10)


def test_loss_arithmetic(contexts):
    net = SurrogateNet(SMALL, seed=4)
    xm = encode_params(McmcParams(1, 0.5, 0.5))
    mu, sigma, _ = net.forward([contexts["lap"]], xm[None, :])
    ex = TrainingExample("lap", xm, float(mu[0]) - 0.2, float(sigma[0]) + 0.1)
    assert loss(net, [ex], contexts) == pytest.approx(0.05, abs=1e-12)
    perfect = TrainingExample("lap", xm, float(mu[0]), float(sigma[0]))
    assert loss(net, [perfect], contexts) == 0.0


def test_batch_loss_is_mean(contexts):
    net = SurrogateNet(SMALL, seed=5)
    batch = synthetic(12)
    single = [loss(net, [e], contexts) for e in batch]
    assert loss(net, batch, contexts) == pytest.approx(np.mean(single), abs=1e-12)


def test_grad_check_default_architecture(contexts):
    net = SurrogateNet(SurrogateConfig(dropout=0.0), seed=0)
    ex = TrainingExample("adv", encode_params(McmcParams(2, 0.25, 0.125)), 0.7, 0.05)
    assert grad_check(net, ex, contexts, probe_count=50) < 1e-4


def test_zero_weights_dead_paths(contexts):
    net = SurrogateNet(SMALL, seed=0)
    for k in net.params:
        net.params[k][:] = 0.0
    ex = TrainingExample("lap", encode_params(McmcParams(1, 0.5, 0.5)), 0.7, 0.05)
    from stoprec.surrogate import _loss_and_grads
    _, grads = _loss_and_grads(net, [ex], contexts, False, None)
    # mu head pre-activation is 0, so nothing flows back through ReLU(mu)
    assert np.all(grads["head_mu.W"] == 0) and np.all(grads["head_mu.b"] == 0)
    for k, g in grads.items():
        if k.endswith(".W") and not k.startswith("head"):
            assert np.all(g == 0), k


def test_training_reduces_validation_loss(contexts):
    cfg = SurrogateConfig(graph_hidden=16, xa_hidden=16, xm_hidden=16, combined_hidden=32, max_epochs=60, seed=0)
    net, hist = train(synthetic(200), contexts, cfg)
    assert min(hist.val_loss) <= 0.1 * hist.val_loss[0]
    assert hist.n_train + hist.n_val == 200 and hist.n_val == 40


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_decreases_first_epochs(contexts, seed):
    cfg = SurrogateConfig(max_epochs=5, patience=100, seed=seed)
    _, hist = train(synthetic(200, seed), contexts, cfg)
    # minibatch Adam is not monotone epoch to epoch; compare the ends of the span
    assert len(hist.train_loss) == 5
    assert hist.train_loss[-1] < hist.train_loss[0]


def test_training_deterministic(contexts):
    cfg = SurrogateConfig(graph_hidden=8, xa_hidden=8, xm_hidden=8, combined_hidden=8, max_epochs=5)
    _, h1 = train(synthetic(30), contexts, cfg)
    _, h2 = train(synthetic(30), contexts, cfg)
    assert h1.train_loss == h2.train_loss and h1.val_loss == h2.val_loss


def test_training_needs_data(contexts):
    with pytest.raises(ValueError):
        train(synthetic(5), contexts, SMALL)


def test_non_finite_loss_names_sample(contexts):
    bad = synthetic(12)
    bad[3] = TrainingExample(bad[3].matrix_id, bad[3].xm, math.inf, 0.0)
    with pytest.raises(FloatingPointError, match="sample"):
        loss(SurrogateNet(SMALL), bad, contexts)


def test_checkpoint_round_trip(tmp_path, contexts):
    net, _ = train(synthetic(30), contexts, SMALL)
    net.save(tmp_path / "m.json")
    other = SurrogateNet.load(tmp_path / "m.json")
    for k, v in net.params.items():
        assert np.array_equal(v, other.params[k])
    xm = np.stack([e.xm for e in synthetic(8)])
    ctxs = [contexts["adv"]] * 8
    assert np.array_equal(net.predict_batch(ctxs, xm)[0], other.predict_batch(ctxs, xm)[0])


def test_dropout_only_in_training(contexts):
    net = SurrogateNet(SurrogateConfig(dropout=0.5), seed=0)
    xm = np.stack([e.xm for e in synthetic(4)])
    ctxs = [contexts["lap"]] * 4
    a = net.forward(ctxs, xm)[0]
    assert np.array_equal(a, net.forward(ctxs, xm)[0])
    b = net.forward(ctxs, xm, training=True, rng=np.random.default_rng(0))[0]
    assert not np.array_equal(a, b)


def test_input_shape_errors(contexts):
    net = SurrogateNet(SMALL)
    with pytest.raises(ValueError):
        net.forward([contexts["lap"]], np.zeros((1, 4)))
    with pytest.raises(ValueError):
        net.forward([contexts["lap"]], np.full((1, 6), np.nan))
