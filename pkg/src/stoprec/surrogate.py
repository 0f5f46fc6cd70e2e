"""Graph-neural surrogate predicting (mean, std) of the preconditioning ratio.

Architecture (all blocks are Linear -> LayerNorm -> ReLU):

* graph branch: EdgeConv layers over the matrix graph.  The message for edge
  (i, j) is a linear map of ``[x_i, x_j - x_i, w_ij]``; messages are averaged
  over the out-neighbours of i, then normalised and rectified.  Node states
  are mean-pooled into the graph embedding.
* matrix-feature branch and parameter branch: plain FC stacks.
* fusion: FC stack with dropout over the concatenated embeddings, followed by
  a ReLU mean head and a softplus std head.

Forward and backward passes are written out by hand in numpy; ``grad_check``
compares them against central finite differences.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .featurize import FEATURE_NAMES, PARAM_NAMES, MatrixContext, Standardizer, encode_params, fit_standardizer

__all__ = [
    "Prediction",
    "SurrogateConfig",
    "SurrogateNet",
    "TrainHistory",
    "TrainingExample",
    "grad_check",
    "loss",
    "train",
]

log = logging.getLogger(__name__)

_LN_EPS = 1e-5
_SIGMA_FLOOR = 1e-12
_FORMAT = "stoprec-surrogate/1"


@dataclass(frozen=True)
class SurrogateConfig:
    graph_hidden: int = 256
    graph_layers: int = 1
    xa_layers: int = 1
    xa_hidden: int = 64
    xm_layers: int = 3
    xm_hidden: int = 16
    combined_layers: int = 2
    combined_hidden: int = 128
    dropout: float = 0.1
    learn_rate: float = 1.848e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 150
    patience: int = 20
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        dims = (self.graph_hidden, self.graph_layers, self.xa_layers, self.xa_hidden, self.xm_layers,
                self.xm_hidden, self.combined_layers, self.combined_hidden, self.batch_size, self.max_epochs)
        if min(dims) < 1:
            raise ValueError("all layer counts and widths must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.learn_rate <= 0:
            raise ValueError("learn_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class Prediction:
    mu_hat: float
    sigma_hat: float


@dataclass
class TrainingExample:
    """One labelled datum: matrix id, encoded parameters, mean and std of y."""

    matrix_id: str
    xm: np.ndarray
    y_mean: float
    y_std: float


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    n_train: int = 0
    n_val: int = 0


# -- layer primitives -------------------------------------------------------

def _dense_forward(x, W, b, gamma, beta, mask=None):
    a = x @ W + b
    mean = a.mean(axis=-1, keepdims=True)
    cen = a - mean
    inv = 1.0 / np.sqrt((cen * cen).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = cen * inv
    z = gamma * xhat + beta
    out = np.maximum(z, 0.0)
    if mask is not None:
        out = out * mask
    return out, (x, xhat, inv, z, mask)


def _dense_backward(dout, cache, W, gamma):
    x, xhat, inv, z, mask = cache
    if mask is not None:
        dout = dout * mask
    dz = dout * (z > 0.0)
    dgamma = (dz * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbeta = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
    dxhat = dz * gamma
    h = xhat.shape[-1]
    da = (inv / h) * (h * dxhat - dxhat.sum(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    dW = x.T @ da
    db = da.sum(axis=0)
    dx = da @ W.T
    return dx, dW, db, dgamma, dbeta


def _softplus(z):
    return np.logaddexp(0.0, z)


class SurrogateNet:
    """Weights, standardizers and the forward/backward passes."""

    def __init__(self, config: SurrogateConfig | None = None, n_features: int = len(FEATURE_NAMES),
                 n_params: int = len(PARAM_NAMES), seed: int | None = None):
        self.config = config or SurrogateConfig()
        self.n_features = n_features
        self.n_params = n_params
        self.node_standardizer = Standardizer(np.zeros(1), np.ones(1))
        self.xa_standardizer = Standardizer(np.zeros(n_features), np.ones(n_features))
        self.xm_standardizer = Standardizer(np.zeros(n_params), np.ones(n_params))
        self.params: dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(self.config.seed if seed is None else seed))

    # -- parameters ------------------------------------------------------------

    def _block_names(self):
        c = self.config
        blocks = []
        d = 1
        for layer in range(c.graph_layers):
            blocks.append((f"graph{layer}", 2 * d + 1, c.graph_hidden))
            d = c.graph_hidden
        d = self.n_features
        for layer in range(c.xa_layers):
            blocks.append((f"xa{layer}", d, c.xa_hidden))
            d = c.xa_hidden
        d = self.n_params
        for layer in range(c.xm_layers):
            blocks.append((f"xm{layer}", d, c.xm_hidden))
            d = c.xm_hidden
        d = c.graph_hidden + c.xa_hidden + c.xm_hidden
        for layer in range(c.combined_layers):
            blocks.append((f"comb{layer}", d, c.combined_hidden))
            d = c.combined_hidden
        return blocks

    def _init_params(self, rng):
        for name, fan_in, fan_out in self._block_names():
            bound = 1.0 / math.sqrt(fan_in)
            self.params[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"{name}.b"] = rng.uniform(-bound, bound, size=fan_out)
            self.params[f"{name}.gamma"] = np.ones(fan_out)
            self.params[f"{name}.beta"] = np.zeros(fan_out)
        h = self.config.combined_hidden
        bound = 1.0 / math.sqrt(h)
        for head in ("mu", "sigma"):
            self.params[f"head_{head}.W"] = rng.uniform(-bound, bound, size=h)
            self.params[f"head_{head}.b"] = np.zeros(1)

    def copy(self) -> "SurrogateNet":
        other = SurrogateNet.__new__(SurrogateNet)
        other.config = self.config
        other.n_features = self.n_features
        other.n_params = self.n_params
        other.node_standardizer = Standardizer(self.node_standardizer.means.copy(), self.node_standardizer.stds.copy())
        other.xa_standardizer = Standardizer(self.xa_standardizer.means.copy(), self.xa_standardizer.stds.copy())
        other.xm_standardizer = Standardizer(self.xm_standardizer.means.copy(), self.xm_standardizer.stds.copy())
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def fit_standardizers(self, examples, contexts):
        ids = sorted({e.matrix_id for e in examples})
        degrees = np.concatenate([contexts[i].graph.node_feature for i in ids])
        self.node_standardizer = fit_standardizer(degrees[:, None])
        self.xa_standardizer = fit_standardizer([contexts[e.matrix_id].features.as_vector() for e in examples])
        self.xm_standardizer = fit_standardizer([e.xm for e in examples])

    # -- graph branch ------------------------------------------------------------

    def _graph_forward(self, ctx: MatrixContext):
        x = self.node_standardizer.apply(ctx.graph.node_feature[:, None])
        caches = []
        mask = ctx.has_neighbors[:, None]
        for layer in range(self.config.graph_layers):
            p = f"graph{layer}"
            diff = np.where(mask, ctx.mean_op @ x - x, 0.0)
            z_in = np.hstack([x, diff, ctx.edge_weight_mean[:, None]])
            x, cache = _dense_forward(z_in, self.params[f"{p}.W"], self.params[f"{p}.b"],
                                      self.params[f"{p}.gamma"], self.params[f"{p}.beta"])
            caches.append(cache)
        return x.mean(axis=0), caches

    def _graph_backward(self, ctx: MatrixContext, dhg, caches, grads):
        n = ctx.num_nodes
        dx = np.broadcast_to(dhg / n, (n, len(dhg)))
        mask = ctx.has_neighbors[:, None]
        for layer in reversed(range(self.config.graph_layers)):
            p = f"graph{layer}"
            dz, dW, db, dg, dbeta = _dense_backward(dx, caches[layer], self.params[f"{p}.W"], self.params[f"{p}.gamma"])
            grads[f"{p}.W"] += dW
            grads[f"{p}.b"] += db
            grads[f"{p}.gamma"] += dg
            grads[f"{p}.beta"] += dbeta
            if layer == 0:
                break
            d = (dz.shape[1] - 1) // 2
            ddiff = np.where(mask, dz[:, d:2 * d], 0.0)
            dx = dz[:, :d] + ctx.mean_op.T @ ddiff - ddiff

    def graph_embedding(self, ctx: MatrixContext) -> np.ndarray:
        return self._graph_forward(ctx)[0]

    # -- full network ------------------------------------------------------------

    def _stack_forward(self, prefix, layers, x, rng=None, dropout=0.0):
        caches = []
        for layer in range(layers):
            p = f"{prefix}{layer}"
            mask = None
            if rng is not None and dropout > 0.0:
                mask = (rng.random((x.shape[0], self.params[f"{p}.b"].shape[0])) >= dropout) / (1.0 - dropout)
            x, cache = _dense_forward(x, self.params[f"{p}.W"], self.params[f"{p}.b"],
                                      self.params[f"{p}.gamma"], self.params[f"{p}.beta"], mask)
            caches.append(cache)
        return x, caches

    def _stack_backward(self, prefix, layers, dx, caches, grads):
        for layer in reversed(range(layers)):
            p = f"{prefix}{layer}"
            dx, dW, db, dg, dbeta = _dense_backward(dx, caches[layer], self.params[f"{p}.W"], self.params[f"{p}.gamma"])
            grads[f"{p}.W"] += dW
            grads[f"{p}.b"] += db
            grads[f"{p}.gamma"] += dg
            grads[f"{p}.beta"] += dbeta
        return dx

    def forward(self, contexts, xm_raw, training: bool = False, rng=None, graph_cache=None):
        """Batched forward pass.

        ``contexts`` is a list (one per row of ``xm_raw``) of MatrixContext.
        Returns ``(mu, sigma, cache)``; dropout needs ``rng`` when training.
        """
        xm_raw = np.atleast_2d(np.asarray(xm_raw, dtype=np.float64))
        if xm_raw.shape != (len(contexts), self.n_params):
            raise ValueError(f"xm batch has shape {xm_raw.shape}, expected ({len(contexts)}, {self.n_params})")
        if not np.all(np.isfinite(xm_raw)):
            raise ValueError("non-finite parameter input")
        c = self.config
        order: list[str] = []
        by_id: dict[str, MatrixContext] = {}
        for ctx in contexts:
            if ctx.matrix_id not in by_id:
                by_id[ctx.matrix_id] = ctx
                order.append(ctx.matrix_id)
        graph_out = {}
        for mid in order:
            if graph_cache is not None and mid in graph_cache:
                graph_out[mid] = (graph_cache[mid], None)
            else:
                graph_out[mid] = self._graph_forward(by_id[mid])
        hg = np.stack([graph_out[ctx.matrix_id][0] for ctx in contexts])

        xa = self.xa_standardizer.apply(np.stack([ctx.features.as_vector() for ctx in contexts]))
        xm = self.xm_standardizer.apply(xm_raw)
        if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(hg))):
            raise ValueError("non-finite matrix input")
        drop_rng = rng if training else None
        ha, ca = self._stack_forward("xa", c.xa_layers, xa)
        hm, cm = self._stack_forward("xm", c.xm_layers, xm)
        h_in = np.hstack([hg, ha, hm])
        hc, cc = self._stack_forward("comb", c.combined_layers, h_in, drop_rng, c.dropout)
        pre_mu = hc @ self.params["head_mu.W"] + self.params["head_mu.b"][0]
        pre_sigma = hc @ self.params["head_sigma.W"] + self.params["head_sigma.b"][0]
        mu = np.maximum(pre_mu, 0.0)
        sigma = np.maximum(_softplus(pre_sigma), _SIGMA_FLOOR)
        cache = dict(contexts=contexts, order=order, graph_out=graph_out, ca=ca, cm=cm, cc=cc, hc=hc,
                     pre_mu=pre_mu, pre_sigma=pre_sigma)
        return mu, sigma, cache

    def backward(self, cache, dmu, dsigma, need_params: bool = True):
        """Backpropagate dL/dmu, dL/dsigma; returns (param grads, dL/dxm_raw)."""
        c = self.config
        grads = {k: np.zeros_like(v) for k, v in self.params.items()} if need_params else _Sink()
        dpre_mu = dmu * (cache["pre_mu"] > 0.0)
        dpre_sigma = dsigma * expit(cache["pre_sigma"])
        hc = cache["hc"]
        grads["head_mu.W"] += hc.T @ dpre_mu
        grads["head_mu.b"] += dpre_mu.sum(keepdims=True)
        grads["head_sigma.W"] += hc.T @ dpre_sigma
        grads["head_sigma.b"] += dpre_sigma.sum(keepdims=True)
        dhc = np.outer(dpre_mu, self.params["head_mu.W"]) + np.outer(dpre_sigma, self.params["head_sigma.W"])
        dh_in = self._stack_backward("comb", c.combined_layers, dhc, cache["cc"], grads)
        g, a = c.graph_hidden, c.xa_hidden
        dhg, dha, dhm = dh_in[:, :g], dh_in[:, g:g + a], dh_in[:, g + a:]
        dxm = self._stack_backward("xm", c.xm_layers, dhm, cache["cm"], grads)
        if need_params:
            self._stack_backward("xa", c.xa_layers, dha, cache["ca"], grads)
            ids = np.array([ctx.matrix_id for ctx in cache["contexts"]])
            for mid in cache["order"]:
                hg, gcache = cache["graph_out"][mid]
                if gcache is None:
                    raise RuntimeError("graph branch was cached; parameter gradients unavailable")
                ctx = next(ctx for ctx in cache["contexts"] if ctx.matrix_id == mid)
                self._graph_backward(ctx, dhg[ids == mid].sum(axis=0), gcache, grads)
        return (grads if need_params else None), dxm / self.xm_standardizer.stds

    def predict(self, ctx: MatrixContext, xm_raw) -> Prediction:
        mu, sigma, _ = self.forward([ctx], np.asarray(xm_raw)[None, :])
        return Prediction(float(mu[0]), float(sigma[0]))

    def predict_batch(self, contexts, xm_raw):
        mu, sigma, _ = self.forward(contexts, xm_raw)
        return mu, sigma

    # -- serialisation ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": _FORMAT,
            "config": asdict(self.config),
            "n_features": self.n_features,
            "n_params": self.n_params,
            "feature_names": list(FEATURE_NAMES),
            "param_names": list(PARAM_NAMES),
            "standardizers": {
                "node": self.node_standardizer.to_dict(),
                "xa": self.xa_standardizer.to_dict(),
                "xm": self.xm_standardizer.to_dict(),
            },
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d) -> "SurrogateNet":
        if d.get("format") != _FORMAT:
            raise ValueError(f"not a surrogate checkpoint (format={d.get('format')!r})")
        net = cls.__new__(cls)
        net.config = SurrogateConfig(**d["config"])
        net.n_features = d["n_features"]
        net.n_params = d["n_params"]
        st = d["standardizers"]
        net.node_standardizer = Standardizer.from_dict(st["node"])
        net.xa_standardizer = Standardizer.from_dict(st["xa"])
        net.xm_standardizer = Standardizer.from_dict(st["xm"])
        net.params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()}
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SurrogateNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


class _Sink(dict):
    """Gradient accumulator that discards parameter gradients."""

    def __missing__(self, key):
        return 0.0

    def __setitem__(self, key, value):
        pass


# -- objective and training --------------------------------------------------

def _loss_terms(mu, sigma, y, s):
    return (mu - y) ** 2 + (sigma - s) ** 2


def loss(net: SurrogateNet, batch, contexts, training: bool = False, rng=None) -> float:
    """Mean over the batch of (mu - y_mean)^2 + (sigma - y_std)^2."""
    if not batch:
        raise ValueError("empty batch")
    value, _ = _loss_and_grads(net, batch, contexts, training, rng, need_grads=False)
    return value


def _loss_and_grads(net, batch, contexts, training, rng, need_grads=True):
    ctxs = [contexts[e.matrix_id] for e in batch]
    xm = np.stack([e.xm for e in batch])
    y = np.array([e.y_mean for e in batch])
    s = np.array([e.y_std for e in batch])
    mu, sigma, cache = net.forward(ctxs, xm, training=training, rng=rng)
    terms = _loss_terms(mu, sigma, y, s)
    if not np.all(np.isfinite(terms)):
        bad = int(np.flatnonzero(~np.isfinite(terms))[0])
        e = batch[bad]
        raise FloatingPointError(
            f"non-finite loss for sample {bad} (matrix {e.matrix_id}, xm={e.xm.tolist()}, "
            f"y={e.y_mean}, s={e.y_std}, mu={mu[bad]}, sigma={sigma[bad]})"
        )
    value = float(terms.mean())
    if not need_grads:
        return value, None
    nb = len(batch)
    grads, _ = net.backward(cache, 2.0 * (mu - y) / nb, 2.0 * (sigma - s) / nb)
    return value, grads


def _split(n, val_fraction, rng):
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(val_fraction * n))), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(examples, contexts, config: SurrogateConfig | None = None):
    """Fit a freshly initialised surrogate with AdamW and early stopping.

    ``examples`` is a sequence of TrainingExample; ``contexts`` maps matrix id
    to MatrixContext.  Returns ``(net, history)`` with the best-validation
    weights restored.
    """
    cfg = config or SurrogateConfig()
    examples = list(examples)
    if len(examples) < 10:
        raise ValueError(f"need at least 10 labelled samples to train, got {len(examples)}")
    rng = np.random.default_rng(cfg.seed)
    tr_idx, va_idx = _split(len(examples), cfg.val_fraction, rng)
    train_set = [examples[i] for i in tr_idx]
    val_set = [examples[i] for i in va_idx]
    if not train_set:
        raise ValueError("empty training split")

    net = SurrogateNet(cfg, seed=int(rng.integers(2**63)))
    net.fit_standardizers(train_set, contexts)
    # start the heads at the label means so the ReLU mean head is not born dead
    ys = np.array([e.y_mean for e in train_set])
    ss = np.array([e.y_std for e in train_set])
    net.params["head_mu.b"][0] = max(float(ys.mean()), 1e-3)
    s_mean = max(float(ss.mean()), 1e-3)
    net.params["head_sigma.b"][0] = s_mean + math.log(-math.expm1(-s_mean))

    hist = TrainHistory(n_train=len(train_set), n_val=len(val_set))
    m = {k: np.zeros_like(v) for k, v in net.params.items()}
    v = {k: np.zeros_like(p) for k, p in net.params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    best = (math.inf, -1, None)
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = [train_set[i] for i in perm[start:start + cfg.batch_size]]
            value, grads = _loss_and_grads(net, batch, contexts, True, rng)
            total += value * len(batch)
            step += 1
            c1 = 1.0 - b1**step
            c2 = 1.0 - b2**step
            for k, p in net.params.items():
                g = grads[k]
                m[k] = b1 * m[k] + (1.0 - b1) * g
                v[k] = b2 * v[k] + (1.0 - b2) * g * g
                p *= 1.0 - cfg.learn_rate * cfg.weight_decay
                p -= cfg.learn_rate * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
        hist.train_loss.append(total / len(train_set))
        val = loss(net, val_set, contexts)
        hist.val_loss.append(val)
        if val < best[0]:
            best = (val, epoch, {k: p.copy() for k, p in net.params.items()})
        elif epoch - best[1] >= cfg.patience:
            log.debug("early stop at epoch %d (best %d)", epoch, best[1])
            break
    net.params = best[2]
    hist.best_epoch = best[1]
    return net, hist


def examples_from_samples(samples) -> list[TrainingExample]:
    """Convert labelled samples (anything with matrix_id/xm/y_mean/y_std) to examples."""
    return [TrainingExample(s.matrix_id, encode_params(s.xm), float(s.y_mean), float(s.y_std)) for s in samples]


# -- gradient verification ---------------------------------------------------

def grad_check(net: SurrogateNet, example: TrainingExample, contexts, probe_count: int = 50,
               step: float = 1e-6, seed: int = 0) -> float:
    """Max relative error of analytic vs central-difference gradients.

    Probes ``probe_count`` random parameter entries plus every component of
    the parameter-vector input xm.
    """
    rng = np.random.default_rng(seed)
    batch = [example]
    _, grads = _loss_and_grads(net, batch, contexts, False, None)

    def rel_err(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-6)

    worst = 0.0
    names = list(net.params)
    sizes = np.array([net.params[k].size for k in names], dtype=float)
    for _ in range(probe_count):
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = np.unravel_index(rng.integers(net.params[k].size), net.params[k].shape)
        p = net.params[k]
        orig = p[idx]
        p[idx] = orig + step
        lp = loss(net, batch, contexts)
        p[idx] = orig - step
        lm = loss(net, batch, contexts)
        p[idx] = orig
        worst = max(worst, rel_err(grads[k][idx], (lp - lm) / (2 * step)))

    ctx = contexts[example.matrix_id]
    mu, sigma, cache = net.forward([ctx], example.xm[None, :])
    _, dxm = net.backward(cache, 2.0 * (mu - example.y_mean), 2.0 * (sigma - example.y_std), need_params=False)
    for j in range(len(example.xm)):
        xp = example.xm.copy()
        xp[j] += step
        xm_ = example.xm.copy()
        xm_[j] -= step
        lp = loss(net, [TrainingExample(example.matrix_id, xp, example.y_mean, example.y_std)], contexts)
        lm = loss(net, [TrainingExample(example.matrix_id, xm_, example.y_mean, example.y_std)], contexts)
        worst = max(worst, rel_err(dxm[0, j], (lp - lm) / (2 * step)))
    return worst
