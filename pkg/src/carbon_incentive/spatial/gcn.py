"""Dual-channel graph convolutional network in numpy with hand-written gradients.

Each channel applies two graph convolutions, ``relu(A_hat @ H @ W + b)``; the
origin channel uses the out-edge adjacency and the destination channel its
transpose. Channel outputs are concatenated and passed through a ReLU dense
layer (the zone embedding) and a linear output layer.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .._rng import stream_key
from .graphs import ZoneGraph

CHANNELS = ("o", "d")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GCNParams:
    conv_widths: tuple = (64, 128)
    dense_widths: tuple = (128, 5)
    dropout: float = 0.35
    lr: float = 0.001
    max_iters: int = 500
    patience: int = 10
    optimizer: str = "gd"  # "gd" or "adam"
    batch_graphs: Optional[int] = None  # graphs per step; None = all training graphs
    split: str = "day"  # "day" or "zone"
    test_fraction: float = 0.2
    dtype: str = "float32"  # training precision; gradient checks run in float64
    seed: int = 0


def normalized_adjacency(adj: sparse.spmatrix) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    """Origin- and destination-role propagation matrices.

    ``D_out^-1/2 (A + I) D_in^-1/2`` and its transpose, where ``D_out`` and
    ``D_in`` hold the row and column sums of ``A + I``.
    """
    n = adj.shape[0]
    m = sparse.csr_matrix(adj, dtype=float) + sparse.identity(n, format="csr")
    r = np.asarray(m.sum(axis=1)).ravel() ** -0.5
    c = np.asarray(m.sum(axis=0)).ravel() ** -0.5
    a_o = sparse.diags(r) @ m @ sparse.diags(c)
    return a_o.tocsr(), a_o.T.tocsr()


def init_params(n_in: int, params: GCNParams = GCNParams(), seed: Optional[int] = None) -> dict:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(stream_key(params.seed if seed is None else seed, "gcn-init"))

    def glorot(a, b):
        lim = np.sqrt(6.0 / (a + b))
        return rng.uniform(-lim, lim, size=(a, b))

    h1, h2 = params.conv_widths
    d1, d2 = params.dense_widths
    p = {}
    for ch in CHANNELS:
        p[f"W1{ch}"] = glorot(n_in, h1)
        p[f"b1{ch}"] = np.zeros(h1)
        p[f"W2{ch}"] = glorot(h1, h2)
        p[f"b2{ch}"] = np.zeros(h2)
    p["W3"] = glorot(2 * h2, d1)
    p["b3"] = np.zeros(d1)
    p["W4"] = glorot(d1, d2)
    p["b4"] = np.zeros(d2)
    return p


@dataclass
class Batch:
    """Block-diagonal union of graphs."""

    a_o: sparse.csr_matrix
    a_d: sparse.csr_matrix
    x: np.ndarray
    y: np.ndarray
    graph_of: np.ndarray
    zone_of: np.ndarray

    @classmethod
    def from_graphs(cls, graphs: Sequence[ZoneGraph], x_scale=None, y_scale=None, dtype=np.float64) -> "Batch":
        ao, ad = zip(*(normalized_adjacency(g.adjacency()) for g in graphs))
        x = np.vstack([g.features for g in graphs])
        y = np.vstack([g.targets for g in graphs])
        if x_scale is not None:
            x = x_scale.transform(x)
        if y_scale is not None:
            y = y_scale.transform(y)
        graph_of = np.repeat(np.arange(len(graphs)), [g.n_nodes for g in graphs])
        zone_of = np.concatenate([g.zone_ids for g in graphs])
        a_o = sparse.block_diag(ao, format="csr").astype(dtype)
        a_d = sparse.block_diag(ad, format="csr").astype(dtype)
        return cls(a_o, a_d, x.astype(dtype), y.astype(dtype), graph_of, zone_of)


def _check_dims(params: dict, x: np.ndarray) -> None:
    expected = params["W1o"].shape[0]
    if x.ndim != 2 or x.shape[1] != expected:
        raise ValueError(f"feature dimension mismatch: expected (n, {expected}), got {x.shape}")


def forward(params: dict, a_o, a_d, x, dropout: float = 0.0, rng=None, swap: bool = False):
    """Return ``(output, embedding, cache)``.

    Dropout (inverted) is applied after every hidden ReLU when ``rng`` is
    given; ``swap`` feeds each channel the other channel's adjacency.
    """
    _check_dims(params, x)
    if swap:
        a_o, a_d = a_d, a_o
    train = rng is not None and dropout > 0

    def drop(h):
        if not train:
            return h, None
        mask = rng.random(h.shape, dtype=np.float32) >= dropout
        mask = mask.astype(h.dtype)
        mask *= 1.0 / (1.0 - dropout)
        return h * mask, mask

    cache = {"x": x, "A": {"o": a_o, "d": a_d}}
    outs = []
    for ch, a in (("o", a_o), ("d", a_d)):
        # aggregate first: both layers widen, so A @ H is the cheaper product
        ax = a @ x
        p1 = ax @ params[f"W1{ch}"] + params[f"b1{ch}"]
        h1, m1 = drop(np.maximum(p1, 0.0))
        ah1 = a @ h1
        p2 = ah1 @ params[f"W2{ch}"] + params[f"b2{ch}"]
        h2, m2 = drop(np.maximum(p2, 0.0))
        cache[ch] = (ax, p1, h1, m1, ah1, p2, h2, m2)
        outs.append(h2)
    h = np.hstack(outs)
    p3 = h @ params["W3"] + params["b3"]
    z = np.maximum(p3, 0.0)
    z_d, m3 = drop(z)
    out = z_d @ params["W4"] + params["b4"]
    cache.update(h=h, p3=p3, z=z_d, m3=m3)
    return out, z, cache


def backward(params: dict, cache: dict, d_out: np.ndarray) -> dict:
    """Gradients of a loss with ``dL/d(output) = d_out``."""
    g = {}
    g["W4"] = cache["z"].T @ d_out
    g["b4"] = d_out.sum(axis=0)
    dz = d_out @ params["W4"].T
    if cache["m3"] is not None:
        dz = dz * cache["m3"]
    dp3 = dz * (cache["p3"] > 0)
    g["W3"] = cache["h"].T @ dp3
    g["b3"] = dp3.sum(axis=0)
    dh = dp3 @ params["W3"].T
    w2 = params["W2o"].shape[1]
    for i, ch in enumerate(CHANNELS):
        a = cache["A"][ch]
        ax, p1, h1, m1, ah1, p2, h2, m2 = cache[ch]
        dh2 = dh[:, i * w2:(i + 1) * w2]
        if m2 is not None:
            dh2 = dh2 * m2
        dp2 = dh2 * (p2 > 0)
        g[f"b2{ch}"] = dp2.sum(axis=0)
        g[f"W2{ch}"] = ah1.T @ dp2
        dh1 = a.T @ (dp2 @ params[f"W2{ch}"].T)
        if m1 is not None:
            dh1 = dh1 * m1
        dp1 = dh1 * (p1 > 0)
        g[f"b1{ch}"] = dp1.sum(axis=0)
        g[f"W1{ch}"] = ax.T @ dp1
    return g


def mse_loss(out, y, mask=None):
    """Mean squared error over (masked) nodes and outputs, and its gradient."""
    r = out - y
    if mask is not None:
        r = r * mask[:, None]
        n = mask.sum() * y.shape[1]
    else:
        n = r.size
    return float((r**2).sum() / n), r * (2.0 / n)


class StandardScaler:
    def __init__(self, x):
        self.mean = x.mean(axis=0)
        sd = x.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)

    def transform(self, x):
        return (x - self.mean) / self.scale

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}


class MinMaxScaler:
    def __init__(self, y):
        self.lo = y.min(axis=0)
        rng = y.max(axis=0) - self.lo
        self.range = np.where(rng > 0, rng, 1.0)

    def transform(self, y):
        return (y - self.lo) / self.range

    def inverse(self, y):
        return y * self.range + self.lo

    def to_dict(self):
        return {"min": self.lo.tolist(), "range": self.range.tolist()}


@dataclass
class GCNModel:
    params: dict
    config: GCNParams
    x_scale: StandardScaler
    y_scale: MinMaxScaler
    trace: list = field(default_factory=list)  # (iteration, train_loss, test_mse)
    best_iteration: int = 0
    iterations_run: int = 0
    metrics: dict = field(default_factory=dict)
    train_graphs: list = field(default_factory=list)
    test_graphs: list = field(default_factory=list)

    def forward(self, graphs: Sequence[ZoneGraph]):
        """Eval-mode scaled predictions and embeddings for a list of graphs."""
        b = Batch.from_graphs(graphs, self.x_scale, self.y_scale, self.params["W3"].dtype)
        out, emb, _ = forward(self.params, b.a_o, b.a_d, b.x)
        return out, emb, b

    def zone_embeddings(self, graphs: Sequence[ZoneGraph], chunk: int = 32) -> np.ndarray:
        """Mean penultimate activation per zone across ``graphs``."""
        n = graphs[0].n_nodes
        total = np.zeros((n, self.params["W3"].shape[1]))
        for i in range(0, len(graphs), chunk):
            part = graphs[i:i + chunk]
            _, emb, b = self.forward(part)
            np.add.at(total, b.zone_of, emb)
        return total / len(graphs)

    def summary(self) -> dict:
        return {
            "config": asdict(self.config),
            "best_iteration": self.best_iteration,
            "iterations_run": self.iterations_run,
            "test_metrics": self.metrics,
            "trace": [{"iteration": i, "train_loss": tl, "test_mse": te} for i, tl, te in self.trace],
            "target_scaler": self.y_scale.to_dict(),
        }


def gcn_forward(model: GCNModel, graph: ZoneGraph, mode: str = "eval", rng=None):
    """Per-node outputs (scaled target units) and 128-dim embeddings for one graph."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    b = Batch.from_graphs([graph], model.x_scale, model.y_scale, model.params["W3"].dtype)
    if mode == "train" and rng is None:
        rng = np.random.default_rng(stream_key(model.config.seed, "gcn-forward"))
    out, emb, _ = forward(model.params, b.a_o, b.a_d, b.x, model.config.dropout, rng if mode == "train" else None)
    return out, emb


def regression_metrics(pred, y, mask=None) -> dict:
    r = pred - y
    if mask is not None:
        r = r[mask]
    mse = float(np.mean(r**2))
    return {"MSE": mse, "RMSE": float(np.sqrt(mse)), "MAE": float(np.mean(np.abs(r)))}


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps, self.t = lr, b1, b2, eps, 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1**self.t)
            vh = self.v[k] / (1 - self.b2**self.t)
            params[k] -= self.lr * mh / (np.sqrt(vh) + self.eps)


def gcn_train(graphs: Sequence[ZoneGraph], config: GCNParams = GCNParams()) -> GCNModel:
    """Train on 80% of the graphs (or zones) and early-stop on the held-out MSE.

    Returns the parameters with the lowest held-out MSE seen, including the
    untrained initialisation (iteration 0).
    """
    graphs = list(graphs)
    if len(graphs) < 2:
        raise ValueError("need at least 2 graphs")
    if not all(np.isfinite(g.targets).all() for g in graphs):
        raise ValueError("targets must be finite")
    rng = np.random.default_rng(stream_key(config.seed, "gcn-split"))
    n_nodes = graphs[0].n_nodes
    if config.split == "day":
        perm = rng.permutation(len(graphs))
        n_test = min(max(1, int(round(config.test_fraction * len(graphs)))), len(graphs) - 1)
        test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
        train_g = [graphs[i] for i in train_idx]
        test_g = [graphs[i] for i in test_idx]
        train_zone = test_zone = None
    elif config.split == "zone":
        perm = rng.permutation(n_nodes)
        n_test = max(1, int(round(config.test_fraction * n_nodes)))
        test_zone = np.zeros(n_nodes, dtype=bool)
        test_zone[perm[:n_test]] = True
        train_zone = ~test_zone
        train_g = test_g = graphs
    else:
        raise ValueError("split must be 'day' or 'zone'")

    def node_rows(gs, zone_mask):
        feats = np.vstack([g.features for g in gs])
        targ = np.vstack([g.targets for g in gs])
        if zone_mask is None:
            return feats, targ
        keep = np.tile(zone_mask, len(gs))
        return feats[keep], targ[keep]

    dtype = np.dtype(config.dtype)
    fx, fy = node_rows(train_g, train_zone)
    x_scale, y_scale = StandardScaler(fx), MinMaxScaler(fy)
    test_b = Batch.from_graphs(test_g, x_scale, y_scale, dtype)
    test_mask = None if test_zone is None else np.tile(test_zone, len(test_g)).astype(dtype)
    full_batch = config.batch_graphs is None or config.batch_graphs >= len(train_g)
    full_train = Batch.from_graphs(train_g, x_scale, y_scale, dtype) if full_batch else None
    train_mask = None if train_zone is None else np.tile(train_zone, len(train_g)).astype(dtype)

    params = {k: v.astype(dtype) for k, v in init_params(graphs[0].features.shape[1], config).items()}
    opt = _Adam(params, config.lr) if config.optimizer == "adam" else None
    drop_rng = np.random.default_rng(stream_key(config.seed, "gcn-dropout"))
    batch_rng = np.random.default_rng(stream_key(config.seed, "gcn-batches"))

    def test_mse(p):
        out, _, _ = forward(p, test_b.a_o, test_b.a_d, test_b.x)
        return mse_loss(out, test_b.y, test_mask)[0]

    best = test_mse(params)
    best_params, best_it = copy.deepcopy(params), 0
    trace = [(0, float("nan"), best)]
    wait = 0
    it = 0
    for it in range(1, config.max_iters + 1):
        if full_batch:
            b, mask = full_train, train_mask
        else:
            pick = np.sort(batch_rng.choice(len(train_g), config.batch_graphs, replace=False))
            b = Batch.from_graphs([train_g[i] for i in pick], x_scale, y_scale, dtype)
            mask = None if train_zone is None else np.tile(train_zone, len(pick)).astype(dtype)
        out, _, cache = forward(params, b.a_o, b.a_d, b.x, config.dropout, drop_rng)
        loss, d_out = mse_loss(out, b.y, mask)
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss is not finite at iteration {it}")
        grads = backward(params, cache, d_out)
        if opt is None:
            for k, g in grads.items():
                params[k] -= config.lr * g
        else:
            opt.step(params, grads)
        te = test_mse(params)
        if not np.isfinite(te):
            raise DivergenceError(f"test loss is not finite at iteration {it}")
        trace.append((it, loss, te))
        if te < best:
            best, best_params, best_it, wait = te, copy.deepcopy(params), it, 0
        else:
            wait += 1
            if wait >= config.patience:
                break

    out, _, _ = forward(best_params, test_b.a_o, test_b.a_d, test_b.x)
    metrics = regression_metrics(out, test_b.y, None if test_mask is None else test_mask.astype(bool))
    return GCNModel(
        best_params, config, x_scale, y_scale, trace, best_it, it, metrics,
        train_graphs=[g.date for g in train_g], test_graphs=[g.date for g in test_g],
    )


def _pre_activations(params, a_o, a_d, x):
    _, _, cache = forward(params, a_o, a_d, x)
    pre = [cache["p3"]]
    for ch in CHANNELS:
        pre += [cache[ch][1], cache[ch][5]]
    return np.concatenate([p.ravel() for p in pre])


def gradient_check(params: dict, graph: ZoneGraph, h: float = 1e-5, kink_tol: float = 1e-4,
                   nudge: float = 1e-2, max_nudges: int = 20, seed: int = 0) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The loss is the MSE against ``graph.targets`` on unscaled features. If some
    ReLU pre-activation sits within ``kink_tol`` of zero, where the derivative
    is undefined, the node features are nudged with small noise first, up to
    ``max_nudges`` times.
    """
    if graph.n_nodes > 6:
        raise ValueError("gradient check expects at most 6 nodes")
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    # dense propagation matrices: cheaper than sparse ones at this size
    a_o, a_d = (m.toarray() for m in normalized_adjacency(graph.adjacency()))
    x = np.array(graph.features, dtype=float)
    y = np.array(graph.targets, dtype=float)
    rng = np.random.default_rng(seed)
    for _ in range(max_nudges):
        # with all weights zero every gradient past the output bias vanishes, kinks or not
        if not _has_signal(params) or not (np.abs(_pre_activations(params, a_o, a_d, x)) < kink_tol).any():
            break
        x = x + nudge * rng.standard_normal(x.shape)

    def loss_of(p):
        out, _, _ = forward(p, a_o, a_d, x)
        return mse_loss(out, y)[0]

    out, _, cache = forward(params, a_o, a_d, x)
    grads = backward(params, cache, mse_loss(out, y)[1])
    worst = 0.0
    for k, w in params.items():
        flat = w.reshape(-1)
        gk = grads[k].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss_of(params)
            flat[i] = old - h
            lm = loss_of(params)
            flat[i] = old
            num = (lp - lm) / (2 * h)
            denom = max(abs(num), abs(gk[i]), 1e-6)
            worst = max(worst, abs(num - gk[i]) / denom)
    return worst


def _has_signal(params) -> bool:
    return any(np.any(v != 0) for k, v in params.items() if k.startswith("W"))
