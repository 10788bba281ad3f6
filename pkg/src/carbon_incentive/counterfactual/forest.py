"""Random-forest classifier (Gini, bootstrap, random feature subsets)."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .._rng import stream_key


class DegenerateLabelsError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    max_depth: Optional[int] = 16
    min_leaf: int = 5
    features_per_split: Optional[int] = None  # default: ceil(sqrt(n_features))
    bootstrap: bool = True
    max_bins: int = 64
    seed: int = 0


@dataclass
class Tree:
    """Flat array tree. ``feature < 0`` marks a leaf; ``value`` rows sum to 1."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            n = node[active]
            go_left = X[active, self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        # argmax picks the lowest class index on ties
        return self.value[self.apply(X)].argmax(axis=1)


def _bin_edges(x: np.ndarray, max_bins: int) -> np.ndarray:
    """Split thresholds for one feature: midpoints between adjacent candidate values."""
    uniq = np.unique(x)
    if len(uniq) > max_bins:
        uniq = np.unique(np.quantile(x, np.linspace(0, 1, max_bins + 1), method="nearest"))
    return (uniq[:-1] + uniq[1:]) / 2


def _grow(Xb, y, n_classes, edges, params: ForestParams, mtry: int, rng) -> Tree:
    """Grow one tree breadth-first, splitting every open node of a level at once."""
    n, n_feat = Xb.shape
    width = max(len(e) for e in edges) + 1
    C = n_classes
    max_depth = params.max_depth if params.max_depth is not None else np.iinfo(np.int64).max

    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros((cap, C))
    value[0] = np.bincount(y, minlength=C) / n
    n_nodes = 1

    node_of = np.zeros(n, dtype=np.int64)  # position among the open nodes, -1 once settled
    open_ids = np.array([0])
    depth = 0
    while open_ids.size and depth < max_depth:
        k = open_ids.size
        live = node_of >= 0
        s_node, s_y = node_of[live], y[live]
        rows = np.flatnonzero(live)
        counts = np.bincount(s_node * C + s_y, minlength=k * C).reshape(k, C)
        size = counts.sum(axis=1)
        splittable = (size >= 2 * params.min_leaf) & (counts.max(axis=1) < size)
        parent_imp = size - (counts.astype(float) ** 2).sum(axis=1) / np.maximum(size, 1)

        cand = np.argsort(rng.random((k, n_feat)), axis=1)[:, :mtry]
        best_imp = np.full(k, np.inf)
        best_f = np.full(k, -1)
        best_b = np.zeros(k, dtype=np.int64)
        # histograms only for nodes that may split, indexed compactly
        act = np.flatnonzero(splittable)
        ka = act.size
        compact = np.full(k, -1)
        compact[act] = np.arange(ka)
        sel = splittable[s_node]
        a_node, a_y, a_rows = compact[s_node[sel]], s_y[sel], rows[sel]
        a_counts, a_size = counts[act], size[act]
        for slot in range(mtry if ka else 0):
            f = cand[act, slot]
            b = Xb[a_rows, f[a_node]]
            hist = np.bincount((a_node * width + b) * C + a_y, minlength=ka * width * C).reshape(ka, width, C)
            cl = np.cumsum(hist, axis=1)[:, :-1]
            nl = cl.sum(axis=2)
            nr = a_size[:, None] - nl
            ok = (nl >= params.min_leaf) & (nr >= params.min_leaf)
            cr = a_counts[:, None, :] - cl
            with np.errstate(divide="ignore", invalid="ignore"):
                imp = (nl - (cl**2).sum(axis=2) / nl) + (nr - (cr**2).sum(axis=2) / nr)
            imp = np.where(ok, imp, np.inf)
            bb = imp.argmin(axis=1)
            bi = imp[np.arange(ka), bb]
            better = bi < best_imp[act] - 1e-12
            best_imp[act] = np.where(better, bi, best_imp[act])
            best_f[act] = np.where(better, f, best_f[act])
            best_b[act] = np.where(better, bb, best_b[act])

        split = splittable & np.isfinite(best_imp) & (best_imp < parent_imp - 1e-12)
        sp = np.flatnonzero(split)
        if sp.size == 0:
            break
        parents = open_ids[sp]
        feature[parents] = best_f[sp]
        threshold[parents] = [edges[f][b] for f, b in zip(best_f[sp], best_b[sp])]
        left[parents] = n_nodes + 2 * np.arange(sp.size)
        right[parents] = left[parents] + 1
        new_open = n_nodes + np.arange(2 * sp.size)
        n_nodes += 2 * sp.size
        next_pos = np.full(k, -1)
        next_pos[sp] = np.arange(sp.size)

        # route samples: the left child keeps bins <= best_b
        goes = split[s_node]
        is_left = Xb[rows, np.where(goes, best_f[s_node], 0)] <= best_b[s_node]
        child_pos = 2 * next_pos[s_node] + (~is_left)
        node_of = np.full(n, -1)
        node_of[rows[goes]] = child_pos[goes]
        cc = np.bincount(child_pos[goes] * C + s_y[goes], minlength=new_open.size * C).reshape(-1, C)
        value[new_open] = cc / cc.sum(axis=1, keepdims=True)
        open_ids = new_open
        depth += 1

    return Tree(feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes])



@dataclass
class RandomForest:
    params: ForestParams = field(default_factory=ForestParams)
    n_classes: int = 4
    trees: list = field(default_factory=list)

    def fit(self, X, y, threads: int = 1) -> "RandomForest":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=np.int64)
        if len(np.unique(y)) < 2:
            raise DegenerateLabelsError("degenerate labels: training data has a single class")
        p = self.params
        n, n_feat = X.shape
        mtry = p.features_per_split or max(1, math.ceil(math.sqrt(n_feat)))
        mtry = min(mtry, n_feat)
        edges = [_bin_edges(X[:, j], p.max_bins) for j in range(n_feat)]
        Xb = np.column_stack([np.searchsorted(e, X[:, j], side="left") for j, e in enumerate(edges)]).astype(np.int64)

        def one(i):
            rng = np.random.default_rng(stream_key(p.seed, f"tree-{i}"))
            rows = rng.integers(0, n, n) if p.bootstrap else np.arange(n)
            return _grow(Xb[rows], y[rows], self.n_classes, edges, p, mtry, rng)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                self.trees = list(pool.map(one, range(p.n_trees)))
        else:
            self.trees = [one(i) for i in range(p.n_trees)]
        return self

    def votes(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        v = np.zeros((len(X), self.n_classes), dtype=np.int64)
        rows = np.arange(len(X))
        for tree in self.trees:
            np.add.at(v, (rows, tree.predict(X)), 1)
        return v

    def predict(self, X) -> np.ndarray:
        """Majority vote; ties go to the lowest class index."""
        return self.votes(X).argmax(axis=1)

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return sum(t.value[t.apply(X)] for t in self.trees) / len(self.trees)
