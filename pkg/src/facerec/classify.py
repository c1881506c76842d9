"""Decision forests and k-nearest-neighbour classification.

Trees are CART classifiers grown greedily on Gini impurity. A forest bags
``n_trees`` of them; every tree draws its bootstrap sample and feature
subsets from its own seed, so the trained forest does not depend on how
many workers built it.
"""

from __future__ import annotations

import logging
import math
import multiprocessing as mp
import os
import struct
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .imaging import PathLike

logger = logging.getLogger(__name__)

FOREST_MAGIC = b"FRFT"
FOREST_VERSION = 1


class ClassifierParamError(ValueError):
    pass


@dataclass
class TreeNode:
    """Internal node when ``proba`` is None, leaf otherwise.

    Samples with ``x[feature] <= threshold`` go left.
    """

    feature: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    proba: Optional[np.ndarray] = None

    @property
    def is_leaf(self) -> bool:
        return self.proba is not None


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    mtry: Optional[int] = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ClassifierParamError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ClassifierParamError("max_depth must be >= 0")
        if self.min_samples_split < 2:
            raise ClassifierParamError("min_samples_split must be >= 2")

    def resolved_mtry(self, dim: int) -> int:
        m = self.mtry if self.mtry is not None else int(math.ceil(math.sqrt(dim)))
        if not 1 <= m <= dim:
            raise ClassifierParamError(f"mtry must lie in [1, {dim}], got {m}")
        return m


@dataclass
class Forest:
    trees: list
    n_classes: int
    n_features: int
    params: ForestParams
    tree_seeds: list = field(default_factory=list)


@dataclass(frozen=True)
class KnnParams:
    k: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ClassifierParamError("k must be >= 1")


def _check_data(data, labels, n_classes=None):
    X = np.asarray(data, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ClassifierParamError("training data must be a non-empty 2-D array")
    if y.shape != (X.shape[0],):
        raise ClassifierParamError("labels must have one entry per sample")
    if not np.issubdtype(y.dtype, np.integer):
        if np.all(np.mod(y, 1) == 0):
            y = y.astype(np.intp)
        else:
            raise ClassifierParamError("labels must be integer class ids")
    if y.min() < 0:
        raise ClassifierParamError("labels must be >= 0")
    if n_classes is None:
        n_classes = int(y.max()) + 1
    elif y.max() >= n_classes:
        raise ClassifierParamError("label out of range for n_classes")
    return X, y.astype(np.intp), n_classes


def _gini(counts: np.ndarray, n: int) -> float:
    return 1.0 - float(np.dot(counts, counts)) / (n * n)


def _best_split(X, onehot, idx, feats):
    """Lowest weighted Gini split among ``feats`` or None if all are constant."""
    n = len(idx)
    if n < 2:
        return None
    sub = X[np.ix_(idx, feats)]
    order = np.argsort(sub, axis=0, kind="stable")
    vals = np.take_along_axis(sub, order, axis=0)
    left = np.cumsum(onehot[idx][order], axis=0)[:-1]  # (n-1, m, C)
    total = left[-1] + onehot[idx][order[-1]]
    right = total[None] - left
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    score = (
        n
        - np.einsum("imc,imc->im", left, left) / n_left
        - np.einsum("imc,imc->im", right, right) / n_right
    ) / n
    distinct = vals[:-1] < vals[1:]
    if not distinct.any():
        return None
    score = np.where(distinct, score, np.inf)
    # feature-major so ties go to the earliest drawn feature, then lowest value
    flat = int(np.argmin(score.T))
    j, i = divmod(flat, n - 1)
    lo, hi = vals[i, j], vals[i + 1, j]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return int(feats[j]), float(thr), float(score[i, j])


def train_tree(data, labels, params: ForestParams = ForestParams(), rng=None,
               n_classes: Optional[int] = None) -> TreeNode:
    X, y, n_classes = _check_data(data, labels, n_classes)
    if rng is None:
        rng = np.random.default_rng(params.seed)
    dim = X.shape[1]
    mtry = params.resolved_mtry(dim)
    onehot = np.eye(n_classes)[y]

    root = TreeNode()
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = np.bincount(y[idx], minlength=n_classes).astype(np.float64)
        n = len(idx)
        stop = (
            np.count_nonzero(counts) <= 1
            or (params.max_depth is not None and depth >= params.max_depth)
            or n < params.min_samples_split
        )
        split = None
        if not stop:
            perm = rng.permutation(dim)
            # keep drawing feature batches while every drawn feature is constant
            for start in range(0, dim, mtry):
                split = _best_split(X, onehot, idx, perm[start : start + mtry])
                if split is not None:
                    break
        if split is None:
            node.proba = counts / n
            continue
        feat, thr, score = split
        assert score <= _gini(counts, n) + 1e-12, "split increased impurity"
        go_left = X[idx, feat] <= thr
        node.feature, node.threshold = feat, thr
        node.left, node.right = TreeNode(), TreeNode()
        # right pushed first so the left subtree is built first
        stack.append((node.right, idx[~go_left], depth + 1))
        stack.append((node.left, idx[go_left], depth + 1))
    return root


def tree_predict_proba(root: TreeNode, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = None
    stack = [(root, np.arange(X.shape[0]))]
    while stack:
        node, idx = stack.pop()
        if node.is_leaf:
            if out is None:
                out = np.zeros((X.shape[0], len(node.proba)))
            out[idx] = node.proba
            continue
        go_left = X[idx, node.feature] <= node.threshold
        stack.append((node.left, idx[go_left]))
        stack.append((node.right, idx[~go_left]))
    return out


def tree_predict(root: TreeNode, X) -> np.ndarray:
    return np.argmax(tree_predict_proba(root, np.atleast_2d(X)), axis=1)


# ---------------------------------------------------------------------------
# forests

_SHARED: dict = {}


def tree_seeds(seed: int, n_trees: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n_trees, dtype=np.uint64)]


def _grow(X, y, params, n_classes, seed) -> TreeNode:
    rng = np.random.default_rng(seed)
    n = len(y)
    idx = rng.integers(0, n, n) if params.bootstrap else np.arange(n)
    return train_tree(X[idx], y[idx], params, rng, n_classes)


def _grow_batch(seeds):
    X, y, params, n_classes = (_SHARED[k] for k in ("X", "y", "params", "n_classes"))
    return [_grow(X, y, params, n_classes, s) for s in seeds]


def _init_shared(X, y, params, n_classes):
    _SHARED.update(X=X, y=y, params=params, n_classes=n_classes)


def train_forest(data, labels, params: ForestParams = ForestParams(), threads: int = 1,
                 n_classes: Optional[int] = None) -> Forest:
    """Bagged CART ensemble.

    ``threads > 1`` grows trees in that many worker processes; the result is
    identical to the single-worker build.
    """
    X, y, n_classes = _check_data(data, labels, n_classes)
    params.resolved_mtry(X.shape[1])
    seeds = tree_seeds(params.seed, params.n_trees)
    workers = max(1, min(int(threads), params.n_trees))
    if workers == 1:
        trees = [_grow(X, y, params, n_classes, s) for s in seeds]
    else:
        batches = [seeds[i::workers] for i in range(workers)]
        if "fork" in mp.get_all_start_methods():
            _init_shared(X, y, params, n_classes)
            ctx, init, initargs = mp.get_context("fork"), None, ()
        else:
            ctx, init, initargs = mp.get_context(), _init_shared, (X, y, params, n_classes)
        try:
            with ProcessPoolExecutor(workers, mp_context=ctx, initializer=init,
                                     initargs=initargs) as pool:
                results = list(pool.map(_grow_batch, batches))
        finally:
            _SHARED.clear()
        # undo the round-robin batching so trees keep seed order
        trees = [None] * len(seeds)
        for w, batch in enumerate(results):
            for j, tree in enumerate(batch):
                trees[w + j * workers] = tree
    return Forest(trees, n_classes, X.shape[1], params, seeds)


def predict_proba(forest: Forest, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != forest.n_features:
        raise ClassifierParamError(
            f"expected {forest.n_features} features, got {X.shape[1]}"
        )
    total = np.zeros((X.shape[0], forest.n_classes))
    for tree in forest.trees:
        total += tree_predict_proba(tree, X)
    return total / len(forest.trees)


def predict(forest: Forest, X) -> np.ndarray:
    """Argmax of the averaged leaf distributions; ties go to the lowest class."""
    return np.argmax(predict_proba(forest, X), axis=1)


def predict_one(forest: Forest, x) -> int:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ClassifierParamError("predict_one expects a single feature vector")
    return int(predict(forest, x[None, :])[0])


# ---------------------------------------------------------------------------
# kNN


def _knn_labels(train, labels, k, queries):
    diff = queries[:, None, :] - train[None, :, :]
    d = np.einsum("qnd,qnd->qn", diff, diff)
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    n_classes = int(labels.max()) + 1
    out = np.empty(len(queries), dtype=np.intp)
    for q, nb in enumerate(nearest):
        out[q] = int(np.argmax(np.bincount(labels[nb], minlength=n_classes)))
    return out


def knn_predict(train_data, train_labels, p: KnnParams, queries) -> np.ndarray:
    X, y, _ = _check_data(train_data, train_labels)
    if p.k > len(y):
        raise ClassifierParamError(f"k={p.k} exceeds the {len(y)} training samples")
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if Q.shape[1] != X.shape[1]:
        raise ClassifierParamError("query dimensionality differs from training data")
    out = np.empty(len(Q), dtype=np.intp)
    # bound the (q, n, d) difference tensor
    step = max(1, 2_000_000 // max(1, X.shape[0] * X.shape[1]))
    for s in range(0, len(Q), step):
        out[s : s + step] = _knn_labels(X, y, p.k, Q[s : s + step])
    return out


def knn_classify(train_data, train_labels, p: KnnParams, x) -> int:
    """Majority label of the ``k`` nearest training points.

    Equal distances favour the lower training index, tied votes the lower
    class id.
    """
    try:
        empty = len(train_data) == 0
    except TypeError:
        empty = False
    if empty:
        raise ClassifierParamError("training set is empty")
    return int(knn_predict(train_data, train_labels, p, np.asarray(x)[None, :])[0])


# ---------------------------------------------------------------------------
# forest files
#
# header: "FRFT", u32 version, u32 n_trees, i32 max_depth (-1 = unlimited),
#         u32 min_samples_split, u32 mtry (0 = ceil(sqrt(dim))), u8 bootstrap,
#         u64 seed, u32 n_classes, u32 n_features
# per tree: u64 tree seed, u32 node count, nodes in pre-order:
#         u8 0 (leaf) + n_classes f64 probabilities, or
#         u8 1 (split) + u32 feature + f64 threshold
# all little-endian

_HEAD = struct.Struct("<IIiIIBQII")


def forest_to_bytes(forest: Forest) -> bytes:
    p = forest.params
    parts = [
        FOREST_MAGIC,
        _HEAD.pack(
            FOREST_VERSION,
            p.n_trees,
            -1 if p.max_depth is None else p.max_depth,
            p.min_samples_split,
            0 if p.mtry is None else p.mtry,
            int(p.bootstrap),
            p.seed,
            forest.n_classes,
            forest.n_features,
        ),
    ]
    for seed, tree in zip(forest.tree_seeds, forest.trees):
        nodes = []
        stack = [tree]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                nodes.append(b"\x00" + np.asarray(node.proba, dtype="<f8").tobytes())
            else:
                nodes.append(struct.pack("<BId", 1, node.feature, node.threshold))
                stack.append(node.right)
                stack.append(node.left)
        parts.append(struct.pack("<QI", seed, len(nodes)))
        parts.extend(nodes)
    return b"".join(parts)


def forest_from_bytes(buf: bytes) -> Forest:
    if buf[:4] != FOREST_MAGIC:
        raise ClassifierParamError("not a forest file (bad magic)")
    (version, n_trees, max_depth, mss, mtry, bootstrap, seed, n_classes,
     n_features) = _HEAD.unpack_from(buf, 4)
    if version != FOREST_VERSION:
        raise ClassifierParamError(f"unsupported forest version {version}")
    params = ForestParams(
        n_trees=n_trees,
        max_depth=None if max_depth < 0 else max_depth,
        min_samples_split=mss,
        mtry=None if mtry == 0 else mtry,
        bootstrap=bool(bootstrap),
        seed=seed,
    )
    pos = 4 + _HEAD.size
    leaf_bytes = 8 * n_classes
    trees, seeds = [], []

    def read_node():
        nonlocal pos
        kind = buf[pos]
        pos += 1
        if kind == 0:
            proba = np.frombuffer(buf, dtype="<f8", count=n_classes, offset=pos).astype(np.float64)
            pos += leaf_bytes
            return TreeNode(proba=proba)
        feat, thr = struct.unpack_from("<Id", buf, pos)
        pos += 12
        node = TreeNode(feature=feat, threshold=thr)
        node.left = read_node()
        node.right = read_node()
        return node

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 10_000))
    try:
        for _ in range(n_trees):
            tseed, _count = struct.unpack_from("<QI", buf, pos)
            pos += 12
            seeds.append(tseed)
            trees.append(read_node())
    finally:
        sys.setrecursionlimit(limit)
    if pos != len(buf):
        raise ClassifierParamError("trailing bytes after forest data")
    return Forest(trees, n_classes, n_features, params, seeds)


def save_forest(path: PathLike, forest: Forest) -> None:
    Path(path).write_bytes(forest_to_bytes(forest))


def load_forest(path: PathLike) -> Forest:
    return forest_from_bytes(Path(path).read_bytes())


def default_threads() -> int:
    return os.cpu_count() or 1
