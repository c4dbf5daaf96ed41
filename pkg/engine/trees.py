"""Gini decision trees and random forests over daily-score feature rows.

Labels are +1 (diagnosed) and -1 (healthy). Models persist to a flat text
format, one node per line:

    tree n_features=8 nodes=5
    0 split 3 0.125 1 2
    1 leaf -1
    ...

A forest file starts with a `forest ...` header followed by one `tree`
block per member.
"""

from __future__ import annotations
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .detect import NEGATIVE, POSITIVE
from .errors import DetectionError, ModelFormatError

log = logging.getLogger(__name__)

LEAF = -1


@dataclass(frozen=True)
class TreeNode:
    node_id: int
    feature: int = LEAF
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    label: int = NEGATIVE

    @property
    def is_leaf(self) -> bool:
        return self.feature == LEAF


@dataclass
class TreeModel:
    n_features: int
    nodes: List[TreeNode] = field(default_factory=list)

    def predict(self, features: np.ndarray) -> np.ndarray:
        X = _as_matrix(features, self.n_features)
        out = np.full(X.shape[0], NEGATIVE, dtype=np.int64)
        self._route(0, np.arange(X.shape[0]), X, out)
        return out

    def _route(self, node_id: int, rows: np.ndarray, X: np.ndarray, out: np.ndarray) -> None:
        node = self.nodes[node_id]
        if node.is_leaf:
            out[rows] = node.label
            return
        go_left = X[rows, node.feature] <= node.threshold
        if go_left.any():
            self._route(node.left, rows[go_left], X, out)
        if not go_left.all():
            self._route(node.right, rows[~go_left], X, out)

    def depth(self) -> int:
        def walk(node_id: int) -> int:
            node = self.nodes[node_id]
            if node.is_leaf:
                return 0
            return 1 + max(walk(node.left), walk(node.right))
        return walk(0)


@dataclass
class ForestModel:
    n_features: int
    trees: List[TreeModel] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)
    max_features: int = 0
    bootstrap: bool = True

    def votes(self, features: np.ndarray) -> np.ndarray:
        X = _as_matrix(features, self.n_features)
        total = np.zeros(X.shape[0], dtype=np.int64)
        for tree in self.trees:
            total += tree.predict(X)
        return total

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Majority vote; ties go to the healthy class."""
        return np.where(self.votes(features) > 0, POSITIVE, NEGATIVE)


Model = Union[TreeModel, ForestModel]


def _as_matrix(features: np.ndarray, n_features: int) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if n_features == 1 else X.reshape(1, -1)
    if X.shape[1] != n_features:
        raise DetectionError(f"model expects {n_features} features, got {X.shape[1]}")
    return X


def _check_training_set(features: np.ndarray, labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2:
        raise DetectionError("features must be a 2-D array")
    if X.shape[0] == 0 or X.shape[0] != y.shape[0]:
        raise DetectionError(f"{X.shape[0]} feature rows for {y.shape[0]} labels")
    if not np.isin(y, (POSITIVE, NEGATIVE)).all():
        raise DetectionError("labels must be +1 or -1")
    return X, y


# ---------------------------------------------------------------------------
# Split search
# ---------------------------------------------------------------------------

def _majority(y: np.ndarray) -> int:
    positives = int(np.sum(y == POSITIVE))
    return POSITIVE if positives > y.size - positives else NEGATIVE


def node_impurity(y: np.ndarray) -> float:
    """n * Gini(y); the split criterion sums this over both children."""
    n = y.size
    if n == 0:
        return 0.0
    pos = float(np.sum(y == POSITIVE))
    neg = n - pos
    return n - (pos * pos + neg * neg) / n


def best_split(
    X: np.ndarray,
    y: np.ndarray,
    features: Iterable[int],
    min_leaf: int,
) -> Optional[Tuple[int, float, float]]:
    """Exhaustive midpoint scan for the split minimizing summed child impurity.

    Both children must hold at least `min_leaf` rows and the split must
    strictly improve on the parent. Ties keep the first feature, then the
    lowest threshold.

    Returns:
        (feature, threshold, impurity) or None when no split qualifies
    """
    n = y.size
    best: Optional[Tuple[int, float, float]] = None
    best_impurity = node_impurity(y)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        pos = (y[order] == POSITIVE).astype(np.float64)

        n_left = np.arange(1, n, dtype=np.float64)
        pos_left = np.cumsum(pos)[:-1]
        neg_left = n_left - pos_left
        n_right = n - n_left
        pos_right = pos.sum() - pos_left
        neg_right = n_right - pos_right
        impurity = (
            n_left - (pos_left ** 2 + neg_left ** 2) / n_left
            + n_right - (pos_right ** 2 + neg_right ** 2) / n_right
        )

        valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n_right >= min_leaf)
        if not valid.any():
            continue
        candidates = np.flatnonzero(valid)
        i = int(candidates[np.argmin(impurity[candidates])])
        if impurity[i] < best_impurity:
            threshold = (xs[i] + xs[i + 1]) / 2.0
            if threshold >= xs[i + 1]:
                threshold = float(xs[i])
            best_impurity = float(impurity[i])
            best = (int(f), float(threshold), best_impurity)
    return best


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _grow(
    X: np.ndarray,
    y: np.ndarray,
    max_depth: int,
    min_leaf: int,
    max_features: int,
    rng: Optional[np.random.Generator],
) -> TreeModel:
    d = X.shape[1]
    tree = TreeModel(n_features=d)
    nodes: List[Optional[TreeNode]] = []

    def build(rows: np.ndarray, depth: int) -> int:
        node_id = len(nodes)
        nodes.append(None)
        ys = y[rows]
        label = _majority(ys)
        split = None
        pure = np.all(ys == ys[0])
        if depth < max_depth and not pure and rows.size >= 2 * min_leaf:
            if rng is not None and max_features < d:
                candidates = np.sort(rng.choice(d, size=max_features, replace=False))
            else:
                candidates = np.arange(d)
            split = best_split(X[rows], ys, candidates, min_leaf)
        if split is None:
            nodes[node_id] = TreeNode(node_id, label=label)
            return node_id
        f, threshold, _ = split
        go_left = X[rows, f] <= threshold
        left = build(rows[go_left], depth + 1)
        right = build(rows[~go_left], depth + 1)
        nodes[node_id] = TreeNode(node_id, f, threshold, left, right, label)
        return node_id

    build(np.arange(y.size), 0)
    tree.nodes = list(nodes)
    return tree


def train_tree(
    features: np.ndarray,
    labels: Sequence[int],
    max_depth: int = 8,
    min_leaf: int = 5,
) -> TreeModel:
    """Deterministic CART-style tree; a single-class set yields one leaf."""
    X, y = _check_training_set(features, labels)
    tree = _grow(X, y, max_depth, min_leaf, X.shape[1], None)
    log.debug(f"Trained tree: {len(tree.nodes)} nodes, depth {tree.depth()}")
    return tree


def default_max_features(n_features: int) -> int:
    return max(1, math.ceil(math.sqrt(n_features)))


def _train_member(
    tree_seed: int,
    X: np.ndarray,
    y: np.ndarray,
    max_depth: int,
    min_leaf: int,
    max_features: int,
    bootstrap: bool,
) -> TreeModel:
    rng = np.random.default_rng(tree_seed)
    if bootstrap:
        rows = rng.integers(0, y.size, size=y.size)
        X, y = X[rows], y[rows]
    return _grow(X, y, max_depth, min_leaf, max_features, rng)


def train_forest(
    features: np.ndarray,
    labels: Sequence[int],
    n_trees: int = 100,
    max_depth: int = 8,
    min_leaf: int = 5,
    max_features: int = 0,
    bootstrap: bool = True,
    seed: int = 42,
    workers: int = 1,
) -> ForestModel:
    """Bagged trees with a fresh feature subset drawn at every split.

    Tree t draws from `default_rng(seed + t)`. `max_features` of 0 means
    ceil(sqrt(d)). The result does not depend on `workers`.
    """
    X, y = _check_training_set(features, labels)
    d = X.shape[1]
    m = default_max_features(d) if max_features <= 0 else min(max_features, d)
    seeds = [seed + t for t in range(n_trees)]
    task = partial(_train_member, X=X, y=y, max_depth=max_depth, min_leaf=min_leaf,
                   max_features=m, bootstrap=bootstrap)

    if workers <= 1 or n_trees < 2:
        trees = [task(s) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(task, seeds))

    log.info(f"Trained forest of {n_trees} trees on {y.size} rows ({m} of {d} features per split)")
    return ForestModel(d, trees, seeds, m, bootstrap)


def predict(model: Model, features: np.ndarray) -> np.ndarray:
    return model.predict(features)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _tree_lines(tree: TreeModel) -> List[str]:
    lines = []
    for node in tree.nodes:
        if node.is_leaf:
            lines.append(f"{node.node_id} leaf {node.label}")
        else:
            lines.append(f"{node.node_id} split {node.feature} {node.threshold!r} {node.left} {node.right}")
    return lines


def dumps_model(model: Model) -> str:
    if isinstance(model, TreeModel):
        lines = [f"tree n_features={model.n_features} nodes={len(model.nodes)}"]
        lines += _tree_lines(model)
    else:
        lines = [
            f"forest n_features={model.n_features} n_trees={len(model.trees)} "
            f"max_features={model.max_features} bootstrap={int(model.bootstrap)}"
        ]
        for i, (tree, s) in enumerate(zip(model.trees, model.seeds)):
            lines.append(f"tree {i} seed={s} nodes={len(tree.nodes)}")
            lines += _tree_lines(tree)
    return "\n".join(lines) + "\n"


def dump_model(model: Model, dest: Union[str, Path]) -> None:
    Path(dest).write_text(dumps_model(model), encoding="utf-8")
    log.info(f"Wrote model to {dest}")


def _header_fields(line: str, kind: str) -> dict:
    parts = line.split()
    if not parts or parts[0] != kind:
        raise ModelFormatError(f"expected a {kind!r} header, got {line!r}")
    out = {}
    for token in parts[1:]:
        if "=" not in token:
            out.setdefault("_positional", []).append(token)
            continue
        key, value = token.split("=", 1)
        out[key] = value
    return out


def _int_field(fields: dict, key: str, line: str) -> int:
    try:
        return int(fields[key])
    except (KeyError, ValueError):
        raise ModelFormatError(f"missing or bad {key!r} in {line!r}")


def _parse_node(line: str, n_features: int) -> TreeNode:
    parts = line.split()
    try:
        node_id = int(parts[0])
        if parts[1] == "leaf" and len(parts) == 3:
            label = int(parts[2])
            if label not in (POSITIVE, NEGATIVE):
                raise ModelFormatError(f"bad leaf class in {line!r}")
            return TreeNode(node_id, label=label)
        if parts[1] == "split" and len(parts) == 6:
            feature = int(parts[2])
            threshold = float(parts[3])
            left, right = int(parts[4]), int(parts[5])
        else:
            raise ModelFormatError(f"unrecognized node line {line!r}")
    except (IndexError, ValueError):
        raise ModelFormatError(f"unrecognized node line {line!r}")
    if not 0 <= feature < n_features:
        raise ModelFormatError(f"feature index {feature} out of range in {line!r}")
    return TreeNode(node_id, feature, threshold, left, right)


def _read_tree(lines: List[str], pos: int, count: int, n_features: int) -> Tuple[TreeModel, int]:
    if pos + count > len(lines) or count < 1:
        raise ModelFormatError("model file truncated")
    nodes = [_parse_node(line, n_features) for line in lines[pos:pos + count]]
    parents = [0] * count
    for i, node in enumerate(nodes):
        if node.node_id != i:
            raise ModelFormatError(f"node ids must be 0..{count - 1} in order")
        if node.is_leaf:
            continue
        for child in (node.left, node.right):
            if not i < child < count:
                raise ModelFormatError(f"node {i} must point forward inside the tree, got child {child}")
            parents[child] += 1
    orphans = [i for i in range(1, count) if parents[i] != 1]
    if orphans:
        raise ModelFormatError(f"node {orphans[0]} is reached {parents[orphans[0]]} times; every node "
                               f"but the root must have exactly one parent")
    return TreeModel(n_features, nodes), pos + count


def loads_model(text: str) -> Model:
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        raise ModelFormatError("empty model file")
    head = lines[0]
    if head.startswith("tree"):
        fields = _header_fields(head, "tree")
        d = _int_field(fields, "n_features", head)
        tree, end = _read_tree(lines, 1, _int_field(fields, "nodes", head), d)
        if end != len(lines):
            raise ModelFormatError("trailing lines after tree")
        return tree
    if head.startswith("forest"):
        fields = _header_fields(head, "forest")
        d = _int_field(fields, "n_features", head)
        n_trees = _int_field(fields, "n_trees", head)
        forest = ForestModel(d, max_features=_int_field(fields, "max_features", head),
                             bootstrap=bool(_int_field(fields, "bootstrap", head)))
        pos = 1
        for _ in range(n_trees):
            if pos >= len(lines):
                raise ModelFormatError("model file truncated")
            tree_head = lines[pos]
            tree_fields = _header_fields(tree_head, "tree")
            tree, pos = _read_tree(lines, pos + 1, _int_field(tree_fields, "nodes", tree_head), d)
            forest.trees.append(tree)
            forest.seeds.append(_int_field(tree_fields, "seed", tree_head))
        if pos != len(lines):
            raise ModelFormatError("trailing lines after forest")
        return forest
    raise ModelFormatError(f"unknown model header {head!r}")


def load_model(source: Union[str, Path]) -> Model:
    try:
        text = Path(source).read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelFormatError(f"cannot read model {source}: {exc}")
    return loads_model(text)
