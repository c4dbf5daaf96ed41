import numpy as np
import pytest

from engine.detect import NEGATIVE, POSITIVE
from engine.errors import DetectionError, ModelFormatError
from engine.trees import (
    ForestModel, TreeModel, TreeNode,
    best_split, default_max_features, dump_model, dumps_model, load_model, loads_model,
    node_impurity, predict, train_forest, train_tree,
)


def threshold_set(n=40, seed=0, d=1):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 10, size=(n, d))
    y = np.where(X[:, 0] > 5, POSITIVE, NEGATIVE)
    return X, y


def accuracy(model, X, y):
    return float(np.mean(model.predict(X) == y))


def test_tree_separates_threshold_data():
    X, y = threshold_set()
    tree = train_tree(X, y, max_depth=8, min_leaf=1)
    assert accuracy(tree, X, y) == 1.0
    root = tree.nodes[0]
    assert root.feature == 0
    assert X[y == NEGATIVE, 0].max() <= root.threshold < X[y == POSITIVE, 0].min()


def test_identical_features_give_one_leaf():
    X = np.ones((6, 3))
    y = np.array([POSITIVE, POSITIVE, NEGATIVE, POSITIVE, NEGATIVE, POSITIVE])
    tree = train_tree(X, y, min_leaf=1)
    assert len(tree.nodes) == 1
    assert tree.nodes[0].label == POSITIVE


def test_label_tie_goes_to_healthy():
    tree = train_tree(np.ones((4, 1)), [POSITIVE, NEGATIVE, POSITIVE, NEGATIVE], min_leaf=1)
    assert tree.predict(np.array([[1.0]])).tolist() == [NEGATIVE]


def test_single_class_set():
    tree = train_tree(np.arange(10.0).reshape(-1, 1), [POSITIVE] * 10)
    assert len(tree.nodes) == 1
    assert tree.predict(np.array([[100.0]])).tolist() == [POSITIVE]


def test_depth_and_leaf_size_limits():
    X, y = threshold_set(n=200, seed=4, d=3)
    y = np.where(np.random.default_rng(9).random(200) < 0.3, -y, y)
    tree = train_tree(X, y, max_depth=3, min_leaf=10)
    assert tree.depth() <= 3
    counts = {}
    for node_id in _leaf_of(tree, X):
        counts[node_id] = counts.get(node_id, 0) + 1
    assert min(counts.values()) >= 10


def _leaf_of(tree, X):
    out = []
    for row in X:
        node = tree.nodes[0]
        while not node.is_leaf:
            node = tree.nodes[node.left if row[node.feature] <= node.threshold else node.right]
        out.append(node.node_id)
    return out


def brute_force_first_split(X, y):
    best = node_impurity(y)
    for f in range(X.shape[1]):
        values = np.unique(X[:, f])
        for a, b in zip(values, values[1:]):
            left = X[:, f] <= (a + b) / 2
            best = min(best, node_impurity(y[left]) + node_impurity(y[~left]))
    return best


@pytest.mark.parametrize("seed", range(15))
def test_first_split_is_optimal(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 13))
    X = rng.integers(0, 6, size=(n, 2)).astype(float)
    y = np.where(rng.random(n) < 0.5, POSITIVE, NEGATIVE)
    y[0], y[1] = POSITIVE, NEGATIVE
    expected = brute_force_first_split(X, y)
    found = best_split(X, y, range(2), min_leaf=1)
    if found is None:
        assert expected == pytest.approx(node_impurity(y))
        return
    f, threshold, impurity = found
    left = X[:, f] <= threshold
    assert impurity == pytest.approx(expected)
    assert node_impurity(y[left]) + node_impurity(y[~left]) == pytest.approx(expected)

    tree = train_tree(X, y, max_depth=1, min_leaf=1)
    assert (tree.nodes[0].feature, tree.nodes[0].threshold) == (f, threshold)


def test_split_ties_keep_first_feature():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    y = np.array([NEGATIVE, NEGATIVE, POSITIVE, POSITIVE])
    f, threshold, impurity = best_split(X, y, range(2), min_leaf=1)
    assert (f, threshold, impurity) == (0, 0.5, 0.0)


def test_training_is_deterministic():
    X, y = threshold_set(n=80, seed=2, d=4)
    assert dumps_model(train_tree(X, y)) == dumps_model(train_tree(X, y))


def test_training_set_checks():
    with pytest.raises(DetectionError):
        train_tree(np.ones((3, 2)), [POSITIVE, NEGATIVE])
    with pytest.raises(DetectionError):
        train_tree(np.ones((2, 2)), [1, 0])
    with pytest.raises(DetectionError):
        train_tree(np.ones(3), [1, -1, 1])
    tree = train_tree(np.ones((2, 2)), [POSITIVE, NEGATIVE])
    with pytest.raises(DetectionError):
        tree.predict(np.ones((1, 3)))


def test_default_max_features():
    assert default_max_features(8) == 3
    assert default_max_features(9) == 3
    assert default_max_features(1) == 1


def test_degenerate_forest_equals_tree():
    X, y = threshold_set(n=120, seed=5, d=4)
    y = np.where(np.random.default_rng(1).random(120) < 0.2, -y, y)
    tree = train_tree(X, y, max_depth=5, min_leaf=3)
    forest = train_forest(X, y, n_trees=1, max_depth=5, min_leaf=3, max_features=4, bootstrap=False)
    assert dumps_model(forest.trees[0]) == dumps_model(tree)
    grid = np.random.default_rng(8).uniform(0, 10, size=(300, 4))
    assert np.array_equal(forest.predict(grid), tree.predict(grid))


def test_forest_same_seed_same_model():
    X, y = threshold_set(n=60, seed=6, d=4)
    a = train_forest(X, y, n_trees=8, seed=3)
    b = train_forest(X, y, n_trees=8, seed=3)
    assert dumps_model(a) == dumps_model(b)
    assert a.seeds == list(range(3, 11))
    assert a.max_features == 2


def test_forest_does_not_depend_on_workers():
    X, y = threshold_set(n=60, seed=6, d=4)
    assert dumps_model(train_forest(X, y, n_trees=6, seed=1, workers=1)) == \
        dumps_model(train_forest(X, y, n_trees=6, seed=1, workers=3))


def test_vote_tie_goes_to_healthy():
    yes = TreeModel(1, [TreeNode(0, label=POSITIVE)])
    no = TreeModel(1, [TreeNode(0, label=NEGATIVE)])
    forest = ForestModel(1, [yes, no], [0, 1])
    assert forest.votes(np.array([[0.0]])).tolist() == [0]
    assert predict(forest, np.array([[0.0]])).tolist() == [NEGATIVE]


def test_forest_at_least_as_accurate_as_tree_on_held_out_data():
    rng = np.random.default_rng(12)
    X = rng.uniform(0, 10, size=(400, 3))
    X = X[np.abs(X[:, 0] - 5) > 0.5]
    y = np.where(X[:, 0] > 5, POSITIVE, NEGATIVE)
    train, test = slice(0, 200), slice(200, None)
    tree = train_tree(X[train], y[train])
    forest = train_forest(X[train], y[train], n_trees=25, seed=7)
    assert accuracy(forest, X[test], y[test]) >= accuracy(tree, X[test], y[test])


def test_model_file_round_trip(tmp_path):
    X, y = threshold_set(n=80, seed=3, d=3)
    forest = train_forest(X, y, n_trees=5, seed=2)
    path = tmp_path / "forest.txt"
    dump_model(forest, path)
    loaded = load_model(path)
    assert isinstance(loaded, ForestModel)
    assert np.array_equal(loaded.predict(X), forest.predict(X))
    assert dumps_model(loaded) == dumps_model(forest)

    tree = train_tree(X, y)
    assert np.array_equal(loads_model(dumps_model(tree)).predict(X), tree.predict(X))


@pytest.mark.parametrize("text", [
    "",
    "bush n_features=1 nodes=1\n0 leaf 1\n",
    "tree n_features=1 nodes=3\n0 split 0 0.5 1 2\n1 leaf 1\n",
    "tree n_features=1 nodes=3\n0 split 4 0.5 1 2\n1 leaf 1\n2 leaf -1\n",
    "tree n_features=1 nodes=3\n0 split 0 0.5 1 7\n1 leaf 1\n2 leaf -1\n",
    "tree n_features=1 nodes=1\n0 leaf 2\n",
    "tree n_features=1 nodes=1\n3 leaf 1\n",
    "tree n_features=1 nodes=1\n0 leaf 1\n1 leaf 1\n",
    "tree nodes=1\n0 leaf 1\n",
    "tree n_features=1 nodes=3\n0 split 0 0.5 1 2\n1 split 0 0.25 1 2\n2 leaf 1\n",
    "tree n_features=1 nodes=3\n0 split 0 0.5 1 1\n1 leaf 1\n2 leaf -1\n",
    "tree n_features=1 nodes=2\n0 leaf 1\n1 leaf -1\n",
    "tree n_features=1 nodes=3\n0 split 0 0.5 0 2\n1 leaf 1\n2 leaf -1\n",
    "forest n_features=1 n_trees=2 max_features=1 bootstrap=1\ntree 0 seed=0 nodes=1\n0 leaf 1\n",
])
def test_malformed_model_files(text):
    with pytest.raises(ModelFormatError):
        loads_model(text)


def test_missing_model_file(tmp_path):
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "absent.txt")


def test_loaded_trees_are_forward_pointing():
    X, y = threshold_set(n=60, seed=4, d=2)
    model = loads_model(dumps_model(train_tree(X, y, max_depth=4, min_leaf=2)))
    for node in model.nodes:
        if not node.is_leaf:
            assert node.node_id < node.left and node.node_id < node.right
    assert np.array_equal(model.predict(X), train_tree(X, y, max_depth=4, min_leaf=2).predict(X))
