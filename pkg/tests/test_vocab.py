import numpy as np
import pytest

from dehash.vocab import (
    VocabularyTree,
    leaf_assignments,
    load_tree,
    quantize_leaf,
    quantize_vlad,
    save_tree,
    subtree_leaves,
    train_vocabulary,
    vlad_assignments,
)


def gaussian_mixture(n, dim, k, seed, spread=4.0):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-spread, spread, size=(k, dim))
    return centers[rng.integers(0, k, size=n)] + rng.standard_normal((n, dim))


# ---------------------------------------------------------------------------
# Independent flat k-means oracle: plain-loop k-means++ and Lloyd with the
# same seeding/update rules, used to cross-check per-node training.
# ---------------------------------------------------------------------------


def oracle_kmeans(points, k, rng, max_iter=50, tol=1e-6):
    n = len(points)
    centers = np.zeros((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = np.array([np.sum((p - centers[0]) ** 2) for p in points])
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = int(rng.choice(n, p=d2 / total))
        else:
            pick = int(rng.integers(n))
        centers[j] = points[pick]
        for i, p in enumerate(points):
            d2[i] = min(d2[i], np.sum((p - centers[j]) ** 2))

    for _ in range(max_iter):
        assign = np.array(
            [int(np.argmin([np.sum((p - c) ** 2) for c in centers])) for p in points]
        )
        new_centers = centers.copy()
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j] > 0:
                new_centers[j] = points[assign == j].mean(axis=0)
        empties = [j for j in range(k) if counts[j] == 0]
        if empties:
            big = int(np.argmax(counts))
            members = np.flatnonzero(assign == big)
            order = np.argsort(
                -np.array([np.sum((points[i] - new_centers[big]) ** 2) for i in members]),
                kind="stable",
            )
            for rank, j in enumerate(empties):
                new_centers[j] = points[members[order[rank % len(members)]]]
        shift = max(np.sqrt(np.sum((new_centers[j] - centers[j]) ** 2)) for j in range(k))
        centers = new_centers
        if shift < tol:
            break
    assign = np.array(
        [int(np.argmin([np.sum((p - c) ** 2) for c in centers])) for p in points]
    )
    return centers, assign


def sse(points, centers, assign):
    return float(sum(np.sum((p - centers[a]) ** 2) for p, a in zip(points, assign)))


class TestTraining:
    def test_tree_shape(self):
        X = gaussian_mixture(600, 4, 6, seed=1)
        tree = train_vocabulary(X, branch=3, levels=3, vlad_level=1, seed=5)
        assert tree.num_vlad_centers == 3
        assert tree.num_leaves == 27
        assert tree.parent_of_leaf.tolist() == [i // 9 for i in range(27)]
        assert len(tree.sublevel_centers) == 1

    def test_one_point_per_leaf_is_fixed_point(self):
        # With exactly branch**levels well-separated points, every leaf center
        # lands on one input point.
        rng = np.random.default_rng(3)
        X = rng.permutation(np.array([[10.0 * i, 10.0 * j] for i in range(4) for j in range(4)]))
        tree = train_vocabulary(X, branch=4, levels=2, vlad_level=1, seed=2)
        leaves = sorted(map(tuple, np.asarray(tree.leaf_centers, dtype=np.float64)))
        assert leaves == sorted(map(tuple, X))

    def test_per_node_sse_matches_flat_kmeans_oracle(self):
        X = gaussian_mixture(1000, 3, 4, seed=7)
        branch, levels = 4, 2
        tree = train_vocabulary(X, branch=branch, levels=levels, vlad_level=1, seed=7)

        # Level 1: one k-means over everything.
        oracle_centers, oracle_assign = oracle_kmeans(
            X, branch, np.random.default_rng([7, 1, 0])
        )
        got_assign = vlad_assignments(tree, X)
        got = sse(X, np.asarray(tree.vlad_centers, dtype=np.float64), got_assign)
        want = sse(X, oracle_centers, oracle_assign)
        assert got == pytest.approx(want, rel=1e-6, abs=1e-6)

        # Level 2: per-node k-means over each node's points.
        for node in range(branch):
            pts = X[oracle_assign == node]
            c2, a2 = oracle_kmeans(pts, branch, np.random.default_rng([7, 2, node]))
            leaf_ids = leaf_assignments(tree, pts)
            got = sse(pts, np.asarray(tree.leaf_centers, dtype=np.float64), leaf_ids)
            want = sse(pts, c2, a2)
            assert got == pytest.approx(want, rel=1e-6, abs=1e-6)

    def test_determinism(self, tmp_path):
        X = gaussian_mixture(400, 3, 5, seed=11)
        t1 = train_vocabulary(X, 3, 2, 1, seed=9)
        t2 = train_vocabulary(X, 3, 2, 1, seed=9)
        save_tree(t1, tmp_path / "a.bin")
        save_tree(t2, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_errors(self):
        X = gaussian_mixture(50, 3, 2, seed=0)
        with pytest.raises(ValueError):
            train_vocabulary(np.empty((0, 3)), 2, 2, 1)
        with pytest.raises(ValueError):
            train_vocabulary(X, 1, 2, 1)
        with pytest.raises(ValueError):
            train_vocabulary(X, 2, 2, 2)  # vlad_level must sit above the leaves


@pytest.fixture(scope="module")
def tree():
    X = gaussian_mixture(2000, 4, 8, seed=13)
    return train_vocabulary(X, branch=4, levels=3, vlad_level=1, seed=13)


class TestQuantization:
    def test_exact_center_hit(self, tree):
        assert quantize_vlad(tree, tree.vlad_centers[3]) == 3

    def test_tie_breaks_to_lowest_id(self):
        tree = VocabularyTree(
            dim=1,
            branch=3,
            levels=1,
            vlad_level=1,
            vlad_centers=np.array([[0.0], [2.0], [4.0]], dtype=np.float32),
            leaf_centers=np.array([[0.0], [2.0], [4.0]], dtype=np.float32),
            parent_of_leaf=np.arange(3, dtype=np.uint32),
        )
        assert quantize_vlad(tree, np.array([3.0])) == 1  # equidistant to 1 and 2

    def test_matches_linear_scan(self, tree):
        rng = np.random.default_rng(17)
        X = rng.normal(size=(300, tree.dim)) * 3
        centers = np.asarray(tree.vlad_centers, dtype=np.float64)
        for x in X:
            want = int(np.argmin([np.sum((x - c) ** 2) for c in centers]))
            assert quantize_vlad(tree, x) == want

    def test_leaf_exact_hit_both_modes(self, tree):
        for t in [0, 5, tree.num_leaves - 1]:
            d = tree.leaf_centers[t]
            assert quantize_leaf(tree, d, "exhaustive-subtree") == t
            assert quantize_leaf(tree, d, "greedy-path") == t

    def test_two_level_tree_modes_agree(self):
        X = gaussian_mixture(500, 3, 4, seed=19)
        two = train_vocabulary(X, branch=4, levels=2, vlad_level=1, seed=19)
        rng = np.random.default_rng(19)
        Q = rng.normal(size=(100, 3)) * 3
        assert np.array_equal(
            leaf_assignments(two, Q, "greedy-path"),
            leaf_assignments(two, Q, "exhaustive-subtree"),
        )

    def test_exhaustive_never_worse_than_greedy(self, tree):
        rng = np.random.default_rng(23)
        Q = rng.normal(size=(500, tree.dim)) * 3
        greedy = leaf_assignments(tree, Q, "greedy-path")
        exhaustive = leaf_assignments(tree, Q, "exhaustive-subtree")
        leaves = np.asarray(tree.leaf_centers, dtype=np.float64)
        d_greedy = np.sum((Q - leaves[greedy]) ** 2, axis=1)
        d_ex = np.sum((Q - leaves[exhaustive]) ** 2, axis=1)
        assert np.all(d_ex <= d_greedy + 1e-12)

    def test_leaf_ancestor_is_vlad_assignment(self, tree):
        rng = np.random.default_rng(29)
        Q = rng.normal(size=(200, tree.dim)) * 3
        for mode in ("greedy-path", "exhaustive-subtree"):
            leaves = leaf_assignments(tree, Q, mode)
            assert np.array_equal(
                tree.parent_of_leaf[leaves].astype(np.int64), vlad_assignments(tree, Q)
            )

    def test_dimension_mismatch(self, tree):
        with pytest.raises(ValueError):
            quantize_vlad(tree, np.zeros(tree.dim + 1))
        with pytest.raises(ValueError):
            quantize_leaf(tree, np.zeros(tree.dim + 1))


class TestSubtrees:
    def test_partition(self, tree):
        seen = []
        for v in range(tree.num_vlad_centers):
            ids = subtree_leaves(tree, v)
            assert np.all(np.diff(ids) > 0)
            seen.extend(ids.tolist())
        assert sorted(seen) == list(range(tree.num_leaves))

    def test_counts(self, tree):
        assert len(subtree_leaves(tree, 0)) == tree.num_leaves // tree.num_vlad_centers

    def test_invalid_id(self, tree):
        with pytest.raises(ValueError):
            subtree_leaves(tree, tree.num_vlad_centers)


class TestSerialization:
    def test_round_trip_bit_exact(self, tree, tmp_path):
        path = tmp_path / "tree.bin"
        save_tree(tree, path)
        loaded = load_tree(path)
        save_tree(loaded, tmp_path / "again.bin")
        assert path.read_bytes() == (tmp_path / "again.bin").read_bytes()
        assert np.array_equal(loaded.vlad_centers, tree.vlad_centers)
        assert np.array_equal(loaded.leaf_centers, tree.leaf_centers)
        assert np.array_equal(loaded.parent_of_leaf, tree.parent_of_leaf)

    def test_loaded_tree_quantizes_identically(self, tree, tmp_path):
        save_tree(tree, tmp_path / "tree.bin")
        loaded = load_tree(tmp_path / "tree.bin")
        rng = np.random.default_rng(31)
        Q = rng.normal(size=(100, tree.dim)) * 3
        assert np.array_equal(
            leaf_assignments(loaded, Q, "exhaustive-subtree"),
            leaf_assignments(tree, Q, "exhaustive-subtree"),
        )

    def test_loaded_deep_tree_refuses_greedy(self, tree, tmp_path):
        save_tree(tree, tmp_path / "tree.bin")
        loaded = load_tree(tmp_path / "tree.bin")
        with pytest.raises(ValueError, match="greedy-path"):
            leaf_assignments(loaded, np.zeros(tree.dim), "greedy-path")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"NOTATREE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_tree(path)
