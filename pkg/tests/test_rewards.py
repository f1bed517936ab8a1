import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tprl.rewards import RewardBatch, class_centroids, combined_objective, r_cls, r_inv


# -- naive loop oracles, written entry by entry ------------------------------------


def loop_centroid(feats, labels, c):
    members = [i for i in range(len(labels)) if labels[i] == c]
    s, k = feats.shape[1:]
    out = np.zeros((s, k))
    for a in range(s):
        for b in range(k):
            total = 0.0
            for i in members:
                total += feats[i, a, b]
            out[a, b] = total / len(members)
    return out


def loop_sqdist(p, q):
    total = 0.0
    for a in range(p.shape[0]):
        for b in range(p.shape[1]):
            total += (p[a, b] - q[a, b]) ** 2
    return total


def loop_r_cls(feats, labels):
    classes = sorted(set(labels.tolist()))
    cents = {c: loop_centroid(feats, labels, c) for c in classes}
    total = 0.0
    for c in classes:
        for c2 in classes:
            if c != c2:
                total += loop_sqdist(cents[c], cents[c2])
    n = len(classes)
    return total / (n * (n - 1))


def loop_r_inv(feats, labels, users):
    total = 0.0
    for c in sorted(set(labels.tolist())):
        cell_users = sorted({users[i] for i in range(len(labels)) if labels[i] == c})
        cents = {}
        intra = 0.0
        for u in cell_users:
            members = [i for i in range(len(labels)) if labels[i] == c and users[i] == u]
            mu = np.zeros(feats.shape[1:])
            for i in members:
                mu = mu + feats[i]
            mu = mu / len(members)
            cents[u] = mu
            scatter = 0.0
            for i in members:
                scatter += loop_sqdist(feats[i], mu)
            intra += scatter / len(members)
        intra /= len(cell_users)
        inter = 0.0
        n = len(cell_users)
        if n > 1:
            for u in cell_users:
                for v in cell_users:
                    if u != v:
                        inter += loop_sqdist(cents[u], cents[v])
            inter /= n * (n - 1)
        total += intra + inter
    return -total


def random_batch(rng, C=None, U=None, s=None, k=None):
    C = C or int(rng.integers(2, 6))
    U = U or int(rng.integers(1, 5))
    s = s or int(rng.integers(1, 7))
    k = k or int(rng.integers(1, 9))
    labels, users = [], []
    for c in range(1, C + 1):
        for u in range(1, U + 1):
            for _ in range(int(rng.integers(1, 4))):
                labels.append(c)
                users.append(u)
    feats = rng.normal(size=(len(labels), s, k)) * rng.uniform(0.1, 3)
    return RewardBatch(feats, np.array(labels), np.array(users))


# -- examples ------------------------------------------------------------------------------


def test_centroid_single_sample_per_class():
    f = np.array([[[1.0, 2.0]], [[3.0, -1.0]]])
    cents = class_centroids(RewardBatch(f, [1, 2], [1, 1]))
    assert np.array_equal(cents[1], f[0]) and np.array_equal(cents[2], f[1])


def test_centroid_symmetric_pair_is_zero():
    z = np.random.default_rng(0).normal(size=(3, 4))
    cents = class_centroids(RewardBatch(np.stack([z, -z]), [1, 1], [1, 2]))
    assert np.array_equal(cents[1], np.zeros((3, 4)))


def test_centroid_loop_oracle():
    rng = np.random.default_rng(1)
    b = random_batch(rng)
    for c, m in class_centroids(b).items():
        assert np.max(np.abs(m - loop_centroid(b.features, b.labels, c))) <= 1e-12


def test_r_cls_hand_example():
    b = RewardBatch(np.array([[[1.0, 1.0]], [[0.0, 0.0]]]), [1, 2], [1, 1])
    assert r_cls(b) == 2.0


def test_r_cls_identical_centroids():
    f = np.ones((4, 2, 3))
    assert r_cls(RewardBatch(f, [1, 1, 2, 3], [1, 2, 1, 1])) == 0.0


def test_r_cls_needs_two_classes():
    with pytest.raises(ValueError, match="2 classes"):
        r_cls(RewardBatch(np.ones((2, 1, 1)), [1, 1], [1, 2]))


def test_r_inv_hand_example():
    b = RewardBatch(np.array([[[0.0, 0.0]], [[2.0, 0.0]]]), [1, 1], [1, 2])
    assert r_inv(b) == -4.0


def test_r_inv_identical_samples_is_zero():
    f = np.tile(np.array([[0.5, -1.0]]), (6, 1, 1))
    assert r_inv(RewardBatch(f, [1, 1, 1, 2, 2, 2], [1, 2, 3, 1, 2, 3])) == 0.0


def test_r_inv_single_user_has_no_inter_term():
    f = np.array([[[1.0]], [[3.0]]])
    assert r_inv(RewardBatch(f, [1, 1], [5, 5])) == -1.0


def test_combined_ablation_and_defaults():
    b = RewardBatch(np.array([[[1.0, 1.0]], [[0.0, 0.0]], [[2.0, 0.0]]]), [1, 2, 2], [1, 1, 2])
    rb = combined_objective(b, 1.0, 0.0)
    assert rb.j == rb.r_cls
    rb = combined_objective(b)
    assert (rb.w_cls, rb.w_inv) == (5.0, 0.5)
    assert abs(rb.j - (5.0 * rb.r_cls + 0.5 * rb.r_inv)) <= 1e-12
    assert rb.r_inv <= 0
    assert set(rb.diagnostics["class_centroid_norms"]) == {1, 2}


def test_combined_rejects_bad_weights():
    b = RewardBatch(np.zeros((2, 1, 1)), [1, 2], [1, 1])
    with pytest.raises(ValueError):
        combined_objective(b, 0.0, 0.5)


def test_degree_two_homogeneity():
    b = random_batch(np.random.default_rng(2))
    b2 = RewardBatch(2 * b.features, b.labels, b.users)
    assert np.isclose(r_cls(b2), 4 * r_cls(b), rtol=1e-12)
    assert np.isclose(r_inv(b2), 4 * r_inv(b), rtol=1e-12)


# -- properties -----------------------------------------------------------------------------


def test_vectorised_matches_loop_oracles_100_batches():
    rng = np.random.default_rng(3)
    for _ in range(100):
        b = random_batch(rng)
        assert abs(r_cls(b) - loop_r_cls(b.features, b.labels)) <= 1e-12 * max(1, abs(r_cls(b)))
        ri = r_inv(b)
        assert abs(ri - loop_r_inv(b.features, b.labels, b.users)) <= 1e-12 * max(1, abs(ri))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_signs_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    b = random_batch(rng)
    assert r_cls(b) >= 0 and r_inv(b) <= 0
    perm = rng.permutation(len(b.labels))
    bp = RewardBatch(b.features[perm], b.labels[perm], b.users[perm])
    assert np.isclose(r_cls(bp), r_cls(b), rtol=1e-12, atol=1e-12)
    assert np.isclose(r_inv(bp), r_inv(b), rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_relabeling_invariance(seed):
    rng = np.random.default_rng(seed)
    b = random_batch(rng)
    cmap = dict(zip(np.unique(b.labels), rng.permutation(np.unique(b.labels)) * 10 + 7))
    umap = dict(zip(np.unique(b.users), rng.permutation(np.unique(b.users)) + 100))
    br = RewardBatch(b.features, [cmap[c] for c in b.labels], [umap[u] for u in b.users])
    assert np.isclose(r_cls(br), r_cls(b), rtol=1e-12, atol=1e-12)
    assert np.isclose(r_inv(br), r_inv(b), rtol=1e-12, atol=1e-12)


def test_r_inv_zero_iff_cells_collapse():
    rng = np.random.default_rng(4)
    cents = rng.normal(size=(3, 2, 2))
    labels = np.repeat([1, 2, 3], 4)
    users = np.tile([1, 1, 2, 2], 3)
    f = cents[labels - 1]
    assert r_inv(RewardBatch(f, labels, users)) == 0.0
    f2 = f.copy()
    f2[0, 0, 0] += 1e-3
    assert r_inv(RewardBatch(f2, labels, users)) < 0


def test_duplicate_sample_keeps_sign():
    rng = np.random.default_rng(5)
    b = random_batch(rng)
    i = int(rng.integers(len(b.labels)))
    bd = RewardBatch(np.concatenate([b.features, b.features[i:i + 1]]),
                     np.append(b.labels, b.labels[i]), np.append(b.users, b.users[i]))
    assert r_cls(bd) >= 0 and r_inv(bd) <= 0
