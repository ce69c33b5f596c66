import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selftrain.data import DatasetStore
from selftrain.nn.model import LayerSpec, Model, build_model, zero_model
from selftrain.pseudo import (
    DECILES,
    PseudoPool,
    balance,
    bucket_by_confidence,
    filter_confidence,
    generate_pseudo_labels,
    harden,
    load_pool,
    pool_digest,
    save_pool,
)


def pool_from(soft, images=None):
    soft = np.asarray(soft, dtype=float)
    n = len(soft)
    if images is None:
        # distinct image per row so duplicates are traceable by content
        images = (np.arange(n, dtype=float)[:, None, None, None] + 1) / (n + 1) * np.ones((n, 1, 1, 1))
    return PseudoPool(images, soft, np.arange(n), soft.shape[1])


def random_pool(rng, n, k):
    # peaked distributions so every confidence band gets members
    logits = rng.normal(size=(n, k)) * rng.uniform(0.1, 6.0, size=(n, 1))
    soft = np.exp(logits - logits.max(1, keepdims=True))
    return pool_from(soft / soft.sum(1, keepdims=True))


# generation


def test_zero_teacher_gives_uniform_labels():
    teacher = zero_model(build_model("mlp-S", (4, 4, 1), 4, np.random.default_rng(0)))
    imgs = DatasetStore(np.random.default_rng(1).random((5, 4, 4, 1)), 4, "unlabeled")
    pool = generate_pseudo_labels(teacher, imgs)
    assert np.allclose(pool.soft, 0.25) and np.allclose(pool.confidence, 0.25)


def test_hand_set_linear_teacher():
    W = np.array([[1.0, 0.0, -1.0], [0.0, 2.0, 0.0]])
    b = np.array([0.0, -1.0, 0.5])
    head = Model("hand", (1, 2, 1), 3, [LayerSpec("softmax-head", 3)], [{"W": W, "b": b}])
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.2, 0.9]])
    pool = generate_pseudo_labels(head, DatasetStore(x.reshape(3, 1, 2, 1), 3, "unlabeled"))
    for row, xi in zip(pool.soft, x):
        z = [xi[0] * 1.0 + 0.0, xi[1] * 2.0 - 1.0, -xi[0] + 0.5]
        e = np.exp(z)
        np.testing.assert_allclose(row, e / e.sum(), rtol=1e-12)


def test_identical_images_identical_labels():
    teacher = build_model("mlp-S", (4, 4, 1), 3, np.random.default_rng(2))
    img = np.random.default_rng(3).random((1, 4, 4, 1))
    pool = generate_pseudo_labels(teacher, DatasetStore(np.repeat(img, 4, 0), 3, "unlabeled"), batch_size=3)
    # BLAS may block a 3-row chunk differently from a 1-row chunk
    np.testing.assert_allclose(pool.soft, np.broadcast_to(pool.soft[0], pool.soft.shape), rtol=1e-12)


# hardening


def test_harden_examples():
    assert harden([0.1, 0.7, 0.2]).tolist() == [0, 1, 0]
    assert harden([0.5, 0.5]).tolist() == [1, 0]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5]), min_size=3, max_size=3), min_size=1, max_size=10))
def test_harden_matches_linear_scan(rows):
    out = harden(np.array(rows))
    for row, h in zip(rows, out):
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        assert h.tolist() == [1.0 if j == best else 0.0 for j in range(len(row))]


# filtering


def test_filter_strict_boundary():
    pool = pool_from([[0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1], [0.3] + [0.7 / 8] * 8, [0.31] + [0.69 / 8] * 8])
    kept = filter_confidence(pool, 0.3)
    assert kept.source_index.tolist() == [2]


def test_filter_empty_warns():
    with pytest.warns(UserWarning):
        assert len(filter_confidence(pool_from([[0.5, 0.5]]), 0.6)) == 0


def brute_filter(pool, tau):
    return [i for i in range(len(pool)) if max(pool.soft[i]) > tau]


def brute_balance_truncate(members, conf, cap):
    # selection sort: repeatedly take the most confident, earliest on ties
    rest = list(members)
    out = []
    while len(out) < cap:
        best = rest[0]
        for m in rest[1:]:
            if conf[m] > conf[best]:
                best = m
        out.append(best)
        rest.remove(best)
    return out


def test_filter_and_balance_match_brute_force_on_200_pools():
    rng = np.random.default_rng(20240)
    for trial in range(200):
        k = int(rng.integers(2, 6))
        pool = random_pool(rng, int(rng.integers(1, 40)), k)
        tau = float(rng.uniform(0.0, 0.9))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            kept = filter_confidence(pool, tau)
        assert kept.source_index.tolist() == brute_filter(pool, tau)
        if len(kept) == 0:
            continue
        cap = int(rng.integers(1, 12))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = balance(kept, cap, np.random.default_rng(trial))
        hard, conf = kept.hard, kept.confidence
        counts = np.bincount(out.hard, minlength=k)
        for c in range(k):
            members = [i for i in range(len(kept)) if hard[i] == c]
            got = out.source_index[out.hard == c].tolist()
            if not members:
                assert counts[c] == 0 and c in out.empty_classes
                continue
            assert counts[c] == cap
            if len(members) >= cap:
                assert got == [int(kept.source_index[m]) for m in brute_balance_truncate(members, conf, cap)]
            else:
                src = [int(kept.source_index[m]) for m in members]
                assert got[: len(members)] == src and set(got) <= set(src)
        assert np.all(out.confidence > tau)
        assert out.distinct_count <= len(out)


def test_balance_keeps_top_three():
    soft = [[c, 1 - c] for c in (0.7, 0.9, 0.5, 0.8, 0.6)] + [[0.1, 0.9]] * 3
    out = balance(pool_from(soft), 3, np.random.default_rng(0))
    assert out.source_index.tolist() == [1, 3, 0, 5, 6, 7]


def test_balance_duplicates_single_member():
    out = balance(pool_from([[0.9, 0.1], [0.2, 0.8], [0.3, 0.7], [0.4, 0.6]]), 3, np.random.default_rng(0))
    assert out.source_index[out.hard == 0].tolist() == [0, 0, 0]
    assert out.distinct_count == 4 and len(out) == 6


def test_duplicates_are_image_copies():
    pool = pool_from([[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]])
    out = balance(pool, 5, np.random.default_rng(1))
    for img, src in zip(out.images, out.source_index):
        assert np.array_equal(img, pool.images[src])


def test_balance_tie_keeps_original_order():
    out = balance(pool_from([[0.6, 0.4]] * 4 + [[0.1, 0.9]] * 2), 2, np.random.default_rng(0))
    assert out.source_index.tolist() == [0, 1, 4, 5]


def test_distinct_equals_total_without_deficit():
    out = balance(pool_from([[0.9, 0.1], [0.8, 0.2], [0.1, 0.9], [0.2, 0.8]]), 2, np.random.default_rng(0))
    assert out.distinct_count == len(out) == 4


def test_empty_class_reported():
    with pytest.warns(UserWarning):
        out = balance(pool_from([[0.9, 0.05, 0.05]]), 2, np.random.default_rng(0))
    assert out.empty_classes == (1, 2)


# buckets


def test_deciles_partition_pool():
    pool = random_pool(np.random.default_rng(4), 300, 3)
    buckets = bucket_by_confidence(pool, DECILES)
    ids = np.concatenate([b.source_index for b in buckets])
    assert sorted(ids.tolist()) == list(range(300))


def test_bucket_half_open_edge():
    pool = pool_from([[0.1] * 10, [1.0] + [0.0] * 9])
    buckets = bucket_by_confidence(pool, DECILES)
    assert buckets[1].source_index.tolist() == [0]
    assert buckets[9].source_index.tolist() == [1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_bucket_sizes_match_counting(seed):
    pool = random_pool(np.random.default_rng(seed), 60, 4)
    intervals = [(0.25, 0.5), (0.5, 0.8), (0.9, 1.0)]
    for (lo, hi), b in zip(intervals, bucket_by_confidence(pool, intervals)):
        assert len(b) == sum(1 for c in pool.confidence if lo <= c < hi or (hi == 1.0 and c == 1.0))


def test_overlapping_buckets_rejected():
    with pytest.raises(ValueError):
        bucket_by_confidence(pool_from([[0.5, 0.5]]), [(0.0, 0.5), (0.4, 1.0)])


# persistence


def test_pool_roundtrip(tmp_path):
    pool = random_pool(np.random.default_rng(5), 7, 3)
    save_pool(tmp_path, pool, teacher="t")
    back, meta = load_pool(tmp_path)
    assert pool_digest(back) == pool_digest(pool)
    assert meta["teacher"] == "t" and meta["count"] == 7


def test_pool_corruption_detected(tmp_path):
    save_pool(tmp_path, random_pool(np.random.default_rng(6), 3, 2))
    blob = bytearray((tmp_path / "pool.bin").read_bytes())
    blob[0] ^= 1
    (tmp_path / "pool.bin").write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        load_pool(tmp_path)


def test_as_store_modes():
    pool = pool_from([[0.3, 0.7], [0.6, 0.4]])
    assert np.array_equal(pool.as_store("hard").targets, [[0, 1], [1, 0]])
    assert np.array_equal(pool.as_store().targets, pool.soft)
    with pytest.raises(ValueError):
        pool.as_store("medium")
