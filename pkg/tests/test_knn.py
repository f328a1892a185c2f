import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ted.dataset import SpaceDescriptor
from ted.knn import (
    EmbeddingIndex,
    KnnConfig,
    build_index,
    cosine_distances,
    kernel_weights,
    predict,
    predict_batch,
    query_neighbors,
    search,
)


def _random_index(rng, n=50, d=4, e_dim=3):
    return build_index(rng.normal(size=(n, d)), rng.normal(size=n), rng.normal(size=(n, e_dim)))


def _brute_force(E, q, k):
    """Independent scan in float: python loop over rows, sort on (distance, row)."""
    qn = q / np.sqrt(sum(v * v for v in q))
    rows = []
    for i, e in enumerate(E):
        en = e / np.sqrt(sum(v * v for v in e))
        rows.append((1.0 - float(np.dot(en, qn)), i))
    return sorted(rows)[:k]


def _exact_order(E, q, k):
    """Rank integer rows by cosine with rational arithmetic, so ties are exact."""

    def key(i):
        dot = sum(int(a) * int(b) for a, b in zip(E[i], q))
        sq = sum(int(a) * int(a) for a in E[i])
        # cos ranks like sign(dot) * dot^2 / |e|^2 (|q| is common to all rows)
        return (-Fraction(dot * abs(dot), sq), i)

    return sorted(range(len(E)), key=key)[:k]


def test_build_index_normalises_and_allows_duplicates():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(3, 64))
    idx = build_index(emb, [0, 1, 0], [1, 1, 0])
    assert len(idx) == 3
    np.testing.assert_allclose(np.linalg.norm(idx.embeddings, axis=1), 1.0, atol=1e-9)
    dup = build_index(np.vstack([emb[0], emb[0]]), [0, 1], [0, 0])
    assert len(dup) == 2


def test_build_index_errors():
    with pytest.raises(ValueError):
        build_index(np.zeros((0, 3)), [], [])
    with pytest.raises(ValueError, match="'b'"):
        build_index([[1.0, 0.0], [0.0, 0.0]], [0, 1], [0, 1], ids=["a", "b"])
    with pytest.raises(ValueError):
        build_index([[1.0, 0.0]], [0, 1], [0])


def test_index_is_immutable():
    idx = build_index([[1.0, 0.0]], [0], [0])
    with pytest.raises(ValueError):
        idx.embeddings[0, 0] = 2.0


def test_distance_example():
    idx = build_index([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], [0, 1, 2], [0, 1, 2])
    nbs = query_neighbors(idx, [1.0, 0.0], 3)
    assert [nb.row for nb in nbs] == [0, 1, 2]
    np.testing.assert_allclose([nb.distance for nb in nbs], [0.0, 1.0, 2.0], atol=1e-15)


def test_stored_row_is_its_own_nearest():
    rng = np.random.default_rng(1)
    emb = rng.normal(size=(30, 5))
    idx = build_index(emb, np.zeros(30), np.zeros(30))
    for i in range(30):
        nb = query_neighbors(idx, emb[i] * 3.0, 1)[0]
        assert nb.row == i and abs(nb.distance) < 1e-12


def test_ties_break_by_row():
    idx = build_index([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], [0, 1, 2, 3], [0, 0, 0, 0])
    assert [nb.row for nb in query_neighbors(idx, [1.0, 0.0], 4)] == [1, 3, 0, 2]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 2000), st.integers(1, 6), st.integers(1, 40))
def test_search_equals_brute_force(seed, n, d, k):
    rng = np.random.default_rng(seed)
    # coarse grid values make exact ties common
    E = rng.integers(-2, 3, size=(n, d)).astype(float)
    E[~np.linalg.norm(E, axis=1).astype(bool)] = 1.0
    q = rng.integers(-2, 3, size=d).astype(float)
    q[0] = q[0] or 1.0
    idx = build_index(E, np.zeros(n), np.zeros(n))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        got = query_neighbors(idx, q, k)
    assert [nb.row for nb in got] == _exact_order(E, q, min(k, n))
    ref = _brute_force(E, q, min(k, n))
    np.testing.assert_allclose([nb.distance for nb in got], [dd for dd, _ in ref], atol=1e-12)


def test_search_exact_on_continuous_data():
    rng = np.random.default_rng(3)
    E = rng.normal(size=(500, 8))
    idx = build_index(E, np.zeros(500), np.zeros(500))
    for k in (1, 5, 50, 500):
        q = rng.normal(size=8)
        assert [nb.row for nb in query_neighbors(idx, q, k)] == [r for _, r in _brute_force(E, q, k)]


def test_query_errors_and_k_clamp():
    idx = build_index([[1.0, 0.0], [0.0, 1.0]], [0, 1], [0, 1])
    with pytest.raises(ValueError):
        query_neighbors(idx, [0.0, 0.0], 1)
    with pytest.warns(UserWarning, match="exceeds"):
        assert len(query_neighbors(idx, [1.0, 0.0], 5)) == 2
    with pytest.raises(ValueError):
        KnnConfig(0)
    with pytest.raises(ValueError):
        KnnConfig(3, sigma=-1.0)
    with pytest.raises(ValueError):
        KnnConfig(3, sigma="wide")


def test_kernel_example_one_third():
    d2 = 0.4
    sigma = d2 / np.sqrt(2 * np.log(2))  # exp(-d2^2 / 2 sigma^2) = 0.5
    idx = build_index([[1.0, 0.0], [1.0 - d2, np.sqrt(1 - (1 - d2) ** 2)]], np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    pred = predict(idx, [1.0, 0.0], KnnConfig(2, sigma))
    np.testing.assert_allclose([nb.distance for nb in pred.evidence], [0.0, d2], atol=1e-12)
    assert pred.y == pytest.approx(1 / 3, abs=1e-9)
    assert pred.e == pytest.approx(1 / 3, abs=1e-9)
    np.testing.assert_allclose([nb.weight for nb in pred.evidence], [2 / 3, 1 / 3], atol=1e-9)


@pytest.mark.filterwarnings("ignore:kernel weights underflowed")
@pytest.mark.parametrize("sigma", [1e-3, 0.1, 10.0, "adaptive"])
def test_k1_returns_nearest_payload_exactly(sigma):
    rng = np.random.default_rng(4)
    idx = _random_index(rng)
    for _ in range(20):
        q = rng.normal(size=4)
        nearest = query_neighbors(idx, q, 1)[0].row
        pred = predict(idx, q, KnnConfig(1, sigma))
        assert pred.y == idx.labels[nearest]
        np.testing.assert_array_equal(pred.e, idx.explanations[nearest])


def test_categorical_vote():
    # three rows equidistant from the query
    emb = [[1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [1.0, -1.0, 0.0], [-1.0, 0.0, 0.0]]
    idx = build_index(emb, [0, 0, 1, 1], [2, 1, 1, 0])
    pred = predict(idx, [1.0, 0.0, 0.0], KnnConfig(3))
    assert pred.y == 0 and pred.e == 1
    # two-way tie goes to the smaller class
    tie = build_index([[1.0, 1.0], [1.0, -1.0]], [3, 1], [0, 0], y_space=SpaceDescriptor.categorical(4))
    assert predict(tie, [1.0, 0.0], KnnConfig(2)).y == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.sampled_from([0.05, 0.5, 2.0, "adaptive"]))
def test_weights_normalised_monotone_and_convex(seed, k, sigma):
    rng = np.random.default_rng(seed)
    idx = _random_index(rng, n=40)
    q = rng.normal(size=4)
    pred = predict(idx, q, KnnConfig(k, sigma))
    w = np.array([nb.weight for nb in pred.evidence])
    d = np.array([nb.distance for nb in pred.evidence])
    assert abs(w.sum() - 1) < 1e-9 and np.all(w >= 0)
    assert np.all(np.diff(d) >= 0) and np.all(np.diff(w) <= 1e-15)
    rows = [nb.row for nb in pred.evidence]
    ys, es = idx.labels[rows], idx.explanations[rows]
    assert ys.min() - 1e-12 <= pred.y <= ys.max() + 1e-12
    assert np.all(es.min(axis=0) - 1e-12 <= pred.e) and np.all(pred.e <= es.max(axis=0) + 1e-12)


def test_adaptive_sigma_floor_and_uniform_fallback():
    w, fb = kernel_weights([0.0, 0.0, 0.0])
    np.testing.assert_allclose(w, 1 / 3) and not fb
    w, fb = kernel_weights([1.0, 2.0], sigma=1e-3)
    assert fb and np.array_equal(w, [0.5, 0.5])
    idx = build_index([[1.0, 0.0], [0.0, 1.0]], np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    with pytest.warns(RuntimeWarning, match="uniform"):
        pred = predict(idx, [-1.0, -1.0], KnnConfig(2, 1e-4))
    assert pred.uniform_fallback and pred.y == 0.5


def test_batch_equals_single_and_deterministic():
    rng = np.random.default_rng(5)
    idx = _random_index(rng, n=60)
    Q = rng.normal(size=(25, 4))
    cfg = KnnConfig(7)
    Y, E, fb = predict_batch(idx, Q, cfg)
    assert fb == 0
    for i, q in enumerate(Q):
        p = predict(idx, q, cfg)
        assert Y[i] == p.y
        np.testing.assert_array_equal(E[i], p.e)
    Y2, E2, _ = predict_batch(idx, Q, cfg)
    np.testing.assert_array_equal(Y, Y2)
    np.testing.assert_array_equal(E, E2)
    # a query's result does not depend on what else is in the batch
    np.testing.assert_array_equal(cosine_distances(idx, Q[3:4]), cosine_distances(idx, Q)[3:4])
    rows, _ = search(idx, Q, 7)
    assert rows.shape == (25, 7)


def test_index_json_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    idx = build_index(rng.normal(size=(10, 3)), rng.integers(0, 3, 10), rng.normal(size=(10, 2)), ids=[f"r{i}" for i in range(10)])
    path = tmp_path / "index.json"
    idx.save(path)
    back = EmbeddingIndex.load(path)
    np.testing.assert_array_equal(back.embeddings, idx.embeddings)
    np.testing.assert_array_equal(back.labels, idx.labels)
    np.testing.assert_array_equal(back.explanations, idx.explanations)
    assert list(back.ids) == list(idx.ids)
    assert back.y_space == idx.y_space and back.e_space == idx.e_space
    q = rng.normal(size=3)
    a, b = predict(idx, q, KnnConfig(4)), predict(back, q, KnnConfig(4))
    assert a.y == b.y and a.evidence == b.evidence
