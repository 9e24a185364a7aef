import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import unit_rows
from oracles import knn_sort
from landmarkpipe.errors import FormatError, ValidationError
from landmarkpipe.search import (
    Centroids,
    ExactSearcher,
    IvfSearcher,
    ivf_build,
    ivf_search,
    kmeans_fit,
    knn_exact,
    load_ivf,
    save_ivf,
)
from landmarkpipe.store import EmbeddingSet, LocalDescriptorSet


def _gallery(mat, prefix="g"):
    return EmbeddingSet([f"{prefix}{i:04d}" for i in range(len(mat))], np.asarray(mat, np.float32))


def _check_against_oracle(query, gallery, k, exclude=None):
    query = np.asarray(query, np.float32)  # descriptors are 32-bit
    got = knn_exact(query, gallery, k, exclude)
    want = knn_sort(query, {i: v for i, v in gallery.items()}, k, exclude)
    assert got.ids == [i for i, _ in want]
    assert np.allclose(got.scores, [s for _, s in want], rtol=0, atol=1e-12)


def test_knn_orthogonal_pair():
    g = EmbeddingSet.from_dict({"a": [1, 0], "b": [0, 1]})
    r = knn_exact(np.array([1.0, 0.0]), g, 2)
    assert r.hits == [("a", 1.0), ("b", 0.0)]


def test_knn_self_hit_and_exclusion(rng):
    g = _gallery(unit_rows(rng, 20, 8))
    q = g["g0003"]
    r = knn_exact(q, g, 1)
    assert r.ids == ["g0003"] and r.scores[0] == pytest.approx(1.0, abs=1e-6)
    assert "g0003" not in knn_exact(q, g, 20, exclude="g0003").ids


def test_knn_ties_by_ascending_id():
    g = EmbeddingSet(["c", "a", "b"], np.array([[1, 0], [1, 0], [1, 0]], np.float32))
    assert knn_exact(np.array([1.0, 0.0]), g, 3).ids == ["a", "b", "c"]


def test_knn_k_larger_than_gallery(rng):
    g = _gallery(unit_rows(rng, 5, 3))
    assert len(knn_exact(np.ones(3), g, 50)) == 5


def test_knn_dimension_mismatch(rng):
    with pytest.raises(ValidationError):
        knn_exact(np.ones(4), _gallery(unit_rows(rng, 5, 3)), 2)


def test_knn_random_100x16_matches_oracle(rng):
    g = _gallery(unit_rows(rng, 100, 16))
    for _ in range(5):
        _check_against_oracle(unit_rows(rng, 1, 16)[0], g, 10)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 60), d=st.integers(1, 8), k=st.integers(1, 70), ints=st.booleans())
def test_knn_property_matches_oracle(seed, n, d, k, ints):
    r = np.random.default_rng(seed)
    mat = r.integers(-2, 3, (n, d)) if ints else r.standard_normal((n, d))
    g = _gallery(mat)
    q = r.integers(-2, 3, d).astype(float) if ints else r.standard_normal(d)
    exclude = g.ids[int(r.integers(n))] if r.random() < 0.5 else None
    _check_against_oracle(q, g, k, exclude)


def test_search_set_is_worker_independent(rng):
    g = _gallery(unit_rows(rng, 300, 8))
    s = ExactSearcher(g)
    one = s.search_set(g, 7, workers=1)
    many = s.search_set(g, 7, workers=8)
    assert [r.ids for r in one] == [r.ids for r in many]
    assert all(a.scores.tobytes() == b.scores.tobytes() for a, b in zip(one, many))
    assert all(r.query not in r.ids for r in one)


def test_kmeans_k_equals_n(rng):
    x = rng.standard_normal((12, 3))
    c = kmeans_fit(x, 12, 10, seed=3)
    assert c.inertia == 0.0
    got = sorted(map(tuple, np.round(c.vectors.astype(np.float64), 5)))
    assert got == sorted(map(tuple, np.round(x.astype(np.float32).astype(np.float64), 5)))


def test_kmeans_k_one_is_mean(rng):
    x = rng.standard_normal((50, 4))
    c = kmeans_fit(x, 1, 5)
    assert np.allclose(c.vectors[0], x.mean(axis=0), atol=1e-6)


def test_kmeans_two_blobs(rng):
    a = rng.standard_normal((40, 2)) * 0.1 + [5.0, 5.0]
    b = rng.standard_normal((60, 2)) * 0.1 + [-5.0, 1.0]
    c = kmeans_fit(np.concatenate([a, b]), 2, 20, seed=1)
    got = sorted(map(tuple, c.vectors.astype(np.float64)))
    want = sorted([tuple(a.mean(axis=0)), tuple(b.mean(axis=0))])
    assert np.allclose(got, want, atol=1e-6)


def test_kmeans_errors():
    with pytest.raises(ValidationError):
        kmeans_fit(np.zeros((3, 2)), 4)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 200), k=st.integers(1, 12))
def test_kmeans_inertia_nonincreasing_and_seeded(seed, n, k):
    x = np.random.default_rng(seed).standard_normal((n, 3))
    k = min(k, n)
    c = kmeans_fit(x, k, 15, seed=seed)
    assert all(b <= a for a, b in zip(c.history, c.history[1:]))
    assert c.inertia == c.history[-1] >= 0
    again = kmeans_fit(x, k, 15, seed=seed)
    assert again.vectors.tobytes() == c.vectors.tobytes()


def test_ivf_assignment_and_tie():
    cents = Centroids(np.array([[0, 0], [10, 10]], np.float32), 0.0)
    idx = ivf_build(EmbeddingSet.from_dict({"p": [1, 1], "tie": [5, 5]}), cents)
    assert [o for o, _, _ in idx.posting(0)] == ["p", "tie"]
    assert idx.posting(1) == []


def test_ivf_empty_gallery():
    cents = Centroids(np.zeros((3, 2), np.float32), 0.0)
    idx = ivf_build(EmbeddingSet([], np.zeros((0, 2)), 2), cents)
    assert all(idx.posting(c) == [] for c in range(3))


def test_ivf_postings_partition_local_points(rng):
    loc = LocalDescriptorSet([f"im{i}" for i in range(10)], [unit_rows(rng, int(rng.integers(0, 6)), 4) for _ in range(10)], 4)
    owner, point, mat = loc.flatten()
    idx = ivf_build(loc, kmeans_fit(mat, 5, 10))
    d = ((mat[:, None, :].astype(np.float64) - idx.centroids.vectors[None].astype(np.float64)) ** 2).sum(-1)
    nearest = {(loc.ids[o], int(p)): int(d[r].argmin()) for r, (o, p) in enumerate(zip(owner, point))}
    placed = {(o, p): c for c in range(5) for o, p, _ in idx.posting(c)}
    assert sum(len(idx.posting(c)) for c in range(5)) == len(mat)
    assert placed == nearest


def test_ivf_all_probes_equals_exact(rng):
    g = _gallery(unit_rows(rng, 400, 12))
    idx = ivf_build(g, kmeans_fit(g.vectors, 16, 10))
    for q in unit_rows(rng, 10, 12):
        a = ivf_search(idx, q, 16, 25)
        b = knn_exact(q, g, 25)
        assert a.ids == b.ids and a.scores.tobytes() == b.scores.tobytes()


def test_ivf_single_probe_stays_in_list(rng):
    g = _gallery(unit_rows(rng, 200, 6))
    idx = ivf_build(g, kmeans_fit(g.vectors, 8, 10))
    c = 3
    r = ivf_search(idx, idx.centroids.vectors[c], 1, 100)
    assert set(r.ids) == {o for o, _, _ in idx.posting(c)}


def test_ivf_local_owner_dedup(rng):
    base = unit_rows(rng, 1, 4)[0]
    loc = LocalDescriptorSet(["a", "b"], [np.stack([base, base * 0.5]), np.stack([-base])], 4)
    idx = ivf_build(loc, kmeans_fit(loc.flatten()[2], 1, 3))
    r = ivf_search(idx, base, 1, 10)
    assert r.ids == ["a", "b"]
    assert r.scores[0] == pytest.approx(1.0, abs=1e-6)


def test_ivf_errors(rng):
    g = _gallery(unit_rows(rng, 20, 4))
    idx = ivf_build(g, kmeans_fit(g.vectors, 4, 5))
    with pytest.raises(ValidationError):
        ivf_search(idx, np.ones(4), 5, 3)
    with pytest.raises(ValidationError):
        ivf_search(idx, np.ones(3), 2, 3)
    with pytest.raises(ValidationError):
        ivf_build(g, Centroids(np.zeros((2, 5), np.float32), 0.0))


def test_ivf_searcher_excludes_self(rng):
    g = _gallery(unit_rows(rng, 50, 4))
    s = IvfSearcher(ivf_build(g, kmeans_fit(g.vectors, 4, 5)), 4)
    assert all(r.query not in r.ids for r in s.search_set(g, 5))


def test_ivf_roundtrip(tmp_path, rng):
    loc = LocalDescriptorSet(["x", "y", "z"], [unit_rows(rng, 3, 5), unit_rows(rng, 0, 5), unit_rows(rng, 4, 5)], 5)
    idx = ivf_build(loc, kmeans_fit(loc.flatten()[2], 3, 5))
    save_ivf(idx, tmp_path / "i.ivf1")
    back = load_ivf(tmp_path / "i.ivf1")
    assert back == idx
    save_ivf(back, tmp_path / "j.ivf1")
    assert (tmp_path / "i.ivf1").read_bytes() == (tmp_path / "j.ivf1").read_bytes()
    raw = (tmp_path / "i.ivf1").read_bytes()
    (tmp_path / "bad.ivf1").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        load_ivf(tmp_path / "bad.ivf1")
    (tmp_path / "cut.ivf1").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_ivf(tmp_path / "cut.ivf1")
