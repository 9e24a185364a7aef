import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from landmarkpipe.errors import FormatError, ValidationError
from landmarkpipe.features import (
    concat_descriptors,
    l2_normalize,
    load_pca,
    pca_apply,
    pca_apply_set,
    pca_fit,
    pca_project,
    save_pca,
)
from landmarkpipe.store import EmbeddingSet


def _set(rows):
    rows = np.asarray(rows, dtype=np.float32)
    return EmbeddingSet([f"i{n}" for n in range(len(rows))], rows)


def test_normalize_examples():
    assert np.allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])
    assert l2_normalize(np.array([0.0, 0.0])).tolist() == [0.0, 0.0]
    u = np.array([0.0, 1.0, 0.0])
    assert np.array_equal(l2_normalize(u), u)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=100, deadline=None)
@given(v=hnp.arrays(np.float64, st.integers(1, 16), elements=finite), c=st.floats(1e-3, 1e3))
def test_normalize_idempotent_and_scale_invariant(v, c):
    assume(np.linalg.norm(v) > 1e-6)
    n = l2_normalize(v)
    assert abs(np.linalg.norm(n) - 1.0) < 1e-9
    assert np.allclose(l2_normalize(n), n, atol=1e-12)
    assert np.allclose(l2_normalize(c * v), n, atol=1e-6)


def test_concat_per_part_normalization():
    out = concat_descriptors([EmbeddingSet.from_dict({"a": [1, 0]}), EmbeddingSet.from_dict({"a": [0, 2]})])
    assert out.dim == 4
    assert out["a"].tolist() == [1.0, 0.0, 0.0, 1.0]


def test_concat_single_set_is_normalized_copy(rng):
    s = _set(rng.standard_normal((5, 3)) * 7)
    out = concat_descriptors([s])
    assert np.allclose(np.linalg.norm(out.vectors, axis=1), 1.0, atol=1e-6)


def test_concat_six_models(rng):
    ids = [f"x{i}" for i in range(4)]
    sets = [EmbeddingSet(ids, rng.standard_normal((4, 512))) for _ in range(6)]
    assert concat_descriptors(sets).dim == 3072


def test_concat_aligns_by_id_and_reports_missing():
    a = EmbeddingSet.from_dict({"p": [1, 0], "q": [0, 1]})
    b = EmbeddingSet.from_dict({"q": [3, 0], "p": [0, 5]})
    out = concat_descriptors([a, b])
    assert out.ids == ["p", "q"] and out["p"].tolist() == [1, 0, 0, 1]
    with pytest.raises(ValidationError, match="'q'"):
        concat_descriptors([a, EmbeddingSet.from_dict({"p": [1, 1]})])


def test_concat_renormalize_flag(rng):
    s = _set(rng.standard_normal((3, 4)))
    out = concat_descriptors([s, s], renormalize=True)
    assert np.allclose(np.linalg.norm(out.vectors, axis=1), 1.0, atol=1e-6)
    assert np.allclose(np.linalg.norm(concat_descriptors([s, s]).vectors, axis=1), np.sqrt(2), atol=1e-6)


def test_pca_hand_example():
    # population covariance of {(+-1,0),(+-2,0)} is diag(2.5, 0)
    model = pca_fit(_set([[1, 0], [-1, 0], [2, 0], [-2, 0]]), 1, whiten=False)
    assert np.allclose(np.abs(model.basis[:, 0]), [1.0, 0.0])
    assert model.basis[0, 0] > 0  # sign rule: largest entry positive
    assert model.eigenvalues[0] == pytest.approx(2.5)
    out = pca_apply(model, np.array([3.0, 0.0]))
    assert out.tolist() == [1.0]
    assert pca_project(model, np.array([3.0, 0.0]))[0] == pytest.approx(3.0)


def test_pca_apply_at_mean_is_zero():
    model = pca_fit(_set([[1, 0], [-1, 0], [2, 0], [-2, 0]]), 1)
    assert pca_apply(model, model.mean).tolist() == [0.0]


def test_pca_rank_error():
    with pytest.raises(ValidationError, match="achievable rank 2"):
        pca_fit(_set(np.eye(3)), 3)
    with pytest.raises(ValidationError):
        pca_fit(_set([[1.0, 2.0]]), 1)


def test_pca_dimension_mismatch(rng):
    model = pca_fit(_set(rng.standard_normal((10, 4))), 2)
    with pytest.raises(ValidationError):
        pca_apply(model, np.zeros(5))


def test_pca_centering(rng):
    s = _set(rng.standard_normal((40, 6)))
    model = pca_fit(s, 6, whiten=False)
    assert np.allclose(pca_project(model, s.vectors).mean(axis=0), 0.0, atol=1e-5)


def test_pca_whitening_isotropic(rng):
    s = _set(rng.standard_normal((400, 8)))
    model = pca_fit(s, 8, whiten=True)
    w = pca_project(model, s.vectors)
    assert np.allclose(w.var(axis=0), 1.0, atol=1e-3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 40), d=st.integers(1, 12))
def test_pca_properties(seed, n, d):
    x = np.random.default_rng(seed).standard_normal((n, d)) * np.arange(1, d + 1)
    s = _set(x)
    k = min(d, n - 1)
    model = pca_fit(s, k, whiten=True)
    b = model.basis
    assert np.allclose(b.T @ b, np.eye(k), atol=1e-5)
    assert np.all(np.diff(model.eigenvalues) <= 1e-12)
    assert np.all(model.eigenvalues >= 0)
    pivots = np.argmax(np.abs(b), axis=0)
    assert np.all(b[pivots, np.arange(k)] > 0)
    out = pca_apply_set(model, s).vectors
    norms = np.linalg.norm(out, axis=1)
    assert np.all((np.abs(norms - 1) < 1e-5) | (norms == 0))


def test_pca_full_rank_preserves_distances(rng):
    s = _set(rng.standard_normal((30, 5)))
    model = pca_fit(s, 5, whiten=False)
    x = s.vectors.astype(np.float64)
    p = pca_project(model, x)
    dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
    dp = np.linalg.norm(p[:, None] - p[None], axis=-1)
    assert np.abs(dx - dp).max() < 1e-5


def test_pca_roundtrip(tmp_path, rng):
    model = pca_fit(_set(rng.standard_normal((20, 6))), 3, whiten=True)
    save_pca(model, tmp_path / "m.pca1")
    back = load_pca(tmp_path / "m.pca1")
    assert back == model
    raw = (tmp_path / "m.pca1").read_bytes()
    assert raw[:4] == b"PCA1"
    (tmp_path / "bad.pca1").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        load_pca(tmp_path / "bad.pca1")


def test_pca_apply_set_empty(rng):
    model = pca_fit(_set(rng.standard_normal((10, 4))), 2)
    out = pca_apply_set(model, EmbeddingSet([], np.zeros((0, 4)), 4))
    assert len(out) == 0 and out.dim == 2
