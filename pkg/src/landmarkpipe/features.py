"""Descriptor normalization, multi-model concatenation and PCA reduction.

PCA models are stored as ``PCA1`` files::

    b"PCA1" | u32 in_dim | u32 out_dim | u8 whiten
            | in_dim x f64 mean | in_dim*out_dim x f64 basis (row-major) | out_dim x f64 eigenvalues

Floats are little-endian float64 so that a saved model reproduces the fitted
one exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .store import EmbeddingSet

WHITEN_EPS = 1e-9

_PCA_HEADER = struct.Struct("<4sIIB")
_F64 = np.dtype("<f8")


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm. Zero vectors come back unchanged."""
    v = np.asarray(v)
    norm = np.linalg.norm(v.astype(np.float64))
    if norm == 0.0:
        return v.copy()
    return (v / norm).astype(v.dtype if v.dtype.kind == "f" else np.float64)


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    norms = np.linalg.norm(m.astype(np.float64), axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return (m / norms).astype(m.dtype)


def concat_descriptors(sets: Sequence[EmbeddingSet], renormalize: bool = False) -> EmbeddingSet:
    """Normalize each model's descriptors and concatenate them per image.

    Ids follow the order of the first set. With ``renormalize`` the
    concatenated vector is normalized once more (off by default).
    """
    if not sets:
        raise ValidationError("concat_descriptors needs at least one embedding set")
    ids = sets[0].ids
    reference = set(ids)
    for n, s in enumerate(sets[1:], 1):
        other = set(s.ids)
        missing = sorted(reference - other)
        extra = sorted(other - reference)
        if missing or extra:
            raise ValidationError(
                f"embedding set {n} does not share the id population of set 0: "
                f"missing {missing[:10]}{'...' if len(missing) > 10 else ''}, "
                f"extra {extra[:10]}{'...' if len(extra) > 10 else ''}"
            )
    blocks = []
    for s in sets:
        mat = s.vectors if s.ids == ids else s.subset(ids).vectors
        blocks.append(l2_normalize_rows(mat))
    out = np.concatenate(blocks, axis=1)
    if renormalize:
        out = l2_normalize_rows(out)
    return EmbeddingSet(ids, out, sum(s.dim for s in sets))


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (in_dim,)
    basis: np.ndarray  # (in_dim, out_dim), orthonormal columns
    eigenvalues: np.ndarray  # (out_dim,), nonincreasing
    whiten: bool

    @property
    def in_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def out_dim(self) -> int:
        return self.basis.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PcaModel):
            return NotImplemented
        return (
            self.whiten == other.whiten
            and self.mean.tobytes() == other.mean.tobytes()
            and self.basis.shape == other.basis.shape
            and self.basis.tobytes() == other.basis.tobytes()
            and self.eigenvalues.tobytes() == other.eigenvalues.tobytes()
        )


def pca_fit(emb: EmbeddingSet, out_dim: int, whiten: bool = True) -> PcaModel:
    """Fit PCA on ``emb`` (the gallery) keeping the top ``out_dim`` components.

    Uses the population covariance (divide by n). Each basis column is signed
    so that its largest-magnitude entry is positive.
    """
    n = len(emb)
    if n < 2:
        raise ValidationError(f"pca_fit needs at least 2 entries, got {n}")
    rank = min(emb.dim, n - 1)
    if out_dim < 1 or out_dim > rank:
        raise ValidationError(
            f"out_dim {out_dim} exceeds achievable rank {rank} (dim {emb.dim}, {n} entries)"
        )
    x = emb.vectors.astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / n
    cov = (cov + cov.T) / 2
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:out_dim]
    evals = np.clip(evals[order], 0.0, None)
    basis = evecs[:, order]
    pivot = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivot, np.arange(out_dim)])
    signs[signs == 0] = 1.0
    basis = basis * signs
    return PcaModel(mean=mean, basis=np.ascontiguousarray(basis), eigenvalues=evals, whiten=whiten)


def pca_project(model: PcaModel, x: np.ndarray) -> np.ndarray:
    """Project rows of ``x`` (or one vector) without the final normalization."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.in_dim:
        raise ValidationError(f"dimension mismatch: model expects {model.in_dim}, got {x.shape[-1]}")
    w = (x - model.mean) @ model.basis
    if model.whiten:
        w = w / np.sqrt(model.eigenvalues + WHITEN_EPS)
    return w


def pca_apply(model: PcaModel, v: np.ndarray) -> np.ndarray:
    return l2_normalize(pca_project(model, v)).astype(np.float32)


def pca_apply_set(model: PcaModel, emb: EmbeddingSet) -> EmbeddingSet:
    if emb.dim != model.in_dim:
        raise ValidationError(f"dimension mismatch: model expects {model.in_dim}, got {emb.dim}")
    if not len(emb):
        return EmbeddingSet([], np.zeros((0, model.out_dim), np.float32), model.out_dim)
    w = l2_normalize_rows(pca_project(model, emb.vectors))
    return EmbeddingSet(emb.ids, w.astype(np.float32), model.out_dim)


def save_pca(model: PcaModel, destination: str | Path) -> None:
    parts = [
        _PCA_HEADER.pack(b"PCA1", model.in_dim, model.out_dim, int(model.whiten)),
        model.mean.astype(_F64).tobytes(),
        np.ascontiguousarray(model.basis).astype(_F64).tobytes(),
        model.eigenvalues.astype(_F64).tobytes(),
    ]
    Path(destination).write_bytes(b"".join(parts))


def load_pca(source: str | Path) -> PcaModel:
    data = Path(source).read_bytes()
    if len(data) < _PCA_HEADER.size:
        raise FormatError("truncated PCA1 header", 0)
    magic, in_dim, out_dim, whiten = _PCA_HEADER.unpack_from(data)
    if magic != b"PCA1":
        raise FormatError(f"bad magic {magic!r}, expected b'PCA1'", 0)
    if whiten not in (0, 1):
        raise FormatError(f"whiten flag must be 0 or 1, got {whiten}", 12)
    expected = _PCA_HEADER.size + 8 * (in_dim + in_dim * out_dim + out_dim)
    if len(data) != expected:
        raise FormatError(f"payload size {len(data)} != expected {expected}", min(len(data), expected))
    off = _PCA_HEADER.size
    mean = np.frombuffer(data, _F64, in_dim, off).astype(np.float64)
    off += 8 * in_dim
    basis = np.frombuffer(data, _F64, in_dim * out_dim, off).astype(np.float64).reshape(in_dim, out_dim)
    off += 8 * in_dim * out_dim
    evals = np.frombuffer(data, _F64, out_dim, off).astype(np.float64)
    return PcaModel(mean=mean, basis=basis, eigenvalues=evals, whiten=bool(whiten))
