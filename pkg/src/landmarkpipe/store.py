"""Collections of image descriptors and their on-disk formats.

Binary layouts (all integers and floats little-endian):

EMB1 (global embeddings)::

    b"EMB1" | u32 count | u32 dim | count x ( u16 idlen | id utf-8 | dim x f32 )

LOC1 (local descriptors)::

    b"LOC1" | u32 count | u32 dim | count x ( u16 idlen | id utf-8 | u32 npoints | npoints x dim x f32 )

Text formats: labels are CSV ``id,landmark_id``; detections are JSON lines
``{"id": ..., "objects": [{"class": ..., "score": ..., "box": [x0, y0, x1, y1]}]}``;
classifier predictions are CSV ``id,label,score``.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import FormatError, ValidationError

_F32 = np.dtype("<f4")
_HEADER = struct.Struct("<4sII")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def check_image_id(image_id: str) -> str:
    if not isinstance(image_id, str) or not image_id:
        raise ValidationError(f"image id must be a nonempty string, got {image_id!r}")
    if any(ch.isspace() for ch in image_id):
        raise ValidationError(f"image id {image_id!r} contains whitespace")
    return image_id


def _check_unique(ids: Sequence[str], what: str) -> None:
    seen: set[str] = set()
    for i in ids:
        check_image_id(i)
        if i in seen:
            raise ValidationError(f"duplicate id {i!r} in {what}")
        seen.add(i)


class EmbeddingSet:
    """Ordered mapping from image id to one float32 descriptor.

    Vectors are kept as a single ``(n, dim)`` float32 matrix whose rows follow
    ``ids``. Instances are treated as immutable once built.
    """

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, dim: int | None = None):
        ids = list(ids)
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim == 1 and vectors.size == 0:
            vectors = vectors.reshape(0, dim or 0)
        if vectors.ndim != 2:
            raise ValidationError(f"vectors must be 2-d, got shape {vectors.shape}")
        if dim is None:
            dim = vectors.shape[1]
        if dim <= 0:
            raise ValidationError(f"dimension must be positive, got {dim}")
        if vectors.shape != (len(ids), dim):
            raise ValidationError(
                f"vector matrix shape {vectors.shape} does not match {len(ids)} ids x dim {dim}"
            )
        if not np.isfinite(vectors).all():
            bad = ids[int(np.flatnonzero(~np.isfinite(vectors).all(axis=1))[0])]
            raise ValidationError(f"non-finite descriptor for id {bad!r}")
        _check_unique(ids, "embedding set")
        self.ids = ids
        self.vectors = np.ascontiguousarray(vectors)
        self.vectors.flags.writeable = False
        self.dim = int(dim)
        self._pos = {i: n for n, i in enumerate(ids)}

    @classmethod
    def from_dict(cls, entries: Mapping[str, Sequence[float]], dim: int | None = None) -> EmbeddingSet:
        ids = list(entries)
        if not ids:
            return cls([], np.zeros((0, dim or 1), np.float32), dim or 1)
        return cls(ids, np.array([entries[i] for i in ids], dtype=np.float32), dim)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, image_id: object) -> bool:
        return image_id in self._pos

    def __getitem__(self, image_id: str) -> np.ndarray:
        return self.vectors[self._pos[image_id]]

    def __iter__(self) -> Iterator[str]:
        return iter(self.ids)

    def index_of(self, image_id: str) -> int:
        return self._pos[image_id]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return zip(self.ids, self.vectors)

    def subset(self, ids: Iterable[str]) -> EmbeddingSet:
        ids = list(ids)
        rows = [self._pos[i] for i in ids]
        return EmbeddingSet(ids, self.vectors[rows], self.dim)

    def with_vectors(self, vectors: np.ndarray) -> EmbeddingSet:
        return EmbeddingSet(self.ids, vectors)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.ids == other.ids
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    def __repr__(self) -> str:
        return f"EmbeddingSet(n={len(self)}, dim={self.dim})"


class LocalDescriptorSet:
    """Per-image variable-length sets of local descriptors with a common dimension."""

    def __init__(self, ids: Sequence[str], points: Sequence[np.ndarray], dim: int):
        ids = list(ids)
        if dim <= 0:
            raise ValidationError(f"dimension must be positive, got {dim}")
        if len(ids) != len(points):
            raise ValidationError("ids and point arrays differ in length")
        _check_unique(ids, "local descriptor set")
        arrays = []
        for image_id, p in zip(ids, points):
            p = np.asarray(p, dtype=np.float32).reshape(-1, dim) if np.size(p) else np.zeros((0, dim), np.float32)
            if p.shape[1] != dim:
                raise ValidationError(f"local dimension {p.shape[1]} != {dim} for id {image_id!r}")
            if not np.isfinite(p).all():
                raise ValidationError(f"non-finite local descriptor for id {image_id!r}")
            p = np.ascontiguousarray(p)
            p.flags.writeable = False
            arrays.append(p)
        self.ids = ids
        self.points = arrays
        self.dim = int(dim)
        self._pos = {i: n for n, i in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, image_id: object) -> bool:
        return image_id in self._pos

    def __getitem__(self, image_id: str) -> np.ndarray:
        return self.points[self._pos[image_id]]

    def flatten(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(owner_index, point_index, matrix)`` over all points."""
        counts = np.array([len(p) for p in self.points], dtype=np.int64)
        owners = np.repeat(np.arange(len(self.ids), dtype=np.int64), counts)
        point_idx = np.concatenate([np.arange(c, dtype=np.int64) for c in counts]) if len(counts) else np.zeros(0, np.int64)
        matrix = np.concatenate(self.points) if self.points else np.zeros((0, self.dim), np.float32)
        return owners, point_idx, matrix.reshape(-1, self.dim)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LocalDescriptorSet):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.ids == other.ids
            and all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.points, other.points))
        )

    def __repr__(self) -> str:
        return f"LocalDescriptorSet(n={len(self)}, dim={self.dim})"


# -- binary reading helpers ------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated payload while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return _U16.unpack(self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype=_F32).astype(np.float32)

    def image_id(self) -> str:
        start = self.pos
        raw = self.take(self.u16("id length"), "id bytes")
        try:
            image_id = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("id is not valid UTF-8", start) from None
        try:
            return check_image_id(image_id)
        except ValidationError as exc:
            raise FormatError(str(exc), start) from None

    def header(self, magic: bytes) -> tuple[int, int]:
        raw = self.take(_HEADER.size, "header")
        got, count, dim = _HEADER.unpack(raw)
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
        return count, dim

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes", self.pos)


def _encode_id(image_id: str) -> bytes:
    raw = check_image_id(image_id).encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValidationError(f"id {image_id[:20]!r}... longer than 65535 bytes")
    return _U16.pack(len(raw)) + raw


def save_embeddings(emb: EmbeddingSet, destination: str | Path) -> None:
    parts = [_HEADER.pack(b"EMB1", len(emb), emb.dim)]
    for image_id, vec in emb.items():
        parts.append(_encode_id(image_id))
        parts.append(vec.astype(_F32).tobytes())
    Path(destination).write_bytes(b"".join(parts))


def load_embeddings(source: str | Path) -> EmbeddingSet:
    r = _Reader(Path(source).read_bytes())
    count, dim = r.header(b"EMB1")
    if dim == 0:
        raise FormatError("dimension must be positive", 8)
    ids = []
    vectors = np.empty((count, dim), dtype=np.float32) if count * dim * 4 <= len(r.data) else None
    if vectors is None:
        raise FormatError(f"header declares {count} x {dim} floats, file too short", 4)
    seen: set[str] = set()
    for n in range(count):
        start = r.pos
        image_id = r.image_id()
        if image_id in seen:
            raise FormatError(f"duplicate id {image_id!r}", start)
        seen.add(image_id)
        ids.append(image_id)
        vectors[n] = r.floats(dim, f"descriptor of {image_id!r}")
    r.finish()
    return EmbeddingSet(ids, vectors, dim)


def save_local(loc: LocalDescriptorSet, destination: str | Path) -> None:
    parts = [_HEADER.pack(b"LOC1", len(loc), loc.dim)]
    for image_id, pts in zip(loc.ids, loc.points):
        parts.append(_encode_id(image_id))
        parts.append(_U32.pack(len(pts)))
        parts.append(pts.astype(_F32).tobytes())
    Path(destination).write_bytes(b"".join(parts))


def load_local(source: str | Path) -> LocalDescriptorSet:
    r = _Reader(Path(source).read_bytes())
    count, dim = r.header(b"LOC1")
    if dim == 0:
        raise FormatError("dimension must be positive", 8)
    ids, points = [], []
    seen: set[str] = set()
    for _ in range(count):
        start = r.pos
        image_id = r.image_id()
        if image_id in seen:
            raise FormatError(f"duplicate id {image_id!r}", start)
        seen.add(image_id)
        npts = r.u32("point count")
        ids.append(image_id)
        points.append(r.floats(npts * dim, f"points of {image_id!r}").reshape(npts, dim))
    r.finish()
    return LocalDescriptorSet(ids, points, dim)


# -- detections ------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    cls: str
    score: float
    box: tuple[float, float, float, float]

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.box
        return (x1 - x0) * (y1 - y0)


def _parse_detection(image_id: str, obj: object) -> Detection:
    if not isinstance(obj, dict):
        raise ValidationError(f"detection for id {image_id!r} is not an object")
    try:
        cls, score, box = obj["class"], float(obj["score"]), obj["box"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed detection for id {image_id!r}: {exc}") from None
    if not isinstance(cls, str) or not cls:
        raise ValidationError(f"detection class must be a nonempty string for id {image_id!r}")
    if not (0.0 <= score <= 1.0):
        raise ValidationError(f"detection score {score} outside [0,1] for id {image_id!r}")
    if not isinstance(box, list) or len(box) != 4:
        raise ValidationError(f"box must have 4 coordinates for id {image_id!r}")
    x0, y0, x1, y1 = (float(v) for v in box)
    if not all(0.0 <= v <= 1.0 for v in (x0, y0, x1, y1)):
        raise ValidationError(f"box {box} outside [0,1] for id {image_id!r}")
    if x0 > x1 or y0 > y1:
        raise ValidationError(f"box {box} has inverted corners for id {image_id!r}")
    return Detection(cls, score, (x0, y0, x1, y1))


def load_detections(source: str | Path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(source, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: invalid JSON ({exc})") from None
            if not isinstance(rec, dict) or "id" not in rec:
                raise ValidationError(f"line {lineno}: record without id")
            image_id = check_image_id(rec["id"])
            if image_id in out:
                raise ValidationError(f"line {lineno}: duplicate id {image_id!r}")
            out[image_id] = [_parse_detection(image_id, o) for o in rec.get("objects", [])]
    return out


def save_detections(dets: Mapping[str, Sequence[Detection]], destination: str | Path) -> None:
    with open(destination, "w", encoding="utf-8") as fh:
        for image_id, objs in dets.items():
            rec = {
                "id": image_id,
                "objects": [{"class": d.cls, "score": d.score, "box": list(d.box)} for d in objs],
            }
            fh.write(json.dumps(rec) + "\n")


# -- CSV formats -----------------------------------------------------------


def _read_csv(source: str | Path, columns: Sequence[str]) -> Iterator[tuple[int, dict[str, str]]]:
    with open(source, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns if c not in header]
        if missing:
            raise ValidationError(f"{source}: missing column(s) {', '.join(missing)}")
        for row in reader:
            yield reader.line_num, row


def load_labels(source: str | Path) -> dict[str, str]:
    """Read ``id,landmark_id``. Rows with an empty landmark id are skipped."""
    labels: dict[str, str] = {}
    seen: set[str] = set()
    for line, row in _read_csv(source, ("id", "landmark_id")):
        image_id = check_image_id(row["id"])
        if image_id in seen:
            raise ValidationError(f"{source}:{line}: duplicate id {image_id!r}")
        seen.add(image_id)
        if row["landmark_id"]:
            labels[image_id] = row["landmark_id"]
    return labels


def load_optional_labels(source: str | Path) -> dict[str, str | None]:
    """Like :func:`load_labels` but keeps empty labels as ``None`` (distractors)."""
    out: dict[str, str | None] = {}
    for line, row in _read_csv(source, ("id", "landmark_id")):
        image_id = check_image_id(row["id"])
        if image_id in out:
            raise ValidationError(f"{source}:{line}: duplicate id {image_id!r}")
        out[image_id] = row["landmark_id"] or None
    return out


def save_labels(labels: Mapping[str, str | None], destination: str | Path) -> None:
    with open(destination, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "landmark_id"])
        for image_id, label in labels.items():
            w.writerow([image_id, "" if label is None else label])


def load_scored_labels(source: str | Path) -> dict[str, tuple[str, float]]:
    """Read classifier predictions ``id,label,score``."""
    out: dict[str, tuple[str, float]] = {}
    for line, row in _read_csv(source, ("id", "label", "score")):
        image_id = check_image_id(row["id"])
        if image_id in out:
            raise ValidationError(f"{source}:{line}: duplicate id {image_id!r}")
        try:
            score = float(row["score"])
        except ValueError:
            raise ValidationError(f"{source}:{line}: bad score {row['score']!r}") from None
        if not math.isfinite(score):
            raise ValidationError(f"{source}:{line}: non-finite score")
        out[image_id] = (row["label"], score)
    return out


def save_scored_labels(rows: Mapping[str, tuple[str, float]], destination: str | Path) -> None:
    with open(destination, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "score"])
        for image_id, (label, score) in rows.items():
            w.writerow([image_id, label, repr(float(score))])


def write_retrieval_submission(rows: Mapping[str, Sequence[str]], destination: str | Path, limit: int = 100) -> None:
    with open(destination, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "images"])
        for query_id, hits in rows.items():
            w.writerow([query_id, " ".join(list(hits)[:limit])])


def load_retrieval_submission(source: str | Path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for line, row in _read_csv(source, ("id", "images")):
        image_id = check_image_id(row["id"])
        if image_id in out:
            raise ValidationError(f"{source}:{line}: duplicate id {image_id!r}")
        out[image_id] = row["images"].split()
    return out


def write_recognition_submission(
    rows: Mapping[str, tuple[str, float] | None], destination: str | Path
) -> None:
    """Write ``id,landmarks`` with value ``"<label> <score>"``; ``None`` gives an empty value."""
    with open(destination, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "landmarks"])
        for image_id, pred in rows.items():
            w.writerow([image_id, "" if pred is None else f"{pred[0]} {float(pred[1])!r}"])


def load_recognition_submission(source: str | Path) -> dict[str, tuple[str, float] | None]:
    out: dict[str, tuple[str, float] | None] = {}
    for line, row in _read_csv(source, ("id", "landmarks")):
        image_id = check_image_id(row["id"])
        if image_id in out:
            raise ValidationError(f"{source}:{line}: duplicate id {image_id!r}")
        value = row["landmarks"].strip()
        if not value:
            out[image_id] = None
            continue
        parts = value.split(" ")
        if len(parts) != 2:
            raise ValidationError(f"{source}:{line}: expected '<label> <score>', got {value!r}")
        try:
            out[image_id] = (parts[0], float(parts[1]))
        except ValueError:
            raise ValidationError(f"{source}:{line}: bad score {parts[1]!r}") from None
    return out
