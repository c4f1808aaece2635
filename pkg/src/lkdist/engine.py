"""Filter-refinement RkNN query processing and index artifact persistence."""

from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .bounds import AggMode, BoundSet, Bounds, bound_matrices
from .cop import COP_TAG, CopModel
from .core import Dataset, KDistNormParams, ZScoreParams, pairwise_row, zscore_apply
from .errors import (
    CorruptArtifact,
    FingerprintMismatch,
    KOutOfRange,
    VersionUnsupported,
)
from .oracle import KD_TREE_MAX_DIM, balls, nndist
from .regress import MLP_TAG, TREE_TAG, DecisionTreeModel, MlpModel

MAGIC = b"LKDI"
VERSION = 1

_MODEL_TYPES = {TREE_TAG: DecisionTreeModel, MLP_TAG: MlpModel, COP_TAG: CopModel}
_MODE_TAGS = {None: 0, AggMode.OVER_K: 1, AggMode.OVER_POINTS: 2, AggMode.COMBINED: 3}
_TAG_MODES = {v: k for k, v in _MODE_TAGS.items()}
_SECTIONS = ("zscore", "kdistnorm", "model", "bounds", "fingerprint")


@dataclass(frozen=True)
class IndexArtifact:
    """Everything needed to filter RkNN queries over one dataset.

    The CoP baseline carries no normalizations and no bound set; its model
    produces raw bounds directly.
    """

    model: object
    k_max: int
    fingerprint: bytes
    zscore: Optional[ZScoreParams] = None
    kdist_norm: Optional[KDistNormParams] = None
    bounds: Optional[BoundSet] = None

    @property
    def is_cop(self):
        return isinstance(self.model, CopModel)

    def param_count(self) -> int:
        total = self.model.param_count()
        if self.zscore is not None:
            total += self.zscore.param_count
        if self.kdist_norm is not None:
            total += self.kdist_norm.param_count
        if self.bounds is not None:
            total += self.bounds.param_count()
        return total

    def check_dataset(self, ds: Dataset):
        if ds.fingerprint() != self.fingerprint:
            raise FingerprintMismatch("artifact was built for a different dataset")

    def predictions(self, ds: Dataset) -> np.ndarray:
        """Normalized model outputs for every database point, one batch."""
        return self.model.predict_batch(zscore_apply(self.zscore, ds.points))

    def database_bounds(self, ds: Dataset) -> Bounds:
        """(lb, ub) matrices, n x k_max, for every database point."""
        if self.is_cop:
            return self.model.bound_matrices()
        return bound_matrices(self.bounds, self.predictions(ds), self.kdist_norm)


@dataclass(frozen=True)
class QueryResult:
    result: frozenset
    included: int
    candidates: int
    rejected: int
    refined_in: int
    refined_out: int
    self_skipped: bool
    wall_ms: float

    @property
    def css(self):
        return self.candidates


class QueryEngine:
    """Precomputes database bounds once, then answers queries.

    Bounds depend only on the (immutable) artifact and dataset, so caching
    them changes no result; the object is read-only after construction.
    """

    def __init__(self, artifact: IndexArtifact, ds: Dataset, check=True):
        if check:
            artifact.check_dataset(ds)
        self.artifact = artifact
        self.ds = ds
        b = artifact.database_bounds(ds)
        self.lower, self.upper = b.lower, b.upper
        self.lower.setflags(write=False)
        self.upper.setflags(write=False)
        self.crossings = b.crossings

    def _k(self, k):
        if not 1 <= k <= self.artifact.k_max:
            raise KOutOfRange(f"k={k} outside 1..{self.artifact.k_max}")

    def filter(self, q, k, q_index=None):
        """Three-way split of the database: (included, candidates, distances)."""
        self._k(k)
        d = self.ds.distances_to(q)
        lb = self.lower[:, k - 1]
        ub = self.upper[:, k - 1]
        inc = d < lb
        cand = ~inc & (d < ub)
        if q_index is not None:
            inc[q_index] = False
            cand[q_index] = False
        return inc, cand, d

    def query(self, q, k, q_index=None) -> QueryResult:
        t0 = time.perf_counter()
        inc, cand, d = self.filter(q, k, q_index)
        result = set(np.flatnonzero(inc).tolist())
        refined_in = 0
        cand_idx = np.flatnonzero(cand)
        for o in cand_idx:
            if d[o] < nndist(self.ds, int(o), k):
                result.add(int(o))
                refined_in += 1
        n_inc, n_cand = int(inc.sum()), len(cand_idx)
        skipped = q_index is not None
        return QueryResult(
            result=frozenset(result),
            included=n_inc,
            candidates=n_cand,
            rejected=self.ds.n - n_inc - n_cand - int(skipped),
            refined_in=refined_in,
            refined_out=n_cand - refined_in,
            self_skipped=skipped,
            wall_ms=(time.perf_counter() - t0) * 1e3,
        )

    def css_matrix(self, query_indices=None, ks=None) -> np.ndarray:
        """Candidate set sizes with database points as queries (self excluded).

        Returns an array of shape (len(query_indices), len(ks)); ``ks`` are
        1-based and default to 1..k_max.
        """
        return css_matrix(self.ds, self.lower, self.upper, query_indices, ks)


def css_matrix(ds: Dataset, lower, upper, query_indices=None, ks=None, use_tree=None) -> np.ndarray:
    qi = np.arange(ds.n) if query_indices is None else np.asarray(query_indices)
    cols = np.arange(lower.shape[1]) if ks is None else np.asarray(ks) - 1
    lb, ub = lower[:, cols], upper[:, cols]
    if use_tree is None:
        use_tree = ds.d <= KD_TREE_MAX_DIM
    if use_tree:
        return _css_by_object(ds, lb, ub, qi)
    out = np.empty((len(qi), len(cols)), dtype=np.int64)
    for row, i in enumerate(qi):
        d = ds.distances_to(ds.points[i])[:, None]
        cand = (d >= lb) & (d < ub)
        cand[i] = False
        out[row] = cand.sum(axis=0)
    return out


def _css_by_object(ds, lb, ub, qi, chunk=256):
    """Same counts as the per-query scan, gathered per database object.

    Object o is a candidate for query q at k iff lb(o,k) <= d(q,o) < ub(o,k),
    so only queries inside o's largest upper bound need checking. Distances
    are recomputed with the shared routine, which is symmetric, so counts
    match the per-query scan exactly.
    """
    slot = np.full(ds.n, -1, dtype=np.int64)
    slot[qi] = np.arange(len(qi))
    out = np.zeros((len(qi), lb.shape[1]), dtype=np.int64)
    radius = ub.max(axis=1)
    live = np.flatnonzero(radius > 0)
    for start in range(0, len(live), chunk):
        objs = live[start:start + chunk]
        for o, near in zip(objs, balls(ds, objs, radius[objs])):
            near = np.asarray(near, dtype=np.int64)
            rows = slot[near]
            keep = (rows >= 0) & (near != o)
            near, rows = near[keep], rows[keep]
            if len(near) == 0:
                continue
            d = pairwise_row(ds.points[near], ds.points[o], ds.metric)[:, None]
            out[rows] += (d >= lb[o]) & (d < ub[o])
    return out


def rknn_query(artifact: IndexArtifact, ds: Dataset, q, k, q_index=None) -> QueryResult:
    return QueryEngine(artifact, ds).query(q, k, q_index)


# --------------------------------------------------------------------------
# artifact file format
#
#   b"LKDI" | u8 version | u32 k_max | 5 x (u8 section id | u64 length | payload)
#
#   zscore     u32 d, d f64 mean, d f64 std            (empty for CoP)
#   kdistnorm  u32 k, k f64 minimum, k f64 maximum     (empty for CoP)
#   model      4-byte type tag, u32 + JSON hyperparams, u32 + structure bytes,
#              u8 scalar width, u64 count, scalars
#   bounds     u8 mode, u8 flags, u64 n_point, u64 n_k, deltas as f64
#   fingerprint 32-byte SHA-256
# --------------------------------------------------------------------------


def _vec_block(*vecs):
    return b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in vecs)


def _encode_model(model) -> bytes:
    hp = json.dumps(model.hyperparams(), sort_keys=True).encode()
    st = model.structure()
    sc = np.asarray(model.scalars())
    width = sc.dtype.itemsize
    out = io.BytesIO()
    out.write(model.tag)
    out.write(struct.pack("<I", len(hp)))
    out.write(hp)
    out.write(struct.pack("<I", len(st)))
    out.write(st)
    out.write(struct.pack("<BQ", width, sc.size))
    out.write(np.ascontiguousarray(sc, dtype=f"<f{width}").tobytes())
    return out.getvalue()


def _encode_bounds(bs: Optional[BoundSet]) -> bytes:
    if bs is None:
        return struct.pack("<BBQQ", 0, 0, 0, 0)
    flags = int(bs.clip_nonneg) | (int(bs.restore_monotone) << 1)
    n_point = 0 if bs.point_lo is None or not bs.mode.uses_points else bs.point_lo.size
    n_k = 0 if bs.k_lo is None or not bs.mode.uses_ks else bs.k_lo.size
    return struct.pack("<BBQQ", _MODE_TAGS[bs.mode], flags, n_point, n_k) + _vec_block(*bs.vectors())


def artifact_bytes(art: IndexArtifact) -> bytes:
    sections = []
    if art.zscore is None:
        sections.append(b"")
    else:
        sections.append(struct.pack("<I", art.zscore.d) + _vec_block(art.zscore.mean, art.zscore.std))
    if art.kdist_norm is None:
        sections.append(b"")
    else:
        kn = art.kdist_norm
        sections.append(struct.pack("<I", kn.k_max) + _vec_block(kn.minimum, kn.maximum))
    sections.append(_encode_model(art.model))
    sections.append(_encode_bounds(art.bounds))
    sections.append(bytes(art.fingerprint))
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<BI", VERSION, art.k_max))
    for sid, payload in enumerate(sections, start=1):
        out.write(struct.pack("<BQ", sid, len(payload)))
        out.write(payload)
    return out.getvalue()


def save_index(art: IndexArtifact, path) -> None:
    Path(path).write_bytes(artifact_bytes(art))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if n < 0 or self.pos + n > len(self.buf):
            raise CorruptArtifact("unexpected end of artifact data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def floats(self, count, width=8):
        return np.frombuffer(self.take(count * width), dtype=f"<f{width}").copy()

    def done(self):
        return self.pos == len(self.buf)


def _read_sections(raw: bytes):
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CorruptArtifact("bad magic")
    version, k_max = r.unpack("<BI")
    if version != VERSION:
        raise VersionUnsupported(f"artifact version {version} (supported: {VERSION})")
    sections = {}
    for expect in range(1, len(_SECTIONS) + 1):
        sid, length = r.unpack("<BQ")
        if sid != expect:
            raise CorruptArtifact(f"expected section {expect}, found {sid}")
        sections[_SECTIONS[sid - 1]] = r.take(length)
    if not r.done():
        raise CorruptArtifact("trailing bytes after the last section")
    return k_max, sections


def _decode_model(payload):
    r = _Reader(payload)
    tag = r.take(4)
    cls = _MODEL_TYPES.get(tag)
    if cls is None:
        raise CorruptArtifact(f"unknown model tag {tag!r}")
    (hp_len,) = r.unpack("<I")
    hp = json.loads(r.take(hp_len).decode())
    (st_len,) = r.unpack("<I")
    st = r.take(st_len)
    width, count = r.unpack("<BQ")
    if width not in (4, 8):
        raise CorruptArtifact(f"unsupported scalar width {width}")
    scalars = r.floats(count, width)
    if not r.done():
        raise CorruptArtifact("model section length mismatch")
    return cls.from_parts(hp, st, scalars), count


def _decode_bounds(payload):
    r = _Reader(payload)
    mode_tag, flags, n_point, n_k = r.unpack("<BBQQ")
    if mode_tag not in _TAG_MODES:
        raise CorruptArtifact(f"unknown bound mode tag {mode_tag}")
    mode = _TAG_MODES[mode_tag]
    if mode is None:
        if not r.done():
            raise CorruptArtifact("bounds section length mismatch")
        return None, 0
    kw = {}
    if mode.uses_points:
        kw["point_lo"], kw["point_hi"] = r.floats(n_point), r.floats(n_point)
    if mode.uses_ks:
        kw["k_lo"], kw["k_hi"] = r.floats(n_k), r.floats(n_k)
    if not r.done():
        raise CorruptArtifact("bounds section length mismatch")
    bs = BoundSet(mode, clip_nonneg=bool(flags & 1), restore_monotone=bool(flags & 2), **kw)
    return bs, bs.param_count()


def _decode(raw: bytes):
    k_max, sec = _read_sections(raw)
    counts = {}
    zscore = kdist_norm = None
    if sec["zscore"]:
        r = _Reader(sec["zscore"])
        (d,) = r.unpack("<I")
        zscore = ZScoreParams(r.floats(d), r.floats(d))
        if not r.done():
            raise CorruptArtifact("zscore section length mismatch")
    counts["zscore"] = 0 if zscore is None else 2 * zscore.d
    if sec["kdistnorm"]:
        r = _Reader(sec["kdistnorm"])
        (k,) = r.unpack("<I")
        kdist_norm = KDistNormParams(r.floats(k), r.floats(k))
        if not r.done():
            raise CorruptArtifact("kdistnorm section length mismatch")
    counts["kdistnorm"] = 0 if kdist_norm is None else 2 * kdist_norm.k_max
    model, counts["model"] = _decode_model(sec["model"])
    bounds, counts["bounds"] = _decode_bounds(sec["bounds"])
    if len(sec["fingerprint"]) != 32:
        raise CorruptArtifact("fingerprint must be 32 bytes")
    art = IndexArtifact(model, k_max, bytes(sec["fingerprint"]), zscore, kdist_norm, bounds)
    return art, counts


def load_index(path) -> IndexArtifact:
    return _decode(Path(path).read_bytes())[0]


def serialized_scalar_count(raw: bytes) -> int:
    """Number of stored scalars in an encoded artifact, read from the bytes."""
    return sum(_decode(raw)[1].values())
