"""Datasets, k-distance tables and the two normalization schemes.

Everything here is immutable after construction: arrays are copied and
flagged read-only so the objects can be shared between query threads.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, KOutOfRange, ParseError, ShapeMismatch

DEGENERATE_EPS = 1e-12


class Metric(str, Enum):
    EUCLIDEAN = "euclidean"
    MANHATTAN = "manhattan"


class DataFormat(str, Enum):
    ROAD_NETWORK_NODES = "nodes"
    EMBEDDING_TEXT = "embedding"
    CSV = "csv"


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def pairwise_row(points: np.ndarray, q: np.ndarray, metric: Metric) -> np.ndarray:
    """Distances from ``q`` to every row of ``points``.

    This is the single distance routine of the package. Filter, refinement
    and the brute-force oracle all go through it, which keeps strict
    comparisons between them consistent to the last bit.
    """
    diff = points - q
    if metric == Metric.EUCLIDEAN:
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return np.abs(diff).sum(axis=1)


@dataclass(frozen=True, eq=False)
class Dataset:
    points: np.ndarray
    metric: Metric = Metric.EUCLIDEAN
    ids: Optional[tuple] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[1] < 1:
            raise DimensionMismatch(f"points must be an n x d matrix, got shape {pts.shape}")
        if pts.shape[0] < 2:
            raise EmptyDataset(f"need at least 2 points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise ParseError("non-finite coordinate in dataset")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "metric", Metric(self.metric))
        if self.ids is not None:
            ids = tuple(self.ids)
            if len(ids) != pts.shape[0]:
                raise ShapeMismatch("ids length differs from number of points")
            object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def distances_to(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.d:
            raise DimensionMismatch(f"query has {q.shape[0]} dims, dataset has {self.d}")
        return pairwise_row(self.points, q, self.metric)

    def fingerprint(self) -> bytes:
        """SHA-256 over metric name, shape and coordinate bytes."""
        h = hashlib.sha256()
        h.update(self.metric.value.encode())
        h.update(np.array(self.points.shape, dtype="<u8").tobytes())
        h.update(np.ascontiguousarray(self.points, dtype="<f8").tobytes())
        return h.digest()

    def subsample(self, m: int, seed: int) -> "Dataset":
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(self.n, size=m, replace=False))
        ids = None if self.ids is None else tuple(self.ids[i] for i in idx)
        return Dataset(self.points[idx], self.metric, ids)


def _parse_floats(tokens, lineno):
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError("non-finite value", lineno)
    return vals


def _read_nodes(text):
    ids, rows = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise DimensionMismatch(f"line {lineno}: expected 'id x y', got {len(parts)} fields")
        ids.append(parts[0])
        rows.append(_parse_floats(parts[1:], lineno))
    return rows, ids


def _read_embedding(text):
    lines = text.splitlines()
    if not lines:
        raise EmptyDataset("empty embedding file")
    header = lines[0].split()
    if len(header) != 2:
        raise ParseError("header must be 'n d'", 1)
    try:
        n, d = int(header[0]), int(header[1])
    except ValueError:
        raise ParseError("header must be two integers", 1) from None
    ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        # tokens may contain no whitespace; vectors are the last d fields
        parts = line.rstrip("\n").split(" ")
        parts = [p for p in parts if p != ""]
        if not parts:
            continue
        if len(parts) != d + 1:
            raise DimensionMismatch(f"line {lineno}: expected token + {d} values, got {len(parts)} fields")
        ids.append(parts[0])
        rows.append(_parse_floats(parts[1:], lineno))
    if len(rows) != n:
        raise ParseError(f"header announces {n} vectors, file has {len(rows)}", 1)
    return rows, ids


def _read_csv(text):
    rows = []
    width = None
    for lineno, rec in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not rec or all(not c.strip() for c in rec):
            continue
        try:
            vals = [float(c) for c in rec]
        except ValueError:
            if lineno == 1 and not rows:
                continue  # header row
            raise ParseError(f"cannot parse {rec!r} as floats", lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite value", lineno)
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise DimensionMismatch(f"line {lineno}: expected {width} columns, got {len(vals)}")
        rows.append(vals)
    return rows, None


_READERS = {
    DataFormat.ROAD_NETWORK_NODES: _read_nodes,
    DataFormat.EMBEDDING_TEXT: _read_embedding,
    DataFormat.CSV: _read_csv,
}


def load_dataset(path, format="csv", metric="euclidean", unit_norm=False) -> Dataset:
    """Read a dataset file.

    Args:
        path: file to read.
        format: one of ``nodes`` (``id x y`` per line), ``embedding``
            (``n d`` header then ``token v1 .. vd``) or ``csv``.
        metric: ``euclidean`` or ``manhattan``.
        unit_norm: scale every row to unit L2 length (embeddings only make
            sense with this when a cosine-like geometry is wanted).
    """
    text = Path(path).read_text()
    rows, ids = _READERS[DataFormat(format)](text)
    if len(rows) < 2:
        raise EmptyDataset(f"{path}: need at least 2 points, got {len(rows)}")
    pts = np.asarray(rows, dtype=np.float64)
    if unit_norm:
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
        pts = pts / np.where(norms > 0, norms, 1.0)
    return Dataset(pts, Metric(metric), tuple(ids) if ids is not None else None)


# --------------------------------------------------------------------------
# z-score normalization of inputs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ZScoreParams:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "std", _frozen(self.std))
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeMismatch("mean and std must be vectors of equal length")

    @property
    def d(self):
        return self.mean.shape[0]

    @property
    def param_count(self):
        return 2 * self.d


def zscore_fit(ds: Dataset) -> ZScoreParams:
    mean = ds.points.mean(axis=0)
    std = ds.points.std(axis=0)  # population (1/n)
    std = np.where(std < DEGENERATE_EPS, 1.0, std)
    return ZScoreParams(mean, std)


def _check_width(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise DimensionMismatch(f"expected {params.d} dims, got {x.shape[-1]}")
    return x


def zscore_apply(params: ZScoreParams, x) -> np.ndarray:
    """Works on a single vector or a batch of row vectors."""
    x = _check_width(params, x)
    return (x - params.mean) / params.std


def zscore_invert(params: ZScoreParams, z) -> np.ndarray:
    z = _check_width(params, z)
    return z * params.std + params.mean


# --------------------------------------------------------------------------
# k-distance tables and their per-k normalization
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KDistTable:
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2 or v.shape[1] < 1:
            raise ShapeMismatch(f"k-distance table must be n x k_max, got {v.shape}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("k-distances must be finite and non-negative")
        if np.any(np.diff(v, axis=1) < 0):
            raise ValueError("k-distance rows must be non-decreasing in k")
        object.__setattr__(self, "values", v)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def k_max(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class KDistNormParams:
    """Per-k affine map of k-distances into [0, 1].

    ``minimum`` is the column minimum rounded down onto the ulp grid of the
    column maximum, and the scale is the smallest power of two covering the
    column range. Both choices make ``invert(apply(v)) == v`` hold exactly for
    every value inside the column range (barring subnormal underflow for
    distances below about 1e-290), so a model that reproduces the
    normalized targets yields bounds that coincide with the true k-distances.
    """

    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "minimum", _frozen(self.minimum))
        object.__setattr__(self, "maximum", _frozen(self.maximum))
        if self.minimum.shape != self.maximum.shape or self.minimum.ndim != 1:
            raise ShapeMismatch("minimum and maximum must be vectors of equal length")
        if np.any(self.maximum < self.minimum):
            raise ValueError("maximum below minimum")
        object.__setattr__(self, "scale", _frozen(_pow2_scale(self.maximum - self.minimum)))

    @property
    def k_max(self):
        return self.minimum.shape[0]

    @property
    def param_count(self):
        return 2 * self.k_max


def _pow2_scale(span):
    span = np.asarray(span, dtype=np.float64)
    mant, exp = np.frexp(np.where(span < DEGENERATE_EPS, 1.0, span))
    exp = np.where(mant == 0.5, exp - 1, exp)
    return np.where(span < DEGENERATE_EPS, 1.0, np.ldexp(1.0, exp))


def kdist_norm_fit(table: KDistTable) -> KDistNormParams:
    lo = table.values.min(axis=0)
    hi = table.values.max(axis=0)
    grid = np.spacing(hi)  # power of two, so the floor below is exact
    lo = np.floor(lo / grid) * grid
    return KDistNormParams(lo, hi)


def _k_columns(params, ks):
    if ks is None:
        return slice(None)
    ks = np.asarray(ks)
    if np.any(ks < 1) or np.any(ks > params.k_max):
        raise KOutOfRange(f"k must lie in 1..{params.k_max}")
    return ks - 1


def kdist_norm_apply(params: KDistNormParams, v, ks=None) -> np.ndarray:
    """Normalize k-distances.

    ``v`` is either a full ``(..., k_max)`` array (``ks=None``) or values
    aligned with the 1-based ``ks``.
    """
    cols = _k_columns(params, ks)
    return (np.asarray(v, dtype=np.float64) - params.minimum[cols]) / params.scale[cols]


def kdist_norm_invert(params: KDistNormParams, x, ks=None) -> np.ndarray:
    cols = _k_columns(params, ks)
    return np.asarray(x, dtype=np.float64) * params.scale[cols] + params.minimum[cols]
