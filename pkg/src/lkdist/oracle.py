"""Exact kNN, k-distances and reverse kNN.

These are the ground truth for training targets and for every correctness
check. Ties are broken by ascending point index, and a point never counts as
its own neighbour (exclusion is by index, so duplicate coordinates stay
legal neighbours at distance 0).
"""

from __future__ import annotations

import struct
import weakref
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import Dataset, KDistTable, Metric, pairwise_row
from .errors import CorruptArtifact, KTooLarge

KD_TREE_MAX_DIM = 3
_RADIUS_SLACK = 1e-9

_trees: "weakref.WeakKeyDictionary[Dataset, cKDTree]" = weakref.WeakKeyDictionary()


@dataclass(frozen=True)
class KnnResult:
    indices: np.ndarray
    distances: np.ndarray


def _use_tree(ds, use_tree):
    if use_tree is None:
        return ds.d <= KD_TREE_MAX_DIM
    return use_tree


def _tree(ds):
    tree = _trees.get(ds)
    if tree is None:
        tree = cKDTree(ds.points)
        _trees[ds] = tree
    return tree


def _minkowski_p(metric):
    return 2 if metric == Metric.EUCLIDEAN else 1


def _smallest(idx, dist, k):
    """The k smallest (distance, index) pairs, in that lexicographic order."""
    if len(idx) > k:
        kth = np.partition(dist, k - 1)[k - 1]
        keep = dist <= kth
        idx, dist = idx[keep], dist[keep]
    order = np.lexsort((idx, dist))[:k]
    return idx[order], dist[order]


def _check_k(ds, k, exclude):
    avail = ds.n - (0 if exclude is None else 1)
    if k < 1 or k > avail:
        raise KTooLarge(f"k={k} but only {avail} points are available")


def _tree_candidates(ds, q, k_total):
    """Indices of every point within the k_total-th tree distance of q, with slack."""
    tree = _tree(ds)
    p = _minkowski_p(ds.metric)
    dist, _ = tree.query(q, k=k_total, p=p)
    r = float(np.atleast_1d(dist)[-1])
    cand = tree.query_ball_point(q, r * (1 + _RADIUS_SLACK) + 1e-12, p=p)
    return np.asarray(cand, dtype=np.int64)


def balls(ds: Dataset, centers, radii):
    """For each center index, the indices of points within ``radii`` (tree only).

    The tree search is padded by a relative slack, so the result is a
    superset of the points at exact distance <= radius; callers re-check with
    exact distances.
    """
    tree = _tree(ds)
    r = np.asarray(radii, dtype=np.float64) * (1 + _RADIUS_SLACK) + 1e-12
    return tree.query_ball_point(ds.points[centers], r, p=_minkowski_p(ds.metric))


def knn_query(ds: Dataset, q, k: int, exclude=None, use_tree=None) -> KnnResult:
    """Exact k nearest neighbours of ``q`` in ``ds`` minus ``exclude``.

    The kd-tree path only narrows down the candidate points; their distances
    are recomputed with :func:`pairwise_row`, so both paths agree exactly.
    """
    _check_k(ds, k, exclude)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if _use_tree(ds, use_tree):
        idx = _tree_candidates(ds, q, min(ds.n, k + (exclude is not None)))
        dist = pairwise_row(ds.points[idx], q, ds.metric)
    else:
        idx = np.arange(ds.n)
        dist = ds.distances_to(q)
    if exclude is not None:
        keep = idx != exclude
        idx, dist = idx[keep], dist[keep]
    idx, dist = _smallest(idx, dist, k)
    return KnnResult(idx, dist)


def nndist(ds: Dataset, p: int, k: int, use_tree=None) -> float:
    """Distance from point ``p`` to its k-th nearest other point."""
    return float(knn_query(ds, ds.points[p], k, exclude=p, use_tree=use_tree).distances[-1])


def build_kdist_table(ds: Dataset, k_max: int, use_tree=None) -> KDistTable:
    _check_k(ds, k_max, exclude=0)
    n = ds.n
    out = np.empty((n, k_max))
    if _use_tree(ds, use_tree):
        tree = _tree(ds)
        p = _minkowski_p(ds.metric)
        dist, _ = tree.query(ds.points, k=k_max + 1, p=p)
        radii = dist[:, -1] * (1 + _RADIUS_SLACK) + 1e-12
        balls = tree.query_ball_point(ds.points, radii, p=p)
        for i in range(n):
            idx = np.asarray(balls[i], dtype=np.int64)
            idx = idx[idx != i]
            d = pairwise_row(ds.points[idx], ds.points[i], ds.metric)
            out[i] = np.partition(d, k_max - 1)[:k_max] if len(d) > k_max else d
            out[i].sort()
    else:
        for i in range(n):
            d = pairwise_row(ds.points, ds.points[i], ds.metric)
            d[i] = np.inf
            row = np.partition(d, k_max - 1)[:k_max]
            row.sort()
            out[i] = row
    return KDistTable(out)


def rknn_bruteforce(ds: Dataset, q, k: int, q_index=None, table: KDistTable | None = None) -> set:
    """Reverse kNN by definition: o is returned iff dist(q, o) < nndist(o, k).

    ``table`` may supply precomputed k-distances (it must cover ``k``);
    otherwise every k-distance is recomputed by linear scan.
    """
    if k < 1 or k > ds.n - 1:
        raise KTooLarge(f"k={k} but the dataset has {ds.n} points")
    if table is not None and table.k_max >= k:
        kd = table.values[:, k - 1]
    else:
        kd = build_kdist_table(ds, k, use_tree=False).values[:, k - 1]
    d = ds.distances_to(q)
    hit = d < kd
    if q_index is not None:
        hit[q_index] = False
    return set(np.flatnonzero(hit).tolist())


# --------------------------------------------------------------------------
# table cache file: b"KDT1", u64 n, u64 k_max, n*k_max f64, little-endian
# --------------------------------------------------------------------------

_KDT_MAGIC = b"KDT1"
_KDT_HEADER = struct.Struct("<4sQQ")


def save_kdist_table(table: KDistTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_KDT_HEADER.pack(_KDT_MAGIC, table.n, table.k_max))
        fh.write(np.ascontiguousarray(table.values, dtype="<f8").tobytes())


def load_kdist_table(path) -> KDistTable:
    raw = Path(path).read_bytes()
    if len(raw) < _KDT_HEADER.size:
        raise CorruptArtifact("k-distance cache shorter than its header")
    magic, n, k_max = _KDT_HEADER.unpack_from(raw)
    if magic != _KDT_MAGIC:
        raise CorruptArtifact(f"bad magic {magic!r}")
    body = raw[_KDT_HEADER.size:]
    if len(body) != n * k_max * 8:
        raise CorruptArtifact("k-distance cache body has the wrong length")
    return KDistTable(np.frombuffer(body, dtype="<f8").reshape(n, k_max))
