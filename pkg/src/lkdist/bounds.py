"""Guaranteed k-distance bounds from model residuals.

Residuals are taken in the normalized target space. They are collapsed
per point (over all k), per k (over all points), or both, and turned back
into raw-space lower/upper bounds. Two optional enhancements tighten the
result: clipping at zero and restoring monotonicity in k.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np

from .core import KDistNormParams, KDistTable, kdist_norm_invert
from .errors import KOutOfRange, NonFiniteInput, ShapeMismatch


class AggMode(str, Enum):
    OVER_K = "K"  # one (lo, hi) pair per point
    OVER_POINTS = "D"  # one (lo, hi) pair per k
    COMBINED = "KD"

    @property
    def uses_points(self):
        return self in (AggMode.OVER_K, AggMode.COMBINED)

    @property
    def uses_ks(self):
        return self in (AggMode.OVER_POINTS, AggMode.COMBINED)


@dataclass(frozen=True)
class ResidualMatrix:
    delta: np.ndarray

    def __post_init__(self):
        d = np.array(self.delta, dtype=np.float64)
        if d.ndim != 2:
            raise ShapeMismatch("residual matrix must be n x k_max")
        if not np.all(np.isfinite(d)):
            raise NonFiniteInput("residuals must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "delta", d)


@dataclass(frozen=True)
class BoundSet:
    mode: AggMode
    point_lo: Optional[np.ndarray] = None  # length n, min over k
    point_hi: Optional[np.ndarray] = None
    k_lo: Optional[np.ndarray] = None  # length k_max, min over points
    k_hi: Optional[np.ndarray] = None
    clip_nonneg: bool = True
    restore_monotone: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", AggMode(self.mode))
        for name in ("point_lo", "point_hi", "k_lo", "k_hi"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=np.float64)
                v.setflags(write=False)
                object.__setattr__(self, name, v)
        if self.mode.uses_points and (self.point_lo is None or self.point_hi is None):
            raise ValueError(f"mode {self.mode.value} needs per-point deltas")
        if self.mode.uses_ks and (self.k_lo is None or self.k_hi is None):
            raise ValueError(f"mode {self.mode.value} needs per-k deltas")

    def vectors(self):
        """Stored delta vectors in serialization order."""
        out = []
        if self.mode.uses_points:
            out += [self.point_lo, self.point_hi]
        if self.mode.uses_ks:
            out += [self.k_lo, self.k_hi]
        return out

    def param_count(self) -> int:
        return sum(v.size for v in self.vectors())

    def with_flags(self, clip_nonneg=None, restore_monotone=None) -> "BoundSet":
        return replace(
            self,
            clip_nonneg=self.clip_nonneg if clip_nonneg is None else clip_nonneg,
            restore_monotone=self.restore_monotone if restore_monotone is None else restore_monotone,
        )

    def with_mode(self, mode) -> "BoundSet":
        """Drop to a sub-mode of the stored deltas (e.g. KD -> K)."""
        mode = AggMode(mode)
        if (mode.uses_points and self.point_lo is None) or (mode.uses_ks and self.k_lo is None):
            raise ValueError(f"cannot derive mode {mode.value} from {self.mode.value}")
        return BoundSet(
            mode,
            self.point_lo if mode.uses_points else None,
            self.point_hi if mode.uses_points else None,
            self.k_lo if mode.uses_ks else None,
            self.k_hi if mode.uses_ks else None,
            self.clip_nonneg,
            self.restore_monotone,
        )

    def delta_matrices(self, rows=None, k_max=None):
        """Effective (lo, hi) residual bounds broadcast to rows x k_max."""
        if self.mode.uses_points:
            plo, phi = self.point_lo, self.point_hi
            if rows is not None:
                plo, phi = plo[rows], phi[rows]
            plo, phi = plo[:, None], phi[:, None]
        if self.mode.uses_ks:
            klo, khi = self.k_lo[None, :], self.k_hi[None, :]
        if self.mode == AggMode.OVER_K:
            return plo, phi
        if self.mode == AggMode.OVER_POINTS:
            return klo, khi
        return np.maximum(plo, klo), np.minimum(phi, khi)


def compute_residuals(model, inputs, normalized_targets) -> ResidualMatrix:
    targets = np.asarray(normalized_targets, dtype=np.float64)
    preds = model.predict_batch(inputs)
    if preds.shape != targets.shape:
        raise ShapeMismatch(f"predictions {preds.shape} vs targets {targets.shape}")
    return ResidualMatrix(targets - preds)


def aggregate(residuals, mode, clip_nonneg=True, restore_monotone=True) -> BoundSet:
    delta = residuals.delta if isinstance(residuals, ResidualMatrix) else ResidualMatrix(residuals).delta
    mode = AggMode(mode)
    kwargs = {}
    if mode.uses_points:
        kwargs.update(point_lo=delta.min(axis=1), point_hi=delta.max(axis=1))
    if mode.uses_ks:
        kwargs.update(k_lo=delta.min(axis=0), k_hi=delta.max(axis=0))
    return BoundSet(mode, clip_nonneg=clip_nonneg, restore_monotone=restore_monotone, **kwargs)


class Bounds(NamedTuple):
    lower: np.ndarray
    upper: np.ndarray
    crossings: int


def raw_bounds(bound_set: BoundSet, predictions, kdist_norm: KDistNormParams, rows=None):
    """Denormalized bounds before any enhancement."""
    preds = np.asarray(predictions, dtype=np.float64)
    lo, hi = bound_set.delta_matrices(rows=rows)
    lb = kdist_norm_invert(kdist_norm, preds + lo)
    ub = kdist_norm_invert(kdist_norm, preds + hi)
    return lb, ub


def enhance(lb, ub, clip_nonneg=True, restore_monotone=True) -> Bounds:
    """Clip at zero, restore monotonicity in k, and resolve crossings.

    Crossed bounds (lower above upper) cannot occur for points whose true
    k-distance lies between them; if they do, the upper bound is lifted to the
    lower one and the event is counted.
    """
    lb = np.array(lb, dtype=np.float64)
    ub = np.array(ub, dtype=np.float64)
    if clip_nonneg:
        np.maximum(lb, 0.0, out=lb)
        np.maximum(ub, 0.0, out=ub)
    if restore_monotone:
        lb = np.maximum.accumulate(lb, axis=-1)
        ub = np.minimum.accumulate(ub[..., ::-1], axis=-1)[..., ::-1]
    crossed = lb > ub
    n_cross = int(crossed.sum())
    if n_cross:
        ub = np.where(crossed, lb, ub)
    return Bounds(lb, ub, n_cross)


def bound_matrices(bound_set, predictions, kdist_norm, rows=None) -> Bounds:
    """Final (lb, ub) for every row of ``predictions`` and every k."""
    lb, ub = raw_bounds(bound_set, predictions, kdist_norm, rows=rows)
    return enhance(lb, ub, bound_set.clip_nonneg, bound_set.restore_monotone)


def evaluate_bounds(bound_set, predictions_row, kdist_norm, p, k):
    """Lower and upper bound of nndist(p, k) from p's prediction row."""
    row = np.asarray(predictions_row, dtype=np.float64)
    if not 1 <= k <= row.shape[-1]:
        raise KOutOfRange(f"k={k} outside 1..{row.shape[-1]}")
    b = bound_matrices(bound_set, row[None, :], kdist_norm, rows=np.array([p]))
    return float(b.lower[0, k - 1]), float(b.upper[0, k - 1])


def _nudge(vec, violated, direction, scale):
    step = np.spacing(scale)
    return np.where(violated, vec + direction * step, vec)


def certify(bound_set: BoundSet, predictions, table: KDistTable, kdist_norm, max_rounds=200) -> BoundSet:
    """Widen stored deltas until raw bounds bracket every training k-distance.

    Residual arithmetic is exact in real numbers but the round trip
    ``pred + delta`` followed by denormalization can land an ulp on the
    wrong side of the true value. Each stored part (per point, per k) is
    certified on its own; the combined mode then inherits validity because
    rounding and denormalization are monotone.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    truth = table.values
    mag = np.abs(preds).max() + 1.0
    parts = {}
    for mode, lo_name, hi_name, axis in (
        (AggMode.OVER_K, "point_lo", "point_hi", 1),
        (AggMode.OVER_POINTS, "k_lo", "k_hi", 0),
    ):
        if getattr(bound_set, lo_name) is None:
            continue
        single = bound_set.with_mode(mode)
        lo, hi = getattr(single, lo_name).copy(), getattr(single, hi_name).copy()
        for _ in range(max_rounds):
            trial = replace(single, **{lo_name: lo, hi_name: hi})
            lb, ub = raw_bounds(trial, preds, kdist_norm)
            bad_lo = (lb > truth).any(axis=axis)
            bad_hi = (ub < truth).any(axis=axis)
            if not (bad_lo.any() or bad_hi.any()):
                break
            mag_v = mag + np.abs(lo)
            lo = _nudge(lo, bad_lo, -1.0, mag_v)
            hi = _nudge(hi, bad_hi, +1.0, mag + np.abs(hi))
        else:
            raise RuntimeError("bound certification did not converge")
        parts[lo_name], parts[hi_name] = lo, hi
    return replace(bound_set, **parts)


def violations(bound_set, predictions, table, kdist_norm) -> int:
    """Count (p, k) cells whose true k-distance escapes its bounds."""
    b = bound_matrices(bound_set, predictions, kdist_norm)
    t = table.values
    return int(((b.lower > t) | (b.upper < t)).sum())
