"""Per-point log-log linear k-distance bounds (the MRkNNCoP bound model).

Each point keeps a lower and an upper line in (ln k, ln k-distance) space:
four scalars per point. Lines come from a least-squares fit shifted by the
extreme residuals, then nudged so that the evaluated exponentials bracket
every training k-distance despite rounding.
"""

from __future__ import annotations

import numpy as np

from .bounds import Bounds, enhance
from .core import KDistTable
from .errors import KOutOfRange, NotFitted, ShapeMismatch

COP_TAG = b"COP1"
ZERO_FLOOR = 1e-12


class CopModel:
    tag = COP_TAG

    def __init__(self, restore_monotone=False):
        self.restore_monotone = restore_monotone
        self.lines = None  # n x 4: slope_lo, icept_lo, slope_hi, icept_hi
        self.k_max = None

    def _check(self):
        if self.lines is None:
            raise NotFitted("CoP model has not been fitted")

    @property
    def n(self):
        return self.lines.shape[0]

    def _log_k(self):
        return np.log(np.arange(1, self.k_max + 1, dtype=np.float64))

    def line_values(self, rows=None):
        """exp of lower and upper lines for the given rows, all k."""
        self._check()
        lines = self.lines if rows is None else self.lines[rows]
        lk = self._log_k()[None, :]
        lo = np.exp(lines[:, 0:1] * lk + lines[:, 1:2])
        hi = np.exp(lines[:, 2:3] * lk + lines[:, 3:4])
        return lo, hi

    def raw_bounds(self, rows=None):
        lo, hi = self.line_values(rows)
        # lines cannot reach 0; anything under the log floor stands for distance 0
        return np.where(lo <= ZERO_FLOOR, 0.0, lo), hi

    def bound_matrices(self, rows=None) -> Bounds:
        lb, ub = self.raw_bounds(rows)
        return enhance(lb, ub, clip_nonneg=True, restore_monotone=self.restore_monotone)

    def param_count(self):
        self._check()
        return int(self.lines.size)

    def hyperparams(self):
        return {"restore_monotone": self.restore_monotone, "k_max": self.k_max}

    def structure(self):
        return b""

    def scalars(self):
        self._check()
        return self.lines.ravel().astype(np.float64)

    @classmethod
    def from_parts(cls, hyperparams, structure, scalars):
        model = cls(hyperparams["restore_monotone"])
        model.k_max = hyperparams["k_max"]
        if len(scalars) % 4:
            raise ShapeMismatch("CoP scalar block must hold 4 values per point")
        model.lines = np.asarray(scalars, dtype=np.float64).reshape(-1, 4)
        return model


def fit_cop(table: KDistTable, restore_monotone=False, max_rounds=200) -> CopModel:
    model = CopModel(restore_monotone)
    model.k_max = k_max = table.k_max
    x = np.log(np.arange(1, k_max + 1, dtype=np.float64))
    t = table.values
    y = np.log(np.maximum(t, ZERO_FLOOR))
    xc = x - x.mean()
    var = (xc * xc).sum()
    if var > 0:
        slope = (y - y.mean(axis=1, keepdims=True)) @ xc / var
    else:
        slope = np.zeros(t.shape[0])
    icept = y.mean(axis=1) - slope * x.mean()
    resid = y - (slope[:, None] * x[None, :] + icept[:, None])
    lines = np.column_stack([slope, icept + resid.min(axis=1), slope, icept + resid.max(axis=1)])
    model.lines = lines

    target_lo = np.maximum(t, ZERO_FLOOR)
    for _ in range(max_rounds):
        lo, hi = model.line_values()
        bad_lo = (lo > target_lo).any(axis=1)
        bad_hi = (hi < t).any(axis=1)
        if not (bad_lo.any() or bad_hi.any()):
            return model
        lines[bad_lo, 1] -= np.spacing(np.abs(lines[bad_lo, 1]) + 1.0)
        lines[bad_hi, 3] += np.spacing(np.abs(lines[bad_hi, 3]) + 1.0)
    raise RuntimeError("CoP line certification did not converge")


def cop_bounds(model: CopModel, p: int, k: int):
    model._check()
    if not 1 <= k <= model.k_max:
        raise KOutOfRange(f"k={k} outside 1..{model.k_max}")
    b = model.bound_matrices(rows=np.array([p]))
    return float(b.lower[0, k - 1]), float(b.upper[0, k - 1])
