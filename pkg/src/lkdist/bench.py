"""Evaluation reports, the ablation grid, Pareto skylines and synthetic data."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .bounds import AggMode
from .core import Dataset, Metric
from .engine import IndexArtifact, QueryEngine
from .errors import InvalidSpec, KOutOfRange
from .trainer import TrainConfig, default_eval_ks, fit_bounds, make_artifact, prepare, train_reweighted

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = [
    "run_id", "dataset", "model_type", "config_hash", "seed", "agg_mode", "clip",
    "monotone", "sample_weights", "iterations", "param_count", "mean_css", "max_css", "wall_ms",
]
FULL_QUERY_SET_LIMIT = 25_000
SAMPLED_QUERIES = 10_000


@dataclass
class EvalReport:
    ks: list
    mean_css_per_k: list
    max_css_per_k: list
    param_count: int
    provenance: dict = field(default_factory=dict)
    wall_ms: float = 0.0

    @property
    def mean_css(self) -> float:
        return float(np.mean(self.mean_css_per_k))

    @property
    def max_css(self) -> int:
        return int(max(self.max_css_per_k))


def query_indices(n, query_set="auto", seed=0):
    """Database points used as queries.

    ``"all"`` uses every point, an integer m draws a seeded sample of m
    points, and ``"auto"`` picks all points up to 25,000 and a 10,000-point
    sample above that.
    """
    if query_set == "auto":
        query_set = "all" if n <= FULL_QUERY_SET_LIMIT else SAMPLED_QUERIES
    if query_set == "all":
        return np.arange(n)
    m = int(query_set)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=min(m, n), replace=False))


def evaluate(artifact: IndexArtifact, ds: Dataset, ks=None, query_set="auto", seed=0,
             refine=False, provenance=None) -> EvalReport:
    """Candidate set sizes of ``artifact`` with database points as queries.

    The candidate count is fixed by the filter step alone; ``refine=True``
    additionally runs the refinement of every query (same CSS, slower).
    """
    t0 = time.perf_counter()
    ks = default_eval_ks(artifact.k_max) if ks is None else list(ks)
    if any(k < 1 or k > artifact.k_max for k in ks):
        raise KOutOfRange(f"every k must lie in 1..{artifact.k_max}")
    engine = QueryEngine(artifact, ds)
    qi = query_indices(ds.n, query_set, seed)
    if refine:
        css = np.array([[engine.query(ds.points[i], k, q_index=i).css for k in ks] for i in qi])
    else:
        css = engine.css_matrix(qi, ks)
    prov = {"dataset_fingerprint": ds.fingerprint().hex(), "queries": len(qi), "seed": seed}
    prov.update(provenance or {})
    return EvalReport(
        ks=ks,
        mean_css_per_k=[float(v) for v in css.mean(axis=0)],
        max_css_per_k=[int(v) for v in css.max(axis=0)],
        param_count=artifact.param_count(),
        provenance=prov,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


# --------------------------------------------------------------------------
# ablation grid
# --------------------------------------------------------------------------


@dataclass
class AblationRow:
    sample_weights: bool
    aggregate: AggMode
    monotone: bool
    report: EvalReport

    @property
    def label(self):
        agg = {"K": "K", "D": "D", "KD": "KD"}[self.aggregate.value]
        return ("S" if self.sample_weights else "") + agg + ("M" if self.monotone else "")


def ablation_grid(ds, table, base: TrainConfig, ks=None, query_set="auto", seed=0):
    """The 12 rows of sample weights x {K, D, KD} x monotonicity.

    One model is trained with CSS re-weighting (under ``base``'s bound
    settings) and one with uniform weights. Every aggregation/monotonicity
    row re-derives bounds from the shared model, so rows with the same
    weighting differ only in their bounds.
    """
    prep = prepare(ds, table)
    rows = []
    for weighted in (True, False):
        cfg = replace(base, weight_source="css" if weighted else "uniform",
                      iterations=base.iterations if weighted else 1)
        model = train_reweighted(ds, table, cfg, prep=prep).artifact.model
        preds = model.predict_batch(prep.inputs)
        full = fit_bounds(prep, model, AggMode.COMBINED, base.clip, True, predictions=preds)
        for agg in (AggMode.COMBINED, AggMode.OVER_K, AggMode.OVER_POINTS):
            for mono in (True, False):
                bs = full.with_mode(agg).with_flags(restore_monotone=mono)
                art = make_artifact(prep, model, bs)
                rep = evaluate(art, ds, ks, query_set, seed, provenance={"config": cfg.to_dict()})
                rows.append(AblationRow(weighted, agg, mono, rep))
    return rows


# --------------------------------------------------------------------------
# skyline
# --------------------------------------------------------------------------


def _size_css(r):
    if isinstance(r, EvalReport):
        return r.param_count, r.mean_css
    if isinstance(r, dict):
        return r["param_count"], r["mean_css"]
    return r[0], r[1]


def skyline(reports):
    """Reports not dominated in (size, mean CSS), sorted by size.

    A report is dominated if another is no worse in both and strictly better
    in one; exact ties are all kept.
    """
    reports = list(reports)
    keys = [_size_css(r) for r in reports]
    keep = []
    for i, (s, c) in enumerate(keys):
        dominated = any(
            (s2 <= s and c2 <= c) and (s2 < s or c2 < c) for j, (s2, c2) in enumerate(keys) if j != i
        )
        if not dominated:
            keep.append(i)
    keep.sort(key=lambda i: (keys[i][0], keys[i][1], i))
    return [reports[i] for i in keep]


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


def make_synthetic(spec: dict, seed=0) -> Dataset:
    """Gaussian blobs plus an optional uniform background.

    ``spec`` example::

        {"d": 2,
         "blobs": [{"center": [0, 0], "sigma": 0.1, "n": 40},
                   {"center": [20, 0], "sigma": 10, "n": 960}],
         "background": {"n": 100, "low": [-30, -30], "high": [50, 30]},
         "metric": "euclidean"}
    """
    try:
        blobs = spec.get("blobs", [])
        bg = spec.get("background")
        d = int(spec.get("d", len(blobs[0]["center"]) if blobs else len(bg["low"])))
    except (KeyError, IndexError, TypeError) as exc:
        raise InvalidSpec(f"malformed synthetic spec: {exc}") from None
    if d < 1:
        raise InvalidSpec("d must be positive")
    rng = np.random.default_rng(seed)
    parts = []
    for b in blobs:
        center = np.asarray(b.get("center", np.zeros(d)), dtype=np.float64)
        sigma, n = float(b.get("sigma", 1.0)), int(b.get("n", 0))
        if center.shape != (d,) or sigma <= 0 or n < 0:
            raise InvalidSpec(f"bad blob {b!r}")
        parts.append(rng.normal(center, sigma, size=(n, d)))
    if bg:
        low = np.asarray(bg["low"], dtype=np.float64)
        high = np.asarray(bg["high"], dtype=np.float64)
        if low.shape != (d,) or high.shape != (d,) or np.any(high <= low):
            raise InvalidSpec(f"bad background {bg!r}")
        parts.append(rng.uniform(low, high, size=(int(bg.get("n", 0)), d)))
    pts = np.vstack(parts) if parts else np.empty((0, d))
    if pts.shape[0] < 2:
        raise InvalidSpec("synthetic spec yields fewer than 2 points")
    return Dataset(pts, Metric(spec.get("metric", "euclidean")))


def loglog_fit(row):
    """Least-squares line through (ln k, ln kdist); returns (slope, icept, r2, max_abs_resid)."""
    row = np.maximum(np.asarray(row, dtype=np.float64), 1e-12)
    x = np.log(np.arange(1, len(row) + 1))
    y = np.log(row)
    slope, icept = np.polyfit(x, y, 1)
    resid = y - (slope * x + icept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    return slope, icept, r2, float(np.abs(resid).max())


# --------------------------------------------------------------------------
# CSV and SVG output
# --------------------------------------------------------------------------


def config_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:12]


def metrics_row(run_id, dataset, report: EvalReport, cfg: Optional[TrainConfig] = None, model_type=None):
    return {
        "run_id": run_id,
        "dataset": dataset,
        "model_type": model_type or (cfg.model.kind if cfg else ""),
        "config_hash": cfg.config_hash() if cfg else config_hash(report.provenance),
        "seed": cfg.seed if cfg else report.provenance.get("seed", ""),
        "agg_mode": cfg.aggregate.value if cfg else "",
        "clip": cfg.clip if cfg else "",
        "monotone": cfg.monotone if cfg else "",
        "sample_weights": (cfg.weight_source != "uniform") if cfg else "",
        "iterations": cfg.iterations if cfg else "",
        "param_count": report.param_count,
        "mean_css": f"{report.mean_css:.6f}",
        "max_css": report.max_css,
        "wall_ms": f"{report.wall_ms:.1f}",
    }


def append_metrics(path, rows):
    """Append rows to the metrics CSV, writing the versioned header on creation."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        if new:
            fh.write(f"# lkdist metrics v{CSV_SCHEMA_VERSION}\n")
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(r)


def read_metrics(path):
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def skyline_svg(series: dict, baselines: dict | None = None, width=560, height=420, title="") -> str:
    """Log-log scatter of (size, mean CSS) per dataset with skyline lines.

    ``series`` maps a dataset name to a list of (size, css) points; the
    optional ``baselines`` map the same names to a single (size, css) point.
    """
    baselines = baselines or {}
    pts = [p for v in series.values() for p in v] + list(baselines.values())
    pts = [(s, c) for s, c in pts if s > 0 and c > 0]
    if not pts:
        pts = [(1, 1), (10, 10)]
    xs = [math.log10(s) for s, _ in pts]
    ys = [math.log10(c) for _, c in pts]
    x0, x1 = math.floor(min(xs)), math.ceil(max(xs)) or 1
    y0, y1 = math.floor(min(ys)), math.ceil(max(ys)) or 1
    x1 = max(x1, x0 + 1)
    y1 = max(y1, y0 + 1)
    pad = 50

    def px(s):
        return pad + (math.log10(s) - x0) / (x1 - x0) * (width - 2 * pad)

    def py(c):
        return height - pad - (math.log10(c) - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle">model size (parameters)</text>',
        f'<text x="14" y="{height / 2}" transform="rotate(-90 14 {height / 2})" text-anchor="middle">mean CSS</text>',
    ]
    if title:
        out.append(f'<text x="{width / 2}" y="20" text-anchor="middle">{title}</text>')
    for e in range(x0, x1 + 1):
        out.append(f'<text x="{px(10 ** e):.1f}" y="{height - pad + 15}" text-anchor="middle">1e{e}</text>')
    for e in range(y0, y1 + 1):
        out.append(f'<text x="{pad - 6}" y="{py(10 ** e) + 4:.1f}" text-anchor="end">1e{e}</text>')
    for i, (name, points) in enumerate(series.items()):
        col = colors[i % len(colors)]
        points = sorted((s, c) for s, c in points if s > 0 and c > 0)
        if len(points) > 1:
            path = " ".join(f"{px(s):.1f},{py(c):.1f}" for s, c in points)
            out.append(f'<polyline points="{path}" fill="none" stroke="{col}"/>')
        for s, c in points:
            out.append(f'<circle cx="{px(s):.1f}" cy="{py(c):.1f}" r="3" fill="{col}"/>')
        out.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" fill="{col}">{name}</text>')
        if name in baselines:
            s, c = baselines[name]
            if s > 0 and c > 0:
                x, y = px(s), py(c)
                out.append(f'<path d="M{x - 5:.1f},{y - 5:.1f} L{x + 5:.1f},{y + 5:.1f} M{x - 5:.1f},{y + 5:.1f} L{x + 5:.1f},{y - 5:.1f}" stroke="black" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out)
