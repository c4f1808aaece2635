"""Training with iterative sample re-weighting, and seeded random search."""

from __future__ import annotations

import hashlib
import json
import logging
import time
import traceback
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .bounds import AggMode, ResidualMatrix, aggregate, bound_matrices, certify
from .core import (
    Dataset,
    KDistTable,
    kdist_norm_apply,
    kdist_norm_fit,
    zscore_apply,
    zscore_fit,
)
from .engine import IndexArtifact, css_matrix
from .regress import MlpConfig, TreeConfig, config_from_dict, config_to_dict, make_model

log = logging.getLogger(__name__)

WEIGHT_SOURCES = ("css", "uniform", "kdist_inverse")
KDIST_INVERSE_EPS = 1e-9


@dataclass(frozen=True)
class TrainConfig:
    model: object = TreeConfig(max_depth=8)
    aggregate: AggMode = AggMode.COMBINED
    clip: bool = True
    monotone: bool = True
    iterations: int = 4
    k_max: int = 64
    seed: int = 0
    weight_source: str = "css"
    floor: bool = True
    rescale: bool = True

    def __post_init__(self):
        object.__setattr__(self, "aggregate", AggMode(self.aggregate))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.weight_source not in WEIGHT_SOURCES:
            raise ValueError(f"weight_source must be one of {WEIGHT_SOURCES}")

    def to_dict(self):
        return {
            "model": config_to_dict(self.model),
            "bounds": {"aggregate": self.aggregate.value, "clip": self.clip, "monotone": self.monotone},
            "trainer": {
                "iterations": self.iterations,
                "weight_source": self.weight_source,
                "floor": self.floor,
                "rescale": self.rescale,
            },
            "k_max": self.k_max,
            "seed": self.seed,
        }

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @classmethod
    def from_dict(cls, doc: dict, **overrides):
        b = doc.get("bounds", {})
        t = doc.get("trainer", {})
        kw = dict(
            model=config_from_dict(doc["model"]) if "model" in doc else TreeConfig(max_depth=8),
            aggregate=b.get("aggregate", "KD"),
            clip=b.get("clip", True),
            monotone=b.get("monotone", True),
            iterations=t.get("iterations", 4),
            weight_source=t.get("weight_source", "css"),
            floor=t.get("floor", True),
            rescale=t.get("rescale", True),
            k_max=doc.get("k_max", 64),
            seed=doc.get("seed", 0),
        )
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


@dataclass
class TrainResult:
    artifact: IndexArtifact
    css_trace: list
    weights: np.ndarray  # weights used for the final fit
    css: np.ndarray  # n x k_max candidate set sizes of the final artifact
    refits: int = 0


@dataclass(frozen=True)
class Prepared:
    """Normalized inputs and targets shared by every trial on one dataset."""

    ds: Dataset
    table: KDistTable
    zscore: object
    kdist_norm: object
    inputs: np.ndarray
    targets: np.ndarray


def prepare(ds: Dataset, table: KDistTable) -> Prepared:
    if table.n != ds.n:
        raise ValueError(f"table has {table.n} rows, dataset {ds.n} points")
    zs = zscore_fit(ds)
    kn = kdist_norm_fit(table)
    return Prepared(ds, table, zs, kn, zscore_apply(zs, ds.points), kdist_norm_apply(kn, table.values))


def fit_bounds(prep: Prepared, model, mode, clip=True, monotone=True, predictions=None):
    """Certified bound set for a trained model on the training data."""
    preds = model.predict_batch(prep.inputs) if predictions is None else predictions
    bs = aggregate(ResidualMatrix(prep.targets - preds), mode, clip, monotone)
    return certify(bs, preds, prep.table, prep.kdist_norm)


def make_artifact(prep: Prepared, model, bound_set) -> IndexArtifact:
    return IndexArtifact(
        model=model,
        k_max=prep.table.k_max,
        fingerprint=prep.ds.fingerprint(),
        zscore=prep.zscore,
        kdist_norm=prep.kdist_norm,
        bounds=bound_set,
    )


def _next_weights(cfg, css, table):
    if cfg.weight_source == "uniform":
        return np.ones(css.shape)
    if cfg.weight_source == "kdist_inverse":
        w = 1.0 / (KDIST_INVERSE_EPS + table.values)
    else:
        w = css.astype(np.float64)
        if cfg.floor:
            w = np.maximum(w, 1.0)
    if cfg.rescale:
        w = w / w.mean()
    return w


def train_reweighted(ds: Dataset, table: KDistTable, cfg: TrainConfig, prep: Prepared | None = None) -> TrainResult:
    """Fit, measure candidate set sizes, re-weight, repeat ``cfg.iterations`` times.

    Every round refits from scratch with the same seed. When the new weights
    equal the previous ones the refit would reproduce the same model, so it
    is skipped.
    """
    if table.k_max != cfg.k_max:
        raise ValueError(f"table k_max {table.k_max} differs from config k_max {cfg.k_max}")
    prep = prep or prepare(ds, table)
    weights = np.ones(prep.targets.shape)
    if cfg.weight_source == "kdist_inverse":
        weights = _next_weights(cfg, None, table)
    model, used, trace, refits = None, None, [], 0
    for it in range(cfg.iterations):
        if model is None or not np.array_equal(weights, used):
            model = make_model(cfg.model).fit(prep.inputs, prep.targets, weights, seed=cfg.seed)
            refits += 1
        used = weights
        preds = model.predict_batch(prep.inputs)
        bs = fit_bounds(prep, model, cfg.aggregate, cfg.clip, cfg.monotone, predictions=preds)
        b = bound_matrices(bs, preds, prep.kdist_norm)
        css = css_matrix(ds, b.lower, b.upper)
        trace.append(float(css.mean()))
        log.info("iteration %d: mean CSS %.3f", it + 1, trace[-1])
        weights = _next_weights(cfg, css, table)
    return TrainResult(make_artifact(prep, model, bs), trace, used, css, refits)


# --------------------------------------------------------------------------
# random search
# --------------------------------------------------------------------------

DEFAULT_SPACE = {
    "model_types": ["tree", "mlp"],
    "tree": {"max_depth": [1, 15]},
    "mlp": {
        "n_layers": [1, 5],
        "units": [4, 300],
        "batch_size_log2": [6, 12],
        "dropout": [0.0, 0.5],
        "loss": ["mae", "mse"],
        "learning_rate": 0.05,
        "epochs": 200,
    },
    "aggregate": ["K", "D", "KD"],
    "monotone": [True],
    "clip": [True],
}


def _pick(rng, spec):
    """Sample from a range spec: [lo, hi] ints, [lo, hi] floats, a choice list, or a constant."""
    if isinstance(spec, list):
        if len(spec) == 2 and all(isinstance(v, int) and not isinstance(v, bool) for v in spec):
            return int(rng.integers(spec[0], spec[1] + 1))
        if len(spec) == 2 and all(isinstance(v, float) for v in spec):
            return float(rng.uniform(spec[0], spec[1]))
        return spec[int(rng.integers(len(spec)))]
    return spec


def sample_config(rng, space: dict, base: TrainConfig) -> TrainConfig:
    kind = _pick(rng, space.get("model_types", ["tree"]))
    if kind == "tree":
        t = space.get("tree", {})
        model = TreeConfig(max_depth=_pick(rng, t.get("max_depth", [1, 15])))
    elif kind == "mlp":
        m = space.get("mlp", {})
        layers = _pick(rng, m.get("n_layers", [1, 5]))
        hidden = tuple(_pick(rng, m.get("units", [4, 300])) for _ in range(layers))
        model = MlpConfig(
            hidden=hidden,
            loss=_pick(rng, m.get("loss", ["mae", "mse"])),
            batch_size=2 ** _pick(rng, m.get("batch_size_log2", [6, 12])),
            dropout=_pick(rng, m.get("dropout", [0.0, 0.5])),
            learning_rate=_pick(rng, m.get("learning_rate", 0.05)),
            epochs=_pick(rng, m.get("epochs", 200)),
        )
    else:
        raise ValueError(f"unknown model type {kind!r} in search space")
    return replace(
        base,
        model=model,
        aggregate=AggMode(_pick(rng, space.get("aggregate", [base.aggregate.value]))),
        monotone=_pick(rng, space.get("monotone", [base.monotone])),
        clip=_pick(rng, space.get("clip", [base.clip])),
        seed=int(rng.integers(2**31)),
    )


def default_eval_ks(k_max):
    ks, k = [], 1
    while k <= k_max:
        ks.append(k)
        k *= 2
    return ks


@dataclass
class Trial:
    index: int
    config: TrainConfig
    artifact: Optional[IndexArtifact] = None
    metrics: dict = field(default_factory=dict)
    error: Optional[str] = None


def random_search(ds, table, space=None, trials=50, seed=0, base: TrainConfig | None = None, ks=None):
    """Sample and train ``trials`` configurations; failures are recorded, not raised.

    Trial ``i`` draws from ``default_rng([seed, i])``, so any trial can be
    reproduced in isolation. Metrics are mean/max candidate set sizes over
    all database points as queries at ``ks`` and the artifact size.
    """
    space = DEFAULT_SPACE if space is None else space
    base = base or TrainConfig(k_max=table.k_max)
    ks = default_eval_ks(table.k_max) if ks is None else list(ks)
    prep = prepare(ds, table)
    out = []
    for i in range(trials):
        rng = np.random.default_rng([seed, i])
        cfg = sample_config(rng, space, base)
        trial = Trial(i, cfg)
        t0 = time.perf_counter()
        try:
            res = train_reweighted(ds, table, cfg, prep=prep)
            css = res.css[:, np.asarray(ks) - 1]
            trial.artifact = res.artifact
            trial.metrics = {
                "param_count": res.artifact.param_count(),
                "mean_css": float(css.mean()),
                "max_css": int(css.max()),
                "css_trace": res.css_trace,
            }
            log.info("trial %d: %s size=%d mean_css=%.3f (%.1fs)", i, cfg.model, trial.metrics["param_count"],
                     trial.metrics["mean_css"], time.perf_counter() - t0)
        except Exception as exc:  # noqa: BLE001 - trial failures are data
            trial.error = f"{type(exc).__name__}: {exc}"
            log.warning("trial %d failed: %s", i, trial.error)
            log.debug("%s", traceback.format_exc())
        out.append(trial)
    return out
