"""Regression models mapping z-scored coordinates to normalized k-distances.

Both models are multi-output: one forward pass yields predictions for every
k in 1..k_max. Trained parameters are stored at the model's declared width
(``dtype``), and prediction always runs on exactly those stored values so
that a model reloaded from disk predicts bit-identically.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateWeights, NonFiniteInput, NotFitted, ShapeMismatch

TREE_TAG = b"DTR1"
MLP_TAG = b"MLP1"


def _check_training_data(inputs, targets, weights):
    X = np.asarray(inputs, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeMismatch(f"inputs {X.shape} and targets {Y.shape} do not align")
    if weights is None:
        W = np.ones_like(Y)
    else:
        W = np.asarray(weights, dtype=np.float64)
        if W.shape != Y.shape:
            raise ShapeMismatch(f"weights {W.shape} must match targets {Y.shape}")
    for name, a in (("inputs", X), ("targets", Y), ("weights", W)):
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput(f"{name} contain NaN or Inf")
    if np.any(W < 0):
        raise DegenerateWeights("negative sample weight")
    if not np.any(W > 0):
        raise DegenerateWeights("all sample weights are zero")
    return X, Y, W


class KDistModel:
    """Common surface of the k-distance regressors."""

    tag: bytes = b""

    def fit(self, inputs, targets, weights=None, seed=0):
        raise NotImplementedError

    def predict_batch(self, inputs) -> np.ndarray:
        raise NotImplementedError

    def predict_row(self, x) -> np.ndarray:
        return self.predict_batch(np.asarray(x, dtype=np.float64)[None, :])[0]

    def param_count(self) -> int:
        return int(self.scalars().size)

    # serialization hooks: hyperparameters, structure bytes, parameter scalars
    def hyperparams(self) -> dict:
        raise NotImplementedError

    def structure(self) -> bytes:
        return b""

    def scalars(self) -> np.ndarray:
        raise NotImplementedError

    @classmethod
    def from_parts(cls, hyperparams: dict, structure: bytes, scalars: np.ndarray):
        raise NotImplementedError

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)


# --------------------------------------------------------------------------
# decision tree
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeConfig:
    max_depth: Optional[int] = None
    dtype: str = "float64"
    kind: str = field(default="tree", init=False)


def _weighted_sse_curve(y, w):
    """Weighted SSE summed over outputs for every prefix split of the rows.

    Returns (left, right) arrays of length m-1 where entry i is the cost of
    rows[:i+1] and rows[i+1:] respectively.
    """
    wy = w * y
    wyy = wy * y
    cw, cwy, cwyy = (np.cumsum(a, axis=0) for a in (w, wy, wyy))
    tw, twy, twyy = cw[-1], cwy[-1], cwyy[-1]

    def sse(sw, swy, swyy):
        with np.errstate(divide="ignore", invalid="ignore"):
            mean_term = np.where(sw > 0, swy * swy / sw, 0.0)
        return np.maximum(swyy - mean_term, 0.0).sum(axis=1)

    left = sse(cw[:-1], cwy[:-1], cwyy[:-1])
    right = sse(tw - cw[:-1], twy - cwy[:-1], twyy - cwyy[:-1])
    return left, right


def _leaf_value(y, w):
    # centred weighted mean: a column of identical targets maps to itself exactly
    base = y[0]
    sw = w.sum(axis=0)
    dev = (w * (y - base)).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        weighted = base + dev / sw
    plain = base + (y - base).mean(axis=0)
    return np.where(sw > 0, weighted, plain)


class DecisionTreeModel(KDistModel):
    """Greedy CART-style regression tree with vector-valued leaves.

    Splits maximise the reduction of the weighted squared error summed over
    all k outputs; ``x[dim] <= threshold`` goes left. Nodes are kept in flat
    preorder arrays.
    """

    tag = TREE_TAG

    def __init__(self, config: TreeConfig = TreeConfig()):
        self.config = config
        self.feature = None
        self.threshold = None
        self.left = None
        self.right = None
        self.value = None
        self.k_max = None

    def fit(self, inputs, targets, weights=None, seed=0):
        X, Y, W = _check_training_data(inputs, targets, weights)
        self.k_max = Y.shape[1]
        self._d = X.shape[1]
        feature, threshold, left, right, values = [], [], [], [], []
        max_depth = self.config.max_depth
        # explicit stack (right pushed first) yields preorder node numbering
        stack = [(np.arange(X.shape[0]), 0, -1, False)]
        while stack:
            rows, depth, parent, is_right = stack.pop()
            node = len(feature)
            if parent >= 0:
                (right if is_right else left)[parent] = node
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            values.append(None)
            y, w = Y[rows], W[rows]
            split = None
            if not np.all(y == y[0]) and (max_depth is None or depth < max_depth):
                split = self._best_split(X[rows], y, w)
            if split is None:
                values[node] = _leaf_value(y, w)
                continue
            dim, thr = split
            go_left = X[rows, dim] <= thr
            feature[node] = dim
            threshold[node] = thr
            stack.append((rows[~go_left], depth + 1, node, True))
            stack.append((rows[go_left], depth + 1, node, False))
        dt = self.dtype
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=dt)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.zeros((len(feature), self.k_max), dtype=dt)
        for i, v in enumerate(values):
            if v is not None:
                self.value[i] = v
        return self

    def _best_split(self, x, y, w):
        best_cost, best = np.inf, None
        dt = self.dtype
        for dim in range(x.shape[1]):
            order = np.argsort(x[:, dim], kind="stable")
            xs = x[order, dim]
            valid = xs[:-1] < xs[1:]
            if not valid.any():
                continue
            lcost, rcost = _weighted_sse_curve(y[order], w[order])
            cost = np.where(valid, lcost + rcost, np.inf)
            i = int(np.argmin(cost))
            if cost[i] < best_cost:
                lo, hi = xs[i], xs[i + 1]
                thr = dt.type((lo + hi) / 2)
                if not (lo <= thr < hi):
                    thr = dt.type(lo)
                    if not (lo <= thr < hi):
                        continue
                best_cost, best = cost[i], (dim, thr)
        return best

    def _check_fitted(self):
        if self.value is None:
            raise NotFitted("tree has not been fitted")

    def apply(self, inputs) -> np.ndarray:
        """Leaf index reached by every input row."""
        self._check_fitted()
        X = np.asarray(inputs, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            active = self.feature[node] >= 0
            if not active.any():
                return node
            r, nd = rows[active], node[active]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])

    def predict_batch(self, inputs) -> np.ndarray:
        self._check_fitted()
        X = np.asarray(inputs, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self._n_features():
            raise ShapeMismatch(f"expected rows of width {self._n_features()}, got {X.shape}")
        return self.value[self.apply(X)].astype(np.float64)

    def _n_features(self):
        return self._d

    @property
    def n_internal(self):
        return int((self.feature >= 0).sum())

    @property
    def n_leaves(self):
        return int((self.feature < 0).sum())

    def param_count(self) -> int:
        self._check_fitted()
        return 2 * self.n_internal + self.k_max * self.n_leaves

    def hyperparams(self):
        return {"max_depth": self.config.max_depth, "dtype": self.config.dtype,
                "k_max": self.k_max, "d": self._d}

    def structure(self):
        return (self.feature >= 0).astype(np.uint8).tobytes()

    def scalars(self):
        self._check_fitted()
        out = []
        for i in range(len(self.feature)):
            if self.feature[i] >= 0:
                out.append(np.array([self.feature[i], self.threshold[i]], dtype=self.dtype))
            else:
                out.append(self.value[i])
        return np.concatenate(out).astype(self.dtype)

    @classmethod
    def from_parts(cls, hyperparams, structure, scalars):
        model = cls(TreeConfig(hyperparams["max_depth"], hyperparams["dtype"]))
        k_max = model.k_max = hyperparams["k_max"]
        model._d = hyperparams["d"]
        internal = np.frombuffer(structure, dtype=np.uint8).astype(bool)
        m = len(internal)
        model.feature = np.full(m, -1, dtype=np.int64)
        model.threshold = np.zeros(m, dtype=model.dtype)
        model.left = np.full(m, -1, dtype=np.int64)
        model.right = np.full(m, -1, dtype=np.int64)
        model.value = np.zeros((m, k_max), dtype=model.dtype)
        pos = 0
        for i in range(m):
            if internal[i]:
                model.feature[i] = int(scalars[pos])
                model.threshold[i] = scalars[pos + 1]
                pos += 2
            else:
                model.value[i] = scalars[pos:pos + k_max]
                pos += k_max
        if pos != len(scalars):
            raise ShapeMismatch("tree scalar block length does not match its structure")
        # children follow from preorder layout
        stack = []
        for i in range(m):
            if stack:
                parent = stack[-1]
                if model.left[parent] < 0:
                    model.left[parent] = i
                else:
                    model.right[parent] = i
                    stack.pop()
            if internal[i]:
                stack.append(i)
        return model


# --------------------------------------------------------------------------
# multi-layer perceptron
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpConfig:
    hidden: tuple = (32,)
    loss: str = "mse"
    learning_rate: float = 0.05
    batch_size: int = 256
    epochs: int = 200
    dropout: float = 0.0
    dtype: str = "float32"
    kind: str = field(default="mlp", init=False)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.loss not in ("mse", "mae"):
            raise ValueError(f"loss must be 'mse' or 'mae', got {self.loss!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def _glorot(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _loss_grad(pred, y, w, loss):
    """Weighted mean loss over cells and its gradient w.r.t. ``pred``."""
    r = pred - y
    sw = w.sum()
    if loss == "mse":
        return (w * r * r).sum() / sw, 2.0 * w * r / sw
    return (w * np.abs(r)).sum() / sw, w * np.sign(r) / sw


def mlp_forward(params, X, dropout_masks=None):
    """Forward pass; returns output and layer cache."""
    acts = [X]
    pre = []
    h = X
    last = len(params) - 1
    for i, (Wm, b) in enumerate(params):
        z = h @ Wm + b
        pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
            if dropout_masks is not None:
                h = h * dropout_masks[i]
        else:
            h = z
        acts.append(h)
    return h, (acts, pre)


def mlp_backward(params, cache, grad_out, dropout_masks=None):
    acts, pre = cache
    grads = [None] * len(params)
    g = grad_out
    for i in range(len(params) - 1, -1, -1):
        Wm, _ = params[i]
        grads[i] = (acts[i].T @ g, g.sum(axis=0))
        if i > 0:
            g = g @ Wm.T
            if dropout_masks is not None:
                g = g * dropout_masks[i - 1]
            g = g * (pre[i - 1] > 0)
    return grads


class MlpModel(KDistModel):
    """Fully connected network, rectifier hidden layers, linear output.

    Trained with plain mini-batch gradient descent on the sample-weighted
    MSE or MAE. Inverted dropout is applied to hidden activations during
    training only.
    """

    tag = MLP_TAG

    def __init__(self, config: MlpConfig = MlpConfig()):
        self.config = config
        self.params = None
        self.history = []

    @property
    def layer_sizes(self):
        if self.params is None:
            return None
        return [self.params[0][0].shape[0]] + [Wm.shape[1] for Wm, _ in self.params]

    def init_params(self, d, k_max, seed=0):
        rng = np.random.default_rng(seed)
        sizes = [d, *self.config.hidden, k_max]
        return [(_glorot(rng, a, b), np.zeros(b)) for a, b in zip(sizes[:-1], sizes[1:])]

    def fit(self, inputs, targets, weights=None, seed=0):
        X, Y, W = _check_training_data(inputs, targets, weights)
        cfg = self.config
        rng = np.random.default_rng(seed)
        # train directly in the storage precision
        dt = self.dtype
        params = [(Wm.astype(dt), b.astype(dt))
                  for Wm, b in self.init_params(X.shape[1], Y.shape[1], seed=rng.integers(2**63))]
        X, Y, W = X.astype(dt), Y.astype(dt), W.astype(dt)
        lr = dt.type(cfg.learning_rate)
        n = X.shape[0]
        bs = max(1, min(cfg.batch_size, n))
        keep = 1.0 - cfg.dropout
        self.history = []
        scale = dt.type(1.0 / keep) if keep > 0 else dt.type(0.0)
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            Xs, Ys, Ws = X[order], Y[order], W[order]
            total = 0.0
            for start in range(0, n, bs):
                wb = Ws[start:start + bs]
                if not np.any(wb > 0):
                    continue
                m = wb.shape[0]
                masks = None
                if cfg.dropout > 0:
                    masks = [(rng.random((m, h), dtype=dt) < keep) * scale for h in cfg.hidden]
                pred, cache = mlp_forward(params, Xs[start:start + bs], masks)
                loss, g = _loss_grad(pred, Ys[start:start + bs], wb, cfg.loss)
                total += loss * m
                grads = mlp_backward(params, cache, g, masks)
                for (Wm, b), (gW, gb) in zip(params, grads):
                    Wm -= lr * gW
                    b -= lr * gb
            self.history.append(total / n)
        self.set_params(params)
        return self

    def set_params(self, params):
        dt = self.dtype
        self.params = [(np.asarray(Wm, dtype=dt), np.asarray(b, dtype=dt)) for Wm, b in params]
        return self

    def predict_batch(self, inputs) -> np.ndarray:
        if self.params is None:
            raise NotFitted("network has not been fitted")
        h = np.asarray(inputs, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.params[0][0].shape[0]:
            raise ShapeMismatch(f"expected rows of width {self.params[0][0].shape[0]}, got {h.shape}")
        last = len(self.params) - 1
        for i, (Wm, b) in enumerate(self.params):
            # row-wise einsum keeps every row's arithmetic independent of the batch
            h = np.einsum("ij,jk->ik", h, Wm.astype(np.float64), optimize=False) + b.astype(np.float64)
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def param_count(self) -> int:
        if self.params is None:
            raise NotFitted("network has not been fitted")
        return sum(Wm.size + b.size for Wm, b in self.params)

    def hyperparams(self):
        cfg = asdict(self.config)
        cfg.pop("kind")
        cfg["layer_sizes"] = self.layer_sizes
        return cfg

    def scalars(self):
        if self.params is None:
            raise NotFitted("network has not been fitted")
        return np.concatenate([np.concatenate([Wm.ravel(), b]) for Wm, b in self.params]).astype(self.dtype)

    @classmethod
    def from_parts(cls, hyperparams, structure, scalars):
        hp = dict(hyperparams)
        sizes = hp.pop("layer_sizes")
        hp["hidden"] = tuple(hp["hidden"])
        model = cls(MlpConfig(**hp))
        params, pos = [], 0
        for a, b in zip(sizes[:-1], sizes[1:]):
            Wm = scalars[pos:pos + a * b].reshape(a, b)
            pos += a * b
            params.append((Wm, scalars[pos:pos + b]))
            pos += b
        if pos != len(scalars):
            raise ShapeMismatch("network scalar block length does not match its layer sizes")
        return model.set_params(params)


# --------------------------------------------------------------------------
# construction and gradient checking
# --------------------------------------------------------------------------


def make_model(config) -> KDistModel:
    if isinstance(config, TreeConfig):
        return DecisionTreeModel(config)
    if isinstance(config, MlpConfig):
        return MlpModel(config)
    raise TypeError(f"unknown model config {config!r}")


def config_from_dict(spec: dict):
    spec = dict(spec)
    kind = spec.pop("type", spec.pop("kind", None))
    if kind == "tree":
        return TreeConfig(**spec)
    if kind == "mlp":
        if "hidden" in spec:
            spec["hidden"] = tuple(spec["hidden"])
        return MlpConfig(**spec)
    raise ValueError(f"unknown model type {kind!r}")


def config_to_dict(config) -> dict:
    out = asdict(config)
    out["type"] = out.pop("kind")
    if "hidden" in out:
        out["hidden"] = list(out["hidden"])
    return out


def config_json(config) -> str:
    return json.dumps(config_to_dict(config), sort_keys=True)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    n_excluded_cells: int

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def gradient_check(config: MlpConfig, tolerance=1e-5, d=3, k_max=4, batch=8, seed=0,
                   step=1e-6, kink_margin=1e-4) -> GradCheckReport:
    """Compare backpropagated gradients against central finite differences.

    Everything runs in 64-bit. For MAE, cells whose residual lies within
    ``kink_margin`` of zero are dropped (weight 0) since the loss has no
    derivative there.
    """
    rng = np.random.default_rng(seed)
    model = MlpModel(config)
    params = model.init_params(d, k_max, seed=int(rng.integers(2**31)))
    params = [(Wm, rng.normal(scale=0.1, size=b.shape)) for Wm, b in params]
    X = rng.normal(size=(batch, d))
    Y = rng.normal(size=(batch, k_max))
    Wt = rng.uniform(0.5, 2.0, size=(batch, k_max))
    excluded = 0
    if config.loss == "mae":
        pred, _ = mlp_forward(params, X)
        near = np.abs(pred - Y) < kink_margin
        excluded = int(near.sum())
        Wt = np.where(near, 0.0, Wt)
        if not np.any(Wt > 0):
            return GradCheckReport(0.0, tolerance, 0, excluded)

    def loss_of(ps):
        pred, _ = mlp_forward(ps, X)
        return _loss_grad(pred, Y, Wt, config.loss)[0]

    pred, cache = mlp_forward(params, X)
    _, g = _loss_grad(pred, Y, Wt, config.loss)
    grads = mlp_backward(params, cache, g)

    worst, count = 0.0, 0
    for li, (Wm, b) in enumerate(params):
        for which, arr in ((0, Wm), (1, b)):
            analytic = grads[li][which]
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + step
                up = loss_of(params)
                arr[idx] = orig - step
                down = loss_of(params)
                arr[idx] = orig
                numeric = (up - down) / (2 * step)
                a = analytic[idx]
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, abs(a - numeric) / denom)
                count += 1
    return GradCheckReport(worst, tolerance, count, excluded)
