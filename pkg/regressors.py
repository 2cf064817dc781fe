"""Huber-loss regressors used as ensemble members.

Three model families share one small interface (`predict`, `to_sections`,
`feature_count`): a gradient-boosted tree ensemble with exact greedy splits,
an MLP that fuses modality blocks through softmax attention, and a ridge
baseline. All fits are deterministic given data, parameters and seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from pipeline_errors import DivergenceError, ModelError, ShapeError, SingularityError
from post_data import make_rng

logger = logging.getLogger(__name__)

MIN_GAIN = 1e-12
NORM_EPS = 1e-5


@dataclass(frozen=True)
class HuberParams:
    delta: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.delta) and self.delta > 0):
            raise ModelError(f"Huber delta must be finite and positive, got {self.delta}")


def huber_loss(y, yhat, p):
    """Loss and d(loss)/d(yhat) for one prediction."""
    r = y - yhat
    if abs(r) <= p.delta:
        return 0.5 * r * r, -r
    return p.delta * abs(r) - 0.5 * p.delta * p.delta, -p.delta * math.copysign(1.0, r)


def huber_loss_array(y, yhat, delta):
    r = np.asarray(y, dtype=np.float64) - np.asarray(yhat, dtype=np.float64)
    small = np.abs(r) <= delta
    loss = np.where(small, 0.5 * r * r, delta * np.abs(r) - 0.5 * delta * delta)
    grad = np.where(small, -r, -delta * np.sign(r))
    return loss, grad


def _weights(sample_weight, n):
    if sample_weight is None:
        return np.ones(n)
    w = np.asarray(sample_weight, dtype=np.float64)
    if w.shape != (n,) or (w < 0).any() or not np.isfinite(w).all() or w.sum() <= 0:
        raise ShapeError("sample weights must be finite, non-negative, one per row, with a positive sum")
    return w


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeError(f"expected a non-empty 2-D feature matrix, got shape {X.shape}")
    if y.shape != (X.shape[0],):
        raise ShapeError(f"{X.shape[0]} rows but {y.shape} labels")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ShapeError("features and labels must be finite")
    return X, y


def _check_width(X, feature_count):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and X.size == 0:
        X = X.reshape(0, feature_count)
    if X.ndim != 2 or X.shape[1] != feature_count:
        raise ShapeError(f"model expects {feature_count} columns, got shape {X.shape}")
    return X


def weighted_median(values, weights):
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if np.all(weights == weights[0]):
        return float(np.median(values))
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    return float(values[order][np.searchsorted(cum, 0.5 * cum[-1])])


# Gradient-boosted trees

@dataclass(frozen=True)
class GbdtParams:
    n_trees: int = 100
    learning_rate: float = 0.1
    max_depth: int = 4
    min_leaf: int = 20
    subsample: float = 1.0


@dataclass(frozen=True)
class RegressionTree:
    """Flat tree arrays; feature == -1 marks a leaf. Rows with x <= threshold go left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def leaf_count(self):
        return int((self.feature < 0).sum())

    def depth(self):
        depths = np.zeros(len(self.feature), dtype=np.int64)
        for node in range(len(self.feature)):
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def predict(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                return self.value[node]
            go_left = X[rows, np.where(internal, feat, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)


@dataclass
class GbdtModel:
    base_score: float
    trees: list
    learning_rate: float
    max_depth: int
    min_leaf: int
    n_trees: int
    feature_count: int
    train_loss: list = field(default_factory=list)

    kind = "gbdt"

    def predict(self, X):
        X = _check_width(X, self.feature_count)
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            out += tree.predict(X)
        return out

    def to_sections(self):
        sections = {
            "meta": {
                "base_score": self.base_score, "learning_rate": self.learning_rate,
                "max_depth": self.max_depth, "min_leaf": self.min_leaf, "n_trees": self.n_trees,
                "feature_count": self.feature_count, "tree_count": len(self.trees),
            },
            "train_loss": np.asarray(self.train_loss, dtype=np.float64),
        }
        for i, tree in enumerate(self.trees):
            for name in ("feature", "threshold", "left", "right", "value"):
                sections[f"tree{i}/{name}"] = getattr(tree, name)
        return sections

    @classmethod
    def from_sections(cls, sections):
        meta = sections["meta"]
        trees = [
            RegressionTree(*(sections[f"tree{i}/{name}"] for name in ("feature", "threshold", "left", "right", "value")))
            for i in range(meta["tree_count"])
        ]
        return cls(
            base_score=meta["base_score"], trees=trees, learning_rate=meta["learning_rate"],
            max_depth=meta["max_depth"], min_leaf=meta["min_leaf"], n_trees=meta["n_trees"],
            feature_count=meta["feature_count"], train_loss=list(sections["train_loss"]),
        )


def _best_split(X, g, w, min_leaf):
    """
    Exact greedy split maximising weighted variance reduction

    Returns (gain, feature, threshold); ties go to the lowest feature, then
    the lowest threshold.
    """
    m, d = X.shape
    if m < 2 * min_leaf or m < 2:
        return 0.0, -1, 0.0
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    ws = w[order]
    gs = (w * g)[order]
    wl = np.cumsum(ws, axis=0)[:-1]
    gl = np.cumsum(gs, axis=0)[:-1]
    w_total = w.sum()
    g_total = (w * g).sum()
    wr = w_total - wl
    gr = g_total - gl
    counts = np.arange(1, m)[:, None]
    valid = (xs[:-1] < xs[1:]) & (counts >= min_leaf) & (m - counts >= min_leaf) & (wl > 0) & (wr > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = gl * gl / wl + gr * gr / wr - g_total * g_total / w_total
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain.T))
    feature, position = divmod(flat, m - 1)
    best = gain[position, feature]
    if not np.isfinite(best) or best <= MIN_GAIN:
        return 0.0, -1, 0.0
    return float(best), int(feature), float(xs[position, feature])


def _grow_tree(X, g, w, params):
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(rows, depth):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(params.learning_rate * float(np.dot(w[rows], g[rows]) / w[rows].sum()))
        if depth >= params.max_depth:
            return node
        _, f, t = _best_split(X[rows], g[rows], w[rows], params.min_leaf)
        if f < 0:
            return node
        goes_left = X[rows, f] <= t
        feature[node], threshold[node] = f, t
        left[node] = grow(rows[goes_left], depth + 1)
        right[node] = grow(rows[~goes_left], depth + 1)
        return node

    grow(np.arange(X.shape[0]), 0)
    return RegressionTree(
        np.asarray(feature, dtype=np.int64), np.asarray(threshold), np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64), np.asarray(value),
    )


def gbdt_fit(X, y, params, p, seed=0, sample_weight=None):
    """
    Boost depth-limited trees on negative Huber gradients

    Parameters:
    - X, y: training matrix and labels
    - params: GbdtParams
    - p: HuberParams
    - seed: drives row subsampling when params.subsample < 1
    - sample_weight: optional per-row loss weights

    Returns:
    - GbdtModel whose base score is the (weighted) median label
    """
    X, y = _check_xy(X, y)
    if X.shape[0] < 2 * params.min_leaf:
        raise ShapeError(f"{X.shape[0]} rows cannot hold two leaves of {params.min_leaf}")
    w = _weights(sample_weight, X.shape[0])
    rng = make_rng(seed)
    base = weighted_median(y, w)
    current = np.full(y.shape, base)
    loss, grad = huber_loss_array(y, current, p.delta)
    history = [float(np.dot(w, loss) / w.sum())]
    trees = []
    for _ in range(params.n_trees):
        rows = np.arange(X.shape[0])
        if params.subsample < 1.0:
            rows = np.sort(rng.choice(X.shape[0], max(2 * params.min_leaf, int(params.subsample * X.shape[0])), replace=False))
        tree = _grow_tree(X[rows], -grad[rows], w[rows], params)
        current = current + tree.predict(X)
        loss, grad = huber_loss_array(y, current, p.delta)
        history.append(float(np.dot(w, loss) / w.sum()))
        trees.append(tree)
    logger.debug("gbdt: %d trees, training loss %.6f -> %.6f", len(trees), history[0], history[-1])
    return GbdtModel(
        base_score=base, trees=trees, learning_rate=params.learning_rate, max_depth=params.max_depth,
        min_leaf=params.min_leaf, n_trees=params.n_trees, feature_count=X.shape[1], train_loss=history,
    )


# Attention MLP

@dataclass(frozen=True)
class MlpParams:
    projection_width: int = 16
    hidden: tuple = (32, 16)
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 5.0
    norm_decay: float = 0.99


@dataclass
class MlpModel:
    """Parameters live in one flat dict so gradients and updates share keys."""

    vector_blocks: list
    scalar_columns: list
    params: dict
    norm_means: list
    norm_vars: list
    feature_count: int
    attention_means: dict = field(default_factory=dict)
    # blocks constant over the training rows; held at zero attention
    silent_blocks: list = field(default_factory=list)

    kind = "mlp"

    @property
    def n_hidden(self):
        return len(self.norm_means)

    def predict(self, X):
        X = _check_width(X, self.feature_count)
        out, _ = mlp_forward(self, X, training=False)
        return out

    def attention(self, X):
        X = _check_width(X, self.feature_count)
        _, cache = mlp_forward(self, X, training=False)
        return cache["attention"]

    def to_sections(self):
        sections = {
            "meta": {
                "vector_blocks": [list(b) for b in self.vector_blocks],
                "scalar_columns": list(self.scalar_columns),
                "feature_count": self.feature_count,
                "n_hidden": self.n_hidden,
                "attention_means": self.attention_means,
                "silent_blocks": list(self.silent_blocks),
                "param_names": sorted(self.params),
            },
        }
        for name in sorted(self.params):
            sections[f"param/{name}"] = self.params[name]
        for i in range(self.n_hidden):
            sections[f"norm{i}/mean"] = self.norm_means[i]
            sections[f"norm{i}/var"] = self.norm_vars[i]
        return sections

    @classmethod
    def from_sections(cls, sections):
        meta = sections["meta"]
        return cls(
            vector_blocks=[tuple(b) for b in meta["vector_blocks"]],
            scalar_columns=list(meta["scalar_columns"]),
            params={name: sections[f"param/{name}"] for name in meta["param_names"]},
            norm_means=[sections[f"norm{i}/mean"] for i in range(meta["n_hidden"])],
            norm_vars=[sections[f"norm{i}/var"] for i in range(meta["n_hidden"])],
            feature_count=meta["feature_count"],
            attention_means=meta["attention_means"],
            silent_blocks=list(meta.get("silent_blocks", [])),
        )


def split_blocks(block_spans, feature_count):
    """Vector blocks (width >= 2) get attention; width-1 blocks and uncovered columns pass through."""
    vector, covered = [], set()
    for name, (start, end) in sorted(block_spans.items(), key=lambda item: item[1][0]):
        if end - start >= 2:
            vector.append((name, int(start), int(end)))
            covered.update(range(start, end))
    scalar = [j for j in range(feature_count) if j not in covered]
    return vector, scalar


def silent_blocks(X, vector_blocks):
    """Names of vector blocks with no variation over the rows of X, unless every block is silent."""
    silent = [name for name, start, end in vector_blocks if np.all(X[:, start:end] == X[:1, start:end])]
    return silent if len(silent) < len(vector_blocks) else []


def _glorot(rng, fan_in, fan_out, shape):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_mlp(block_spans, feature_count, params, seed):
    vector, scalar = split_blocks(block_spans, feature_count)
    if not vector and not scalar:
        raise ShapeError("MLP needs at least one feature column")
    rng = make_rng(seed)
    width = params.projection_width
    p = {}
    for i, (_, start, end) in enumerate(vector):
        p[f"proj{i}/weight"] = _glorot(rng, end - start, width, (end - start, width))
        p[f"proj{i}/bias"] = np.zeros(width)
    if vector:
        p["attn/query"] = _glorot(rng, width, 1, (width,))
        p["attn/bias"] = np.zeros(len(vector))
    fan_in = (width if vector else 0) + len(scalar)
    for layer, fan_out in enumerate(params.hidden):
        p[f"hidden{layer}/weight"] = _glorot(rng, fan_in, fan_out, (fan_in, fan_out))
        p[f"hidden{layer}/bias"] = np.zeros(fan_out)
        p[f"hidden{layer}/gain"] = np.ones(fan_out)
        p[f"hidden{layer}/shift"] = np.zeros(fan_out)
        fan_in = fan_out
    p["out/weight"] = _glorot(rng, fan_in, 1, (fan_in,))
    p["out/bias"] = np.zeros(1)
    return MlpModel(
        vector_blocks=vector, scalar_columns=scalar, params=p,
        norm_means=[np.zeros(h) for h in params.hidden], norm_vars=[np.ones(h) for h in params.hidden],
        feature_count=feature_count,
    )


def mlp_forward(model, X, training):
    """Forward pass; training mode standardises hidden units with batch statistics."""
    p = model.params
    cache = {"X": X}
    n = X.shape[0]
    parts = []
    if model.vector_blocks:
        Z = np.stack([
            X[:, start:end] @ p[f"proj{i}/weight"] + p[f"proj{i}/bias"]
            for i, (_, start, end) in enumerate(model.vector_blocks)
        ], axis=1)
        scores = Z @ p["attn/query"] + p["attn/bias"]
        for i, (name, _, _) in enumerate(model.vector_blocks):
            if name in model.silent_blocks:
                scores[:, i] = -np.inf
        scores = scores - scores.max(axis=1, keepdims=True)
        A = np.exp(scores)
        A /= A.sum(axis=1, keepdims=True)
        parts.append(np.einsum("nb,nbh->nh", A, Z))
        cache.update(Z=Z, attention=A)
    else:
        cache["attention"] = np.zeros((n, 0))
    if model.scalar_columns:
        parts.append(X[:, model.scalar_columns])
    h = np.hstack(parts)
    layers = []
    for layer in range(model.n_hidden):
        a = h @ p[f"hidden{layer}/weight"] + p[f"hidden{layer}/bias"]
        if training:
            mean, var = a.mean(axis=0), a.var(axis=0)
        else:
            mean, var = model.norm_means[layer], model.norm_vars[layer]
        inv_std = 1.0 / np.sqrt(var + NORM_EPS)
        a_hat = (a - mean) * inv_std
        pre = p[f"hidden{layer}/gain"] * a_hat + p[f"hidden{layer}/shift"]
        layers.append({"input": h, "a_hat": a_hat, "inv_std": inv_std, "pre": pre, "mean": mean, "var": var})
        h = np.maximum(pre, 0.0)
    cache["layers"] = layers
    cache["last"] = h
    return h @ p["out/weight"] + p["out/bias"][0], cache


def mlp_loss_and_grads(model, X, y, w, delta):
    """Weighted mean Huber loss and its gradient for every parameter (training mode)."""
    p = model.params
    out, cache = mlp_forward(model, X, training=True)
    loss, dloss = huber_loss_array(y, out, delta)
    total = w.sum()
    value = float(np.dot(w, loss) / total)
    dout = w * dloss / total
    grads = {"out/weight": cache["last"].T @ dout, "out/bias": np.array([dout.sum()])}
    dh = np.outer(dout, p["out/weight"])
    for layer in reversed(range(model.n_hidden)):
        c = cache["layers"][layer]
        dpre = dh * (c["pre"] > 0)
        grads[f"hidden{layer}/gain"] = (dpre * c["a_hat"]).sum(axis=0)
        grads[f"hidden{layer}/shift"] = dpre.sum(axis=0)
        da_hat = dpre * p[f"hidden{layer}/gain"]
        n = da_hat.shape[0]
        da = c["inv_std"] / n * (n * da_hat - da_hat.sum(axis=0) - c["a_hat"] * (da_hat * c["a_hat"]).sum(axis=0))
        grads[f"hidden{layer}/weight"] = c["input"].T @ da
        grads[f"hidden{layer}/bias"] = da.sum(axis=0)
        dh = da @ p[f"hidden{layer}/weight"].T
    if model.vector_blocks:
        Z, A = cache["Z"], cache["attention"]
        dF = dh[:, :Z.shape[2]]
        dZ = A[:, :, None] * dF[:, None, :]
        dA = np.einsum("nh,nbh->nb", dF, Z)
        dS = A * (dA - (A * dA).sum(axis=1, keepdims=True))
        dZ += dS[:, :, None] * p["attn/query"][None, None, :]
        grads["attn/query"] = np.einsum("nb,nbh->h", dS, Z)
        grads["attn/bias"] = dS.sum(axis=0)
        for i, (_, start, end) in enumerate(model.vector_blocks):
            grads[f"proj{i}/weight"] = X[:, start:end].T @ dZ[:, i, :]
            grads[f"proj{i}/bias"] = dZ[:, i, :].sum(axis=0)
    return value, grads, cache


def mlp_fit(X, y, block_spans, params, p, seed=0, sample_weight=None):
    """
    Train the attention MLP with momentum mini-batch descent on Huber loss

    Raises DivergenceError when an epoch ends with a non-finite loss.
    """
    X, y = _check_xy(X, y)
    if params.batch_size > X.shape[0]:
        raise ShapeError(f"batch size {params.batch_size} exceeds {X.shape[0]} rows")
    w = _weights(sample_weight, X.shape[0])
    model = init_mlp(block_spans, X.shape[1], params, seed)
    model.silent_blocks = silent_blocks(X, model.vector_blocks)
    if model.silent_blocks:
        logger.info("mlp attention skips constant blocks %s", model.silent_blocks)
    rng = make_rng(seed ^ 0x5EED)
    velocity = {name: np.zeros_like(value) for name, value in model.params.items()}
    run_means = [np.zeros_like(m) for m in model.norm_means]
    run_vars = [np.zeros_like(v) for v in model.norm_vars]
    updates = 0
    n = X.shape[0]
    for epoch in range(params.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, params.batch_size):
            batch = order[start:start + params.batch_size]
            if batch.size < 2:
                continue
            loss, grads, cache = mlp_loss_and_grads(model, X[batch], y[batch], w[batch], p.delta)
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = params.clip_norm / norm if norm > params.clip_norm else 1.0
            for name, g in grads.items():
                velocity[name] = params.momentum * velocity[name] - params.learning_rate * scale * g
                model.params[name] = model.params[name] + velocity[name]
            updates += 1
            for layer, c in enumerate(cache["layers"]):
                run_means[layer] = params.norm_decay * run_means[layer] + (1 - params.norm_decay) * c["mean"]
                run_vars[layer] = params.norm_decay * run_vars[layer] + (1 - params.norm_decay) * c["var"]
            epoch_loss += loss * batch.size
        epoch_loss /= n
        if not math.isfinite(epoch_loss) or not all(np.isfinite(v).all() for v in model.params.values()):
            raise DivergenceError(epoch, params.learning_rate)
        # debiased running averages (they start from zero)
        correction = 1.0 - params.norm_decay ** max(updates, 1)
        model.norm_means = [m / correction for m in run_means]
        model.norm_vars = [v / correction for v in run_vars]
        logger.debug("mlp epoch %d: loss %.6f", epoch, epoch_loss)
    attention = model.attention(X)
    model.attention_means = {
        name: float(np.dot(w, attention[:, i]) / w.sum()) for i, (name, _, _) in enumerate(model.vector_blocks)
    }
    return model


# Ridge

@dataclass(frozen=True)
class RidgeParams:
    l2: float = 1.0


@dataclass
class RidgeModel:
    weights: np.ndarray
    bias: float
    l2: float

    kind = "ridge"

    @property
    def feature_count(self):
        return self.weights.shape[0]

    def predict(self, X):
        X = _check_width(X, self.feature_count)
        return X @ self.weights + self.bias

    def to_sections(self):
        return {"meta": {"bias": self.bias, "l2": self.l2}, "weights": self.weights}

    @classmethod
    def from_sections(cls, sections):
        return cls(weights=sections["weights"], bias=sections["meta"]["bias"], l2=sections["meta"]["l2"])


def ridge_fit(X, y, l2, sample_weight=None):
    """Solve (Xc^T W Xc + l2 I) w = Xc^T W (y - ybar) on weighted-centred data."""
    X, y = _check_xy(X, y)
    if l2 < 0:
        raise ShapeError(f"l2 must be non-negative, got {l2}")
    w = _weights(sample_weight, X.shape[0])
    x_mean = w @ X / w.sum()
    y_mean = float(w @ y / w.sum())
    Xc = X - x_mean
    Xw = Xc * w[:, None]
    gram = Xc.T @ Xw + l2 * np.eye(X.shape[1])
    rhs = Xw.T @ (y - y_mean)
    if l2 == 0 and np.linalg.matrix_rank(Xc * np.sqrt(w)[:, None]) < X.shape[1]:
        raise SingularityError("normal equations are singular with l2 = 0")
    try:
        coef = linalg.solve(gram, rhs, assume_a="pos")
    except (linalg.LinAlgError, ValueError) as e:
        raise SingularityError(f"normal equations could not be solved: {e}") from e
    return RidgeModel(weights=coef, bias=y_mean - float(x_mean @ coef), l2=float(l2))


MODEL_CLASSES = {cls.kind: cls for cls in (GbdtModel, MlpModel, RidgeModel)}
MEMBER_KINDS = tuple(MODEL_CLASSES)


def predict(model, X):
    """Predictions of any member model; raises ShapeError on a width mismatch."""
    return model.predict(X)


def model_from_sections(kind, sections):
    return MODEL_CLASSES[kind].from_sections(sections)


def params_to_dict(params):
    return asdict(params)
