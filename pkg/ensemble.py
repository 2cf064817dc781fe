"""K-fold ensemble of Huber regressors with per-fold simplex weights.

Every fold owns its preprocessing: imputation statistics, feature pipeline,
scaler and label standardisation are fitted on the fold's training rows
only. Predictions average the folds' weighted member sums in ascending fold
order.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg

from artifact_io import prefixed, unprefixed
from data_loader import ImputationPolicy, ImputationStats, apply_imputation, fit_imputation
from evaluation import mae, safe_src
from feature_builder import (
    FeatureConfig, FeaturePipeline, ScalerModel, apply_scaler, build_features, fit_feature_pipeline,
    fit_scaler, iqr_filter,
)
from pipeline_errors import (
    DataError, DegenerateInputError, FitError, FoldError, PipelineError, ShapeError,
)
from post_data import derive_seed, make_rng
from regressors import (
    GbdtParams, HuberParams, MlpParams, RidgeParams, gbdt_fit, mlp_fit, model_from_sections, ridge_fit,
)

logger = logging.getLogger(__name__)

WEIGHT_STEP = 0.1
WEIGHT_MIN_STEP = 1.0 / 160
IMPROVEMENT = 1e-12
LABEL_STD_FLOOR = 1e-12


@dataclass(frozen=True)
class EnsembleConfig:
    """Everything train_ensemble needs besides data and seed."""

    k: int = 5
    members: tuple = ("gbdt", "mlp", "ridge")
    metric: str = "mae"
    stratified: bool = False
    single_split: bool = False
    split_fraction: float = 0.2
    iqr_multiplier: float = 1.5
    huber_delta: float = 1.0
    standardize_labels: bool = True
    features: FeatureConfig = field(default_factory=FeatureConfig)
    imputation: ImputationPolicy = field(default_factory=ImputationPolicy)
    gbdt: GbdtParams = field(default_factory=GbdtParams)
    mlp: MlpParams = field(default_factory=MlpParams)
    ridge: RidgeParams = field(default_factory=RidgeParams)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        mlp = dict(data.pop("mlp"))
        mlp["hidden"] = tuple(mlp["hidden"])
        return cls(
            **{k: v for k, v in data.items() if k not in ("features", "imputation", "gbdt", "ridge", "members")},
            members=tuple(data["members"]),
            features=FeatureConfig(**data["features"]),
            imputation=ImputationPolicy(**data["imputation"]),
            gbdt=GbdtParams(**data["gbdt"]),
            mlp=MlpParams(**mlp),
            ridge=RidgeParams(**data["ridge"]),
        )


# Fold plans

@dataclass(frozen=True)
class FoldPlan:
    """Per-row validation fold; -1 marks rows that train in every fold."""

    k: int
    assignments: np.ndarray
    seed: int

    def validation_rows(self, fold):
        return np.flatnonzero(self.assignments == fold)

    def training_rows(self, fold):
        return np.flatnonzero(self.assignments != fold)

    def sizes(self):
        return [int((self.assignments == f).sum()) for f in range(self.k)]


def make_folds(n, k, seed, labels=None, stratified=False):
    """
    Seeded shuffle then round-robin fold assignment

    With `stratified`, the shuffled rows are stably re-ordered by label decile
    first, so each fold receives a similar label mix.
    """
    if k < 2:
        raise FoldError(f"need at least 2 folds, got {k}")
    if n < k:
        raise FoldError(f"{n} rows cannot fill {k} folds")
    order = make_rng(seed).permutation(n)
    if stratified:
        if labels is None or len(labels) != n:
            raise FoldError("stratified folds need one label per row")
        y = np.asarray(labels, dtype=np.float64)[order]
        edges = np.quantile(y, np.linspace(0.1, 0.9, 9))
        order = order[np.argsort(np.searchsorted(edges, y, side="right"), kind="stable")]
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = np.arange(n) % k
    return FoldPlan(k=k, assignments=assignments, seed=seed)


def single_split(n, seed, fraction=0.2):
    """One seeded train/validation split as a one-fold plan."""
    n_val = int(round(fraction * n))
    if not 1 <= n_val < n:
        raise FoldError(f"a {fraction:.2f} split of {n} rows leaves an empty side")
    order = make_rng(seed).permutation(n)
    assignments = np.full(n, -1, dtype=np.int64)
    assignments[order[:n_val]] = 0
    return FoldPlan(k=1, assignments=assignments, seed=seed)


# Weight search

def _objective(preds, y, metric):
    if metric == "mae":
        return lambda w: float(np.mean(np.abs(w @ preds - y)))
    if metric == "src":
        def negative_src(w):
            value = safe_src(y, w @ preds)
            return 1.0 if np.isnan(value) else -value
        return negative_src
    raise ShapeError(f"unknown weight metric {metric!r}")


def optimize_weights(preds, y, metric="mae"):
    """
    Simplex weights for member predictions on one validation fold

    Coordinate search moves mass between pairs of members on a grid whose
    step starts at 0.1 and halves down to 1/160; each step size sweeps until
    no move improves the objective by more than 1e-12. The search starts
    from the best of the pure vectors and the uniform vector, and among
    equally good weights prefers the one closest to uniform.

    Parameters:
    - preds: N x V member predictions
    - y: V validation labels
    - metric: "mae" (minimised) or "src" (maximised)
    """
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n_members, n_rows = preds.shape
    if n_members < 1 or n_rows < 2 or y.shape != (n_rows,):
        raise ShapeError(f"need N >= 1 members and V >= 2 labels, got preds {preds.shape}, labels {y.shape}")
    if not (np.isfinite(preds).all() and np.isfinite(y).all()):
        raise DegenerateInputError("member predictions must be finite")
    objective = _objective(preds, y, metric)
    uniform = np.full(n_members, 1.0 / n_members)

    def distance(w):
        return float(np.sum((w - uniform) ** 2))

    candidates = [uniform] + [np.eye(n_members)[i] for i in range(n_members)]
    scored = [(objective(w), distance(w), w) for w in candidates]
    floor = min(item[0] for item in scored)
    # rounding noise between equal blends must not beat uniform
    best_obj, best_dist, best = min(
        (item for item in scored if item[0] <= floor + IMPROVEMENT), key=lambda item: item[1]
    )
    step = WEIGHT_STEP
    while step >= WEIGHT_MIN_STEP - 1e-15:
        improved = True
        while improved:
            improved = False
            for i in range(n_members):
                for j in range(n_members):
                    if i == j or best[j] <= 0:
                        continue
                    w = best.copy()
                    moved = min(step, w[j])
                    w[j] -= moved
                    w[i] += moved
                    obj = objective(w)
                    dist = distance(w)
                    if obj < best_obj - IMPROVEMENT or (obj <= best_obj and dist < best_dist):
                        improved = obj < best_obj - IMPROVEMENT or improved
                        best, best_obj, best_dist = w, obj, dist
        step /= 2
    best = np.clip(best, 0.0, None)
    return best / best.sum()


# Fold training

@dataclass
class FoldState:
    fold: int
    imputation: ImputationStats
    pipeline: FeaturePipeline
    scaler: ScalerModel
    label_mean: float
    label_std: float
    members: dict
    weights: np.ndarray
    metrics: dict = field(default_factory=dict)

    def transform(self, posts, tables):
        imputed, _ = apply_imputation(posts, self.imputation)
        matrix = build_features(imputed, tables, self.pipeline.config, self.pipeline)
        return apply_scaler(self.scaler, matrix.data), matrix

    def member_predictions(self, X):
        """N x rows predictions in label units, members in fit order."""
        return np.vstack([
            self.members[kind].predict(X) * self.label_std + self.label_mean for kind in self.members
        ]) if X.shape[0] else np.zeros((len(self.members), 0))

    def predict(self, X):
        return self.weights @ self.member_predictions(X)

    def to_sections(self):
        sections = {
            "meta": {
                "fold": self.fold, "label_mean": self.label_mean, "label_std": self.label_std,
                "members": list(self.members), "metrics": self.metrics,
                "imputation": {"numeric": self.imputation.numeric, "categorical": self.imputation.categorical},
            },
            "weights": self.weights,
        }
        sections.update(prefixed("pipeline", self.pipeline.to_sections()))
        sections.update(prefixed("scaler", self.scaler.to_sections()))
        for kind, model in self.members.items():
            sections.update(prefixed(f"member/{kind}", model.to_sections()))
        return sections

    @classmethod
    def from_sections(cls, sections):
        meta = sections["meta"]
        return cls(
            fold=meta["fold"],
            imputation=ImputationStats(**meta["imputation"]),
            pipeline=FeaturePipeline.from_sections(unprefixed("pipeline", sections)),
            scaler=ScalerModel.from_sections(unprefixed("scaler", sections)),
            label_mean=meta["label_mean"],
            label_std=meta["label_std"],
            members={kind: model_from_sections(kind, unprefixed(f"member/{kind}", sections)) for kind in meta["members"]},
            weights=sections["weights"],
            metrics=meta["metrics"],
        )


def _fit_member(kind, X, y, w, block_spans, config, seed):
    p = HuberParams(config.huber_delta)
    if kind == "gbdt":
        return gbdt_fit(X, y, config.gbdt, p, seed, w)
    if kind == "mlp":
        params = replace(config.mlp, batch_size=min(config.mlp.batch_size, X.shape[0]))
        return mlp_fit(X, y, block_spans, params, p, seed, w)
    if kind == "ridge":
        return ridge_fit(X, y, config.ridge.l2, w)
    raise ValueError(f"unknown member kind {kind!r}")


def fit_fold(fold, train_posts, val_posts, tables, config, seed, pseudo_posts=(), pseudo_weight=1.0):
    """
    Fit one fold: filter, preprocess, train members, search weights

    Pseudo-labeled posts join the training side only; validation rows are
    always real labels.
    """
    posts = list(train_posts) + list(pseudo_posts)
    weights = np.concatenate([np.ones(len(train_posts)), np.full(len(pseudo_posts), pseudo_weight)])
    labels = np.array([p.label for p in posts], dtype=np.float64)
    keep = iqr_filter(labels, config.iqr_multiplier)
    if not keep.any():
        raise DataError(f"fold {fold}: no training labels left after IQR filtering")
    dropped = int((~keep).sum())
    posts = [p for p, k in zip(posts, keep) if k]
    weights, labels = weights[keep], labels[keep]

    stats = fit_imputation(posts, config.imputation, np.ones(len(posts), dtype=bool))
    train_imputed, _ = apply_imputation(posts, stats)
    val_imputed, _ = apply_imputation(val_posts, stats)
    pipeline = fit_feature_pipeline(train_imputed, tables, config.features, derive_seed(seed, "features", fold))
    train_matrix = build_features(train_imputed, tables, config.features, pipeline)
    val_matrix = build_features(val_imputed, tables, config.features, pipeline)
    scaler = fit_scaler(train_matrix.data)
    X_train = apply_scaler(scaler, train_matrix.data)
    X_val = apply_scaler(scaler, val_matrix.data)

    label_mean, label_std = 0.0, 1.0
    if config.standardize_labels:
        label_mean = float(labels.mean())
        label_std = float(labels.std())
        if label_std < LABEL_STD_FLOOR:
            label_std = 1.0
    y_train = (labels - label_mean) / label_std

    members = {}
    for kind in config.members:
        try:
            members[kind] = _fit_member(
                kind, X_train, y_train, weights, train_matrix.block_spans, config, derive_seed(seed, "member", fold, kind)
            )
        except (PipelineError, ArithmeticError, ValueError, linalg.LinAlgError) as e:
            raise FitError(fold, kind, e) from e

    state = FoldState(
        fold=fold, imputation=stats, pipeline=pipeline, scaler=scaler, label_mean=label_mean,
        label_std=label_std, members=members, weights=np.ones(len(members)) / len(members),
    )
    y_val = np.array([p.label for p in val_posts], dtype=np.float64)
    member_preds = state.member_predictions(X_val)
    state.weights = optimize_weights(member_preds, y_val, config.metric)
    ensemble_preds = state.predict(X_val)
    state.metrics = {
        "train_rows": len(posts),
        "pseudo_rows": int(keep[len(train_posts):].sum()),
        "iqr_dropped": dropped,
        "validation_rows": len(val_posts),
        "mae": mae(y_val, ensemble_preds),
        "src": safe_src(y_val, ensemble_preds),
        "member_mae": {kind: mae(y_val, member_preds[i]) for i, kind in enumerate(members)},
        "member_src": {kind: safe_src(y_val, member_preds[i]) for i, kind in enumerate(members)},
        "weights": {kind: float(state.weights[i]) for i, kind in enumerate(members)},
    }
    if "mlp" in members:
        state.metrics["attention"] = members["mlp"].attention_means
    logger.info(
        "fold %d: %d train rows (%d pseudo, %d IQR-dropped), validation MAE %.4f SRC %.4f, weights %s",
        fold, len(posts), state.metrics["pseudo_rows"], dropped, state.metrics["mae"], state.metrics["src"],
        np.round(state.weights, 4).tolist(),
    )
    return state


@dataclass
class EnsembleModel:
    config: EnsembleConfig
    folds: list
    seed: int
    col_names: tuple
    block_spans: dict

    @property
    def k(self):
        return len(self.folds)

    @property
    def member_kinds(self):
        return tuple(self.config.members)

    @property
    def metric_used(self):
        return self.config.metric

    @property
    def weights(self):
        """K x N weight matrix."""
        return np.vstack([f.weights for f in self.folds])

    def validation_mae(self):
        """Mean out-of-fold ensemble MAE over folds."""
        return float(np.mean([f.metrics["mae"] for f in self.folds]))

    def validation_src(self):
        return float(np.nanmean([f.metrics["src"] for f in self.folds]))

    def transform(self, posts, tables):
        """One scaled feature matrix per fold, ascending fold order."""
        matrices = []
        for state in self.folds:
            try:
                X, _ = state.transform(posts, tables)
            except PipelineError as e:
                raise FoldError(f"fold {state.fold}: cannot apply preprocessing: {e}") from e
            matrices.append(X)
        return matrices

    def predict_matrices(self, matrices):
        total = None
        for state, X in zip(self.folds, matrices):
            pred = state.predict(X)
            total = pred if total is None else total + pred
        return total / self.k

    def member_predictions(self, posts, tables):
        """(K*N) x rows matrix of every fold member's prediction."""
        return np.vstack([state.member_predictions(X) for state, X in zip(self.folds, self.transform(posts, tables))])

    def to_sections(self):
        sections = {
            "ensemble": {
                "k": self.k, "seed": self.seed, "config": self.config.to_dict(),
                "col_names": list(self.col_names), "block_spans": {k: list(v) for k, v in self.block_spans.items()},
            },
        }
        for state in self.folds:
            sections.update(prefixed(f"fold{state.fold}", state.to_sections()))
        return sections

    @classmethod
    def from_sections(cls, sections):
        meta = sections["ensemble"]
        folds = [FoldState.from_sections(unprefixed(f"fold{k}", sections)) for k in range(meta["k"])]
        return cls(
            config=EnsembleConfig.from_dict(meta["config"]), folds=folds, seed=meta["seed"],
            col_names=tuple(meta["col_names"]), block_spans={k: tuple(v) for k, v in meta["block_spans"].items()},
        )


def plan_folds(labeled, config, seed):
    labels = [p.label for p in labeled]
    fold_seed = derive_seed(seed, "folds")
    if config.single_split:
        return single_split(len(labeled), fold_seed, config.split_fraction)
    return make_folds(len(labeled), config.k, fold_seed, labels, config.stratified)


def train_ensemble(posts, tables, config, seed, pseudo_posts=(), pseudo_weight=1.0, workers=1):
    """
    Cross-validated training of every configured member

    Parameters:
    - posts: labeled training posts (unlabeled ones are ignored)
    - tables: embedding tables keyed by source tag
    - config: EnsembleConfig
    - seed: run seed; fold plan and member seeds derive from it
    - pseudo_posts: pseudo-labeled posts added to every fold's training side
    - pseudo_weight: loss weight of the pseudo-labeled rows
    - workers: parallel fold fits; results do not depend on it

    Returns:
    - EnsembleModel
    """
    labeled = [p for p in posts if p.has_label]
    if not labeled:
        raise DataError("no labeled posts to train on")
    plan = plan_folds(labeled, config, seed)
    logger.info("training %d folds x %s on %d labeled posts", plan.k, list(config.members), len(labeled))
    jobs = []
    for fold in range(plan.k):
        train = [labeled[i] for i in plan.training_rows(fold)]
        val = [labeled[i] for i in plan.validation_rows(fold)]
        jobs.append(delayed(fit_fold)(fold, train, val, tables, config, seed, tuple(pseudo_posts), pseudo_weight))
    folds = Parallel(n_jobs=workers)(jobs)
    sample = folds[0]
    _, matrix = sample.transform(labeled[:1], tables)
    return EnsembleModel(
        config=config, folds=folds, seed=seed, col_names=matrix.col_names, block_spans=dict(matrix.block_spans),
    )


def ensemble_predict(model, posts, tables):
    """Fold-averaged weighted member predictions for `posts`."""
    if not posts:
        return np.zeros(0)
    return model.predict_matrices(model.transform(posts, tables))


