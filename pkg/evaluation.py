"""Ranking and accuracy metrics, permutation importance and the evaluation report."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import rankdata

from modality_mapper import get_modality_summary
from pipeline_errors import DegenerateInputError, ShapeError
from post_data import derive_seed, make_rng
from visualization import distribution_export

logger = logging.getLogger(__name__)

TOP_FEATURES = 20


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ShapeError(f"{y.size} labels but {yhat.size} predictions")
    if not (np.isfinite(y).all() and np.isfinite(yhat).all()):
        raise DegenerateInputError("metrics need finite labels and predictions")
    return y, yhat


def spearman_src(y, yhat):
    """
    Spearman rank correlation with average ranks for ties

    Pearson correlation of the two fractional-rank vectors. Without ties this
    equals 1 - 6*sum(d^2)/(n(n^2-1)).
    """
    y, yhat = _pair(y, yhat)
    if y.size < 2:
        raise DegenerateInputError(f"rank correlation needs at least 2 values, got {y.size}")
    ry = rankdata(y, method="average")
    rp = rankdata(yhat, method="average")
    ry -= ry.mean()
    rp -= rp.mean()
    denom = np.sqrt(np.dot(ry, ry) * np.dot(rp, rp))
    if denom == 0:
        raise DegenerateInputError("rank correlation is undefined for a constant vector")
    return float(np.clip(np.dot(ry, rp) / denom, -1.0, 1.0))


def mae(y, yhat):
    y, yhat = _pair(y, yhat)
    if y.size == 0:
        raise DegenerateInputError("MAE of zero values")
    return float(np.mean(np.abs(y - yhat)))


def safe_src(y, yhat):
    """spearman_src, or NaN where it is undefined."""
    try:
        return spearman_src(y, yhat)
    except DegenerateInputError:
        return float("nan")


@dataclass
class EvalReport:
    src: float
    mae: float
    n: int
    importances: pd.DataFrame | None = None
    histogram: pd.DataFrame | None = None
    density: pd.DataFrame | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return {"src": self.src, "mae": self.mae, "n": self.n, **self.extra}


def evaluate_predictions(y, yhat, bins=20, value_range=None):
    """Metrics plus histogram and density rows for one prediction vector."""
    histogram, density = distribution_export(y, yhat, bins, value_range)
    y, yhat = _pair(y, yhat)
    return EvalReport(src=safe_src(y, yhat), mae=mae(y, yhat), n=int(y.size), histogram=histogram, density=density)


def _column_scores(model, matrices, y, column, repeats, seed, baseline):
    n = y.size
    diffs = np.empty(repeats)
    for r in range(repeats):
        order = make_rng(derive_seed(seed, "permute", column, r)).permutation(n)
        permuted = []
        for X in matrices:
            Xp = X.copy()
            Xp[:, column] = X[order, column]
            permuted.append(Xp)
        diffs[r] = mae(y, model.predict_matrices(permuted)) - baseline
    return float(diffs.mean()), float(diffs.std())


def permutation_importance(model, posts, tables, repeats=5, seed=0, workers=1):
    """
    Mean MAE increase when one column is shuffled

    Each fold's transformed matrix gets the same row permutation for the
    column, so the comparison is against the unshuffled fold-averaged
    prediction.

    Parameters:
    - model: trained EnsembleModel
    - posts: labeled posts to score on
    - tables: embedding tables keyed by source tag
    - repeats: shuffles per column
    - seed: base seed; every (column, repeat) pair gets its own stream

    Returns:
    - DataFrame feature, importance, std in column order
    """
    if repeats < 1:
        raise ShapeError(f"repeats must be >= 1, got {repeats}")
    y = np.array([p.label for p in posts], dtype=np.float64)
    matrices = model.transform(posts, tables)
    baseline = mae(y, model.predict_matrices(matrices))
    columns = model.col_names
    scores = Parallel(n_jobs=workers)(
        delayed(_column_scores)(model, matrices, y, j, repeats, seed, baseline) for j in range(len(columns))
    )
    logger.info("permutation importance over %d columns x %d repeats (baseline MAE %.4f)", len(columns), repeats, baseline)
    return pd.DataFrame({
        "feature": list(columns),
        "importance": [s[0] for s in scores],
        "std": [s[1] for s in scores],
    })


def rank_importances(importances, top=TOP_FEATURES):
    """Ranked `rank,feature,importance` table; ties keep column order."""
    ranked = importances.sort_values("importance", ascending=False, kind="mergesort").head(top)
    return pd.DataFrame({
        "rank": np.arange(1, len(ranked) + 1),
        "feature": ranked["feature"].to_numpy(),
        "importance": ranked["importance"].to_numpy(),
    })


def modality_importance(importances):
    return get_modality_summary(importances)
