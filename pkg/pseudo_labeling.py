"""Iterative pseudo-labeling of unlabeled posts from ensemble agreement."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ensemble import ensemble_predict, train_ensemble
from pipeline_errors import ConfigError, DegenerateInputError

logger = logging.getLogger(__name__)

CONFIDENCE_RULES = ("neg_std",)
MIN_IMPROVEMENT = 1e-6


@dataclass(frozen=True)
class PseudoLabelConfig:
    alpha: float = 0.5
    max_iterations: int = 2
    confidence_rule: str = "neg_std"
    sample_weight: float = 0.5

    def __post_init__(self):
        if not math.isfinite(self.alpha):
            raise ConfigError("pseudo.alpha", f"must be finite, got {self.alpha}")
        if self.max_iterations < 1:
            raise ConfigError("pseudo.max_iterations", f"must be >= 1, got {self.max_iterations}")
        if self.confidence_rule not in CONFIDENCE_RULES:
            raise ConfigError("pseudo.confidence_rule", f"unknown rule {self.confidence_rule!r}")
        if not 0.0 < self.sample_weight <= 1.0:
            raise ConfigError("pseudo.sample_weight", f"must be in (0, 1], got {self.sample_weight}")


@dataclass(frozen=True)
class PseudoLabel:
    row: int
    label: float
    weight: float


@dataclass
class PseudoLabelReport:
    iterations: list = field(default_factory=list)

    @property
    def total_selected(self):
        return sum(it["selected"] for it in self.iterations)

    def to_frame(self):
        return pd.DataFrame(self.iterations)

    def to_jsonl(self, path):
        """One JSON object per iteration, one per line."""
        self.to_frame().to_json(path, orient="records", lines=True)


def confidence_from_predictions(member_preds):
    """Negative population std over the member axis (rows of `member_preds`)."""
    member_preds = np.asarray(member_preds, dtype=np.float64)
    if member_preds.ndim != 2 or member_preds.shape[0] < 2:
        raise DegenerateInputError("confidence needs at least two member predictions per row")
    return -member_preds.std(axis=0)


def confidence_scores(model, posts, tables):
    """Agreement of all K*N fold members on each post; 0 is full agreement."""
    return confidence_from_predictions(model.member_predictions(posts, tables))


def selection_threshold(confidences, alpha):
    confidences = np.asarray(confidences, dtype=np.float64)
    return float(confidences.mean() + alpha * confidences.std())


def select_pseudo(confidences, predictions, cfg):
    """
    Rows whose confidence reaches tau = mean + alpha * std

    When every confidence is equal all rows are selected. An empty pool
    gives an empty selection.
    """
    confidences = np.asarray(confidences, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if confidences.size == 0:
        return []
    if not np.isfinite(confidences).all():
        raise DegenerateInputError("confidences must be finite")
    if confidences.std() == 0:
        chosen = np.arange(confidences.size)
    else:
        chosen = np.flatnonzero(confidences >= selection_threshold(confidences, cfg.alpha))
    return [PseudoLabel(int(r), float(predictions[r]), cfg.sample_weight) for r in chosen]


def _summary(model):
    return {"mae": model.validation_mae(), "src": model.validation_src()}


def pseudo_label_loop(labeled, unlabeled, tables, ensemble_config, cfg, seed, workers=1, base_model=None):
    """
    Self-training around train_ensemble

    Iteration 0 trains on labeled posts only. Every later iteration labels
    the confident part of the unlabeled pool with the current ensemble and
    retrains on labeled posts plus that fresh selection. The loop stops at
    cfg.max_iterations, on an empty selection, or when the mean out-of-fold
    validation MAE does not improve by more than 1e-6; the best model so
    far is returned. A `base_model` already trained on `labeled` stands in
    for iteration 0.

    Returns:
    - (EnsembleModel, PseudoLabelReport)
    """
    unlabeled = [p.without_label() if p.has_label else p for p in unlabeled]
    best = base_model if base_model is not None else train_ensemble(labeled, tables, ensemble_config, seed, workers=workers)
    before = _summary(best)
    report = PseudoLabelReport([{
        "iteration": 0, "selected": 0, "pool": len(unlabeled), "tau": None,
        "confidence_mean": None, "confidence_std": None,
        "mae_before": before["mae"], "src_before": before["src"],
        "mae_after": before["mae"], "src_after": before["src"], "accepted": True,
    }])
    if not unlabeled and cfg.max_iterations > 1:
        logger.warning("pseudo-labeling: unlabeled pool is empty, keeping the labeled-only model")
    for iteration in range(1, cfg.max_iterations):
        if not unlabeled:
            break
        confidences = confidence_scores(best, unlabeled, tables)
        predictions = ensemble_predict(best, unlabeled, tables)
        selection = select_pseudo(confidences, predictions, cfg)
        record = {
            "iteration": iteration, "selected": len(selection), "pool": len(unlabeled),
            "tau": selection_threshold(confidences, cfg.alpha),
            "confidence_mean": float(confidences.mean()), "confidence_std": float(confidences.std()),
            "mae_before": before["mae"], "src_before": before["src"],
        }
        logger.info(
            "pseudo-labeling iteration %d: %d of %d posts selected (tau %.4f)",
            iteration, len(selection), len(unlabeled), record["tau"],
        )
        if not selection:
            report.iterations.append({**record, "mae_after": before["mae"], "src_after": before["src"], "accepted": False})
            break
        pseudo_posts = [unlabeled[s.row].with_label(s.label) for s in selection]
        candidate = train_ensemble(
            labeled, tables, ensemble_config, seed, pseudo_posts=pseudo_posts,
            pseudo_weight=cfg.sample_weight, workers=workers,
        )
        after = _summary(candidate)
        accepted = after["mae"] < before["mae"] - MIN_IMPROVEMENT
        report.iterations.append({**record, "mae_after": after["mae"], "src_after": after["src"], "accepted": accepted})
        if not accepted:
            logger.info("pseudo-labeling stopped: validation MAE %.6f did not improve on %.6f", after["mae"], before["mae"])
            break
        best, before = candidate, after
    return best, report
