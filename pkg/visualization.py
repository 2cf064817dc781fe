import logging

import numpy as np
import pandas as pd
from scipy.stats import gaussian_kde

logger = logging.getLogger(__name__)

DENSITY_POINTS = 200
HISTOGRAM_COLUMNS = ["bin_left", "bin_right", "count_true", "count_pred"]
DENSITY_COLUMNS = ["x", "density_true", "density_pred"]


def histogram_rows(y, yhat, bins=20, value_range=None):
    """
    Create equal-width histogram rows comparing true and predicted values

    Parameters:
    - y: ground-truth labels
    - yhat: predictions
    - bins: number of bins
    - value_range: optional (low, high); defaults to the joint min/max

    Returns:
    - DataFrame with bin_left, bin_right, count_true, count_pred
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if value_range is None:
        joint = np.concatenate([y, yhat])
        value_range = (float(joint.min()), float(joint.max())) if joint.size else (0.0, 1.0)
    low, high = value_range
    if high <= low:
        # point mass: widen so one bin holds everything
        low, high = low - 0.5, low + 0.5
    edges = np.linspace(low, high, bins + 1)
    count_true, _ = np.histogram(np.clip(y, low, high), bins=edges)
    count_pred, _ = np.histogram(np.clip(yhat, low, high), bins=edges)
    return pd.DataFrame({
        "bin_left": edges[:-1],
        "bin_right": edges[1:],
        "count_true": count_true.astype(np.int64),
        "count_pred": count_pred.astype(np.int64),
    })


def _density(values, grid, name):
    if values.size < 2 or np.ptp(values) == 0:
        # gaussian_kde needs spread; fall back to an indicator at the nearest grid point
        logger.warning("%s series has no spread; density falls back to a point mass", name)
        out = np.zeros_like(grid)
        if values.size:
            out[int(np.argmin(np.abs(grid - values[0])))] = 1.0
        return out
    return gaussian_kde(values, bw_method="silverman")(grid)


def density_rows(y, yhat, points=DENSITY_POINTS, value_range=None):
    """Gaussian KDE (Silverman bandwidth) of both series on a shared grid."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if value_range is None:
        joint = np.concatenate([y, yhat])
        value_range = (float(joint.min()), float(joint.max())) if joint.size else (0.0, 1.0)
    grid = np.linspace(value_range[0], value_range[1], points)
    return pd.DataFrame({
        "x": grid,
        "density_true": _density(y, grid, "true"),
        "density_pred": _density(yhat, grid, "predicted"),
    })


def distribution_export(y, yhat, bins=20, value_range=None):
    """Histogram rows and density samples for predicted-vs-true plots."""
    return histogram_rows(y, yhat, bins, value_range), density_rows(y, yhat, value_range=value_range)


def modal_bin_center(values, bins=20, value_range=None):
    """Center of the most populated bin of one series."""
    rows = histogram_rows(values, values, bins, value_range)
    top = rows.loc[rows["count_true"].idxmax()]
    return 0.5 * (top["bin_left"] + top["bin_right"])


def write_distribution(histogram, density, histogram_path, density_path):
    histogram.to_csv(histogram_path, index=False, columns=HISTOGRAM_COLUMNS)
    density.to_csv(density_path, index=False, columns=DENSITY_COLUMNS)
