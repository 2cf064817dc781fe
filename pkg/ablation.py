"""Ablation harness: one full run per disabled component."""

import logging
import math
from dataclasses import replace

import pandas as pd

from pipeline_errors import ConfigError
from pipeline_stages import fit_and_score

logger = logging.getLogger(__name__)

FULL_MODEL = "full"
ABLATION_COLUMNS = ["variant", "src", "mae"]


def _drop_blocks(ensemble_config, **flags):
    return replace(ensemble_config, features=replace(ensemble_config.features, **flags))


# Each toggle maps (ensemble config, pseudo config) to the disabled variant.
# The cross block compares visual and text embeddings, so it goes with either.
TOGGLES = {
    "drop-visual": lambda e, p: (_drop_blocks(e, use_visual=False, use_cross=False), p),
    "drop-textual": lambda e, p: (_drop_blocks(e, use_textual=False, use_cross=False), p),
    "drop-user": lambda e, p: (_drop_blocks(e, use_user=False), p),
    "drop-geo": lambda e, p: (_drop_blocks(e, use_geo=False), p),
    "no-pseudo": lambda e, p: (e, replace(p, max_iterations=1)),
    "no-iqr": lambda e, p: (replace(e, iqr_multiplier=math.inf), p),
    "single-split": lambda e, p: (replace(e, single_split=True), p),
}


def variant_configs(ensemble_config, pseudo_config, toggles):
    """(name, ensemble config, pseudo config) for the full model and every toggle, toggle order kept."""
    unknown = [t for t in toggles if t not in TOGGLES]
    if unknown:
        raise ConfigError("evaluate.ablations", f"unknown toggles {unknown}; choose from {sorted(TOGGLES)}")
    variants = [(FULL_MODEL, ensemble_config, pseudo_config)]
    for name in dict.fromkeys(toggles):
        variants.append((name, *TOGGLES[name](ensemble_config, pseudo_config)))
    return variants


def ablation_run(ensemble_config, pseudo_config, toggles, posts, tables, seed, holdout_fraction=0.2, workers=1):
    """
    Run the full pipeline once per variant and score each on the same held-out posts

    Returns:
    - DataFrame with variant, src, mae
    """
    rows = []
    for name, e_cfg, p_cfg in variant_configs(ensemble_config, pseudo_config, toggles):
        result = fit_and_score(posts, tables, e_cfg, p_cfg, holdout_fraction, seed, workers)
        logger.info("ablation %s: SRC %.4f MAE %.4f", name, result["src"], result["mae"])
        rows.append({"variant": name, "src": result["src"], "mae": result["mae"]})
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)
