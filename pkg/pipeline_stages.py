import logging

import networkx as nx
import numpy as np

from data_loader import align, read_embeddings, read_posts
from ensemble import ensemble_predict, train_ensemble
from evaluation import mae, safe_src
from pipeline_errors import ConfigError, PipelineError
from post_data import derive_seed, make_rng
from pseudo_labeling import PseudoLabelReport, pseudo_label_loop

logger = logging.getLogger(__name__)

# Upstream stages of every pipeline stage
UPSTREAM_DEPENDENCIES = {
    "synth": [],
    "load": [],
    "align": ["load"],
    "featurize": ["align"],
    "split": ["align"],
    "train": ["split"],
    "pseudo": ["train"],
    "predict": ["align"],
    "evaluate": ["train"],
    "importance": ["train"],
    "ablate": ["split"],
    "export": ["train"],
}

STAGE_DESCRIPTIONS = {
    "synth": "Generate a planted-signal dataset",
    "load": "Read posts and embedding tables",
    "align": "Join posts with post-keyed embedding tables",
    "featurize": "Fit the feature pipeline and export the fused matrix",
    "split": "Reserve held-out labeled posts",
    "train": "Cross-validated ensemble training",
    "pseudo": "Iterative pseudo-labeling",
    "predict": "Fold-averaged predictions",
    "evaluate": "Metrics and distribution export",
    "importance": "Permutation feature importance",
    "ablate": "One full run per disabled component",
    "export": "Write the model artifact",
}


def build_stage_graph(stage_ids):
    """
    Build the dependency graph of the stages a command runs

    Parameters:
    - stage_ids: stages to include

    Returns:
    - NetworkX DiGraph with an edge upstream -> downstream
    """
    G = nx.DiGraph()
    for sid in stage_ids:
        if sid not in UPSTREAM_DEPENDENCIES:
            raise PipelineError(f"unknown stage {sid!r}")
        G.add_node(sid, name=STAGE_DESCRIPTIONS[sid], status="pending")
    for sid in stage_ids:
        for dep in UPSTREAM_DEPENDENCIES[sid]:
            if dep in stage_ids:
                G.add_edge(dep, sid)
    return G


def stage_order(G):
    """Deterministic execution order; independent stages keep pipeline order."""
    position = {sid: i for i, sid in enumerate(UPSTREAM_DEPENDENCIES)}
    return list(nx.lexicographical_topological_sort(G, key=position.__getitem__))


def find_skipped(G, disabled):
    """Stages that cannot run because they are, or depend on, a disabled stage."""
    skipped = set()
    for sid in disabled:
        if sid in G:
            skipped.add(sid)
            skipped.update(nx.descendants(G, sid))
    return skipped


class StageRunner:
    """Runs stage callables in graph order and records each outcome in the manifest."""

    def __init__(self, stage_ids, manifest, disabled=()):
        self.graph = build_stage_graph(stage_ids)
        self.manifest = manifest
        self.skipped = find_skipped(self.graph, disabled)
        self.results = {}

    def run(self, actions):
        for sid in stage_order(self.graph):
            if sid in self.skipped:
                self.manifest.record_stage(sid, "skipped")
                logger.info("stage %s: skipped", sid)
                continue
            logger.info("stage %s: %s", sid, STAGE_DESCRIPTIONS[sid])
            try:
                result, metrics = actions[sid](self.results)
            except PipelineError as e:
                e.stage = sid
                self.manifest.record_stage(sid, "failed", error=str(e))
                raise
            self.results[sid] = result
            self.manifest.record_stage(sid, "ok", **(metrics or {}))
        return self.results


# Data plumbing shared by the commands

def load_dataset(config):
    """Posts in file order plus the three embedding tables, aligned by post id."""
    for name in ("posts", "visual_clip", "text_clip", "tags_glove"):
        if not config.resolve(name).exists():
            raise ConfigError(f"paths.{name}", f"{config.resolve(name)} does not exist")
    posts = read_posts(config.resolve("posts"))
    visual = read_embeddings(config.resolve("visual_clip"))
    text = read_embeddings(config.resolve("text_clip"))
    glove = read_embeddings(config.resolve("tags_glove"))
    posts, (visual, text) = align(posts, [visual, text], config.paths.align_policy)
    return posts, {"visual_clip": visual, "text_clip": text, "tags_glove": glove}


def split_holdout(labeled, fraction, seed):
    """
    Seeded split of labeled posts into (train, held out)

    The split depends only on the number of posts and the seed, never on
    label values.
    """
    n_hold = int(round(fraction * len(labeled)))
    if n_hold == 0:
        return list(labeled), []
    if n_hold >= len(labeled) - 1:
        raise ConfigError("ensemble.holdout_fraction", f"leaves fewer than 2 of {len(labeled)} posts to train on")
    order = make_rng(derive_seed(seed, "holdout")).permutation(len(labeled))
    held = set(order[:n_hold].tolist())
    train = [p for i, p in enumerate(labeled) if i not in held]
    holdout = [p for i, p in enumerate(labeled) if i in held]
    return train, holdout


def train_model(train, unlabeled, tables, ensemble_config, pseudo_config, seed, workers=1):
    """Plain ensemble training, or the pseudo-label loop when it has iterations to run."""
    if pseudo_config.max_iterations > 1:
        return pseudo_label_loop(train, unlabeled, tables, ensemble_config, pseudo_config, seed, workers)
    model = train_ensemble(train, tables, ensemble_config, seed, workers=workers)
    return model, PseudoLabelReport()


def score(model, posts, tables):
    """(SRC, MAE, predictions) of a trained model on labeled posts."""
    y = np.array([p.label for p in posts], dtype=np.float64)
    yhat = ensemble_predict(model, posts, tables)
    return safe_src(y, yhat), mae(y, yhat), yhat


def fit_and_score(posts, tables, ensemble_config, pseudo_config, holdout_fraction, seed, workers=1):
    """
    Full training run on a dataset: split, train, score the held-out posts

    Held-out posts are excluded from the pseudo-label pool as well.

    Returns:
    - dict with model, report, train/holdout/unlabeled posts and held-out metrics
    """
    labeled = [p for p in posts if p.has_label]
    unlabeled = [p for p in posts if not p.has_label]
    train, holdout = split_holdout(labeled, holdout_fraction, seed)
    model, report = train_model(train, unlabeled, tables, ensemble_config, pseudo_config, seed, workers)
    if holdout:
        src, error, _ = score(model, holdout, tables)
    else:
        src, error = model.validation_src(), model.validation_mae()
    return {
        "model": model, "report": report, "train": train, "holdout": holdout, "unlabeled": unlabeled,
        "src": src, "mae": error,
    }
