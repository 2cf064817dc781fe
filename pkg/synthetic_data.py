"""Seeded generator of popularity datasets with planted multimodal signal.

Each post's popularity comes from a weighted sum of five standardised
effects: user quality (visible through follower counts), a visual-private
latent (first visual columns), a text-private latent (first text columns),
posting hour, and visual/text coherence (the share of common content in the
text embedding). Labels are log-normal shaped with the mode near 7.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from data_loader import EmbeddingTable, write_embeddings, write_posts
from evaluation import spearman_src
from pipeline_errors import ConfigError
from post_data import Post, derive_seed, make_rng

logger = logging.getLogger(__name__)

SECONDS_PER_HOUR = 3600
# 2015-01-01T00:00:00Z
START_TIMESTAMP = 1420070400
SPAN_SECONDS = 365 * 86400
PEAK_HOUR = 20


@dataclass(frozen=True)
class SynthConfig:
    n_posts: int = 10000
    n_users: int = 1000
    n_locations: int = 50
    visual_dim: int = 64
    text_dim: int = 64
    glove_dim: int = 16
    tag_vocab: int = 200
    content_dim: int = 8
    private_dim: int = 4
    embedding_noise: float = 0.3
    user_effect: float = 1.0
    visual_effect: float = 0.6
    text_effect: float = 0.4
    temporal_effect: float = 0.2
    coherence_effect: float = 0.3
    noise_std: float = 0.35
    label_shift: float = math.log(7.0) + 0.25
    label_scale: float = 0.5
    labeled_fraction: float = 0.8
    missing_rate: float = 0.02
    outlier_fraction: float = 0.01
    outlier_scale: float = 8.0
    seed: int = 20250601

    def __post_init__(self):
        for name in ("n_posts", "n_users", "n_locations", "visual_dim", "text_dim", "glove_dim", "tag_vocab",
                     "content_dim", "private_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name}", f"must be >= 1, got {getattr(self, name)}")
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float) and not math.isfinite(value):
                raise ConfigError(f"synth.{f.name}", f"must be finite, got {value}")
        if self.text_dim != self.visual_dim:
            raise ConfigError("synth.text_dim", "must equal visual_dim so visual/text cosine is defined")
        if self.private_dim > self.visual_dim:
            raise ConfigError("synth.private_dim", f"must be <= visual_dim ({self.visual_dim})")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError("synth.labeled_fraction", f"must be in (0, 1], got {self.labeled_fraction}")
        if self.noise_std < 0 or self.embedding_noise < 0:
            raise ConfigError("synth.noise_std", "noise levels must be non-negative")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError("synth.missing_rate", f"must be in [0, 1), got {self.missing_rate}")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ConfigError("synth.outlier_fraction", f"must be in [0, 1), got {self.outlier_fraction}")
        if self.outlier_scale <= 0 or self.label_scale <= 0:
            raise ConfigError("synth.outlier_scale", "label and outlier scales must be positive")


@dataclass
class SynthTruth:
    """Generator internals for tests; never includes hidden labels."""

    post_ids: list
    latent: np.ndarray
    user_quality: dict
    planted_columns: dict
    outlier_ids: list = field(default_factory=list)

    def latent_for(self, post_ids):
        index = {pid: i for i, pid in enumerate(self.post_ids)}
        return self.latent[[index[pid] for pid in post_ids]]

    def to_json(self):
        return {
            "post_ids": self.post_ids,
            "latent": self.latent.tolist(),
            "user_quality": self.user_quality,
            "planted_columns": self.planted_columns,
            "outlier_ids": self.outlier_ids,
        }

    @classmethod
    def from_json(cls, data):
        return cls(
            post_ids=list(data["post_ids"]), latent=np.asarray(data["latent"], dtype=np.float64),
            user_quality=dict(data["user_quality"]), planted_columns=dict(data["planted_columns"]),
            outlier_ids=list(data["outlier_ids"]),
        )


@dataclass
class SynthDataset:
    posts: list
    tables: dict
    truth: SynthTruth
    labels: np.ndarray

    @property
    def labeled(self):
        return [p for p in self.posts if p.has_label]

    @property
    def unlabeled(self):
        return [p for p in self.posts if not p.has_label]


def _standardize(values):
    std = values.std()
    if std < 1e-12:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def _maybe(rng, value, rate):
    return None if rng.random() < rate else value


def generate(cfg):
    """
    Build posts, embedding tables and truth for one config

    Every draw comes from generators derived from cfg.seed, so the output
    is a pure function of the config.

    Returns:
    - SynthDataset
    """
    seed = cfg.seed
    n, d = cfg.n_posts, cfg.visual_dim
    rng = make_rng(derive_seed(seed, "posts"))

    # users
    user_rng = make_rng(derive_seed(seed, "users"))
    quality = user_rng.standard_normal(cfg.n_users)
    followers = np.rint(np.exp(5.0 + 1.2 * quality + 0.3 * user_rng.standard_normal(cfg.n_users))).astype(np.int64)
    following = np.rint(np.exp(4.5 + 0.5 * user_rng.standard_normal(cfg.n_users))).astype(np.int64)
    post_counts = np.rint(np.exp(4.0 + 0.8 * user_rng.standard_normal(cfg.n_users))).astype(np.int64)
    is_pro = user_rng.random(cfg.n_users) < 1.0 / (1.0 + np.exp(-quality))
    home = user_rng.integers(cfg.n_locations, size=cfg.n_users)
    favourite_tags = user_rng.integers(cfg.tag_vocab, size=(cfg.n_users, 3))
    centers = np.column_stack([
        user_rng.uniform(-60.0, 70.0, cfg.n_locations), user_rng.uniform(-170.0, 170.0, cfg.n_locations),
    ])

    # content
    emb_rng = make_rng(derive_seed(seed, "embeddings"))
    mixing = emb_rng.standard_normal((d, cfg.content_dim)) / math.sqrt(cfg.content_dim)
    content = emb_rng.standard_normal((n, cfg.content_dim))
    visual_private = emb_rng.standard_normal((n, cfg.private_dim))
    text_private = emb_rng.standard_normal((n, cfg.private_dim))
    coherence = emb_rng.uniform(0.0, 1.0, n)
    visual = content @ mixing.T + cfg.embedding_noise * emb_rng.standard_normal((n, d))
    text = coherence[:, None] * (content @ mixing.T) + cfg.embedding_noise * emb_rng.standard_normal((n, d))
    visual[:, :cfg.private_dim] += visual_private
    text[:, :cfg.private_dim] += text_private
    direction = np.ones(cfg.private_dim) / math.sqrt(cfg.private_dim)

    users = rng.integers(cfg.n_users, size=n)
    timestamps = START_TIMESTAMP + rng.integers(SPAN_SECONDS, size=n)
    hours = (timestamps // SECONDS_PER_HOUR) % 24

    effects = [
        (cfg.user_effect, quality[users]),
        (cfg.visual_effect, visual_private @ direction),
        (cfg.text_effect, text_private @ direction),
        (cfg.temporal_effect, np.cos(2 * np.pi * (hours - PEAK_HOUR) / 24)),
        (cfg.coherence_effect, coherence),
    ]
    z = sum(weight * _standardize(values) for weight, values in effects if weight != 0)
    latent = _standardize(np.asarray(z, dtype=np.float64) * np.ones(n))
    noisy = _standardize(latent + cfg.noise_std * rng.standard_normal(n))
    labels = np.exp(cfg.label_shift + cfg.label_scale * noisy)
    n_outliers = int(math.floor(cfg.outlier_fraction * n))
    outliers = np.sort(rng.choice(n, n_outliers, replace=False)) if n_outliers else np.zeros(0, dtype=np.int64)
    labels[outliers] *= cfg.outlier_scale
    n_labeled = int(math.floor(cfg.labeled_fraction * n))
    labeled = np.zeros(n, dtype=bool)
    labeled[rng.permutation(n)[:n_labeled]] = True

    miss_rng = make_rng(derive_seed(seed, "missing"))
    post_ids = [f"p{i:06d}" for i in range(n)]
    posts = []
    for i in range(n):
        u = int(users[i])
        n_tags = int(rng.integers(1, 6))
        tags = [f"tag{t}" for t in favourite_tags[u][: int(rng.integers(0, 4))]]
        tags += [f"tag{t}" for t in rng.integers(cfg.tag_vocab, size=max(n_tags - len(tags), 0))]
        tags = list(dict.fromkeys(tags))
        lat, lon = centers[home[u]] + 0.05 * rng.standard_normal(2)
        geo_missing = miss_rng.random() < cfg.missing_rate
        posts.append(Post(
            post_id=post_ids[i],
            user_id=f"u{u:05d}",
            timestamp=int(timestamps[i]),
            latitude=None if geo_missing else float(np.clip(lat, -90.0, 90.0)),
            longitude=None if geo_missing else float(np.clip(lon, -180.0, 180.0)),
            geo_accuracy=_maybe(miss_rng, int(rng.integers(1, 17)), cfg.missing_rate),
            caption=" ".join([f"photo {i} by user {u}"] + [f"#{t}" for t in tags]),
            tags=tuple(tags),
            followers=_maybe(miss_rng, int(followers[u]), cfg.missing_rate),
            following=_maybe(miss_rng, int(following[u]), cfg.missing_rate),
            user_post_count=_maybe(miss_rng, int(post_counts[u]), cfg.missing_rate),
            is_pro=_maybe(miss_rng, bool(is_pro[u]), cfg.missing_rate),
            label=float(labels[i]) if labeled[i] else None,
        ))

    glove_rng = make_rng(derive_seed(seed, "glove"))
    tables = {
        "visual_clip": EmbeddingTable(tuple(post_ids), visual, "visual_clip"),
        "text_clip": EmbeddingTable(tuple(post_ids), text, "text_clip"),
        "tags_glove": EmbeddingTable(
            tuple(f"tag{t}" for t in range(cfg.tag_vocab)), glove_rng.standard_normal((cfg.tag_vocab, cfg.glove_dim)),
            "tags_glove",
        ),
    }
    truth = SynthTruth(
        post_ids=post_ids,
        latent=latent,
        user_quality={f"u{j:05d}": float(q) for j, q in enumerate(quality)},
        planted_columns={
            "visual": [f"visual.clip_{j}" for j in range(cfg.private_dim)],
            "textual": [f"textual.clip_{j}" for j in range(cfg.private_dim)],
            "user": ["user.followers", "user.log1p_followers"],
            "spatial": ["spatial.hour_sin", "spatial.hour_cos"],
            "cross": ["cross.s_cross"],
        },
        outlier_ids=[post_ids[i] for i in outliers],
    )
    logger.info(
        "generated %d posts (%d labeled, %d outliers) for %d users, seed %d", n, n_labeled, n_outliers, cfg.n_users, seed,
    )
    return SynthDataset(posts=posts, tables=tables, truth=truth, labels=labels)


def oracle_src_bound(truth, y, post_ids=None):
    """Rank correlation between noiseless latent scores and realised labels."""
    latent = truth.latent if post_ids is None else truth.latent_for(post_ids)
    return spearman_src(latent, y)


def labeled_oracle_bound(dataset):
    labeled = dataset.labeled
    if len(labeled) < 2:
        return None
    return oracle_src_bound(dataset.truth, [p.label for p in labeled], [p.post_id for p in labeled])


DATASET_FILES = {
    "posts": "posts.jsonl",
    "visual_clip": "visual_clip.pfe",
    "text_clip": "text_clip.pfe",
    "tags_glove": "tags_glove.pfe",
    "truth": "truth.json",
}


def write_dataset(dataset, out_dir, cfg=None):
    """Write posts, the three embedding tables and the truth sidecar; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: out_dir / filename for name, filename in DATASET_FILES.items()}
    write_posts(dataset.posts, paths["posts"])
    for tag in ("visual_clip", "text_clip", "tags_glove"):
        write_embeddings(dataset.tables[tag], paths[tag])
    truth = dataset.truth.to_json()
    if cfg is not None:
        truth["config"] = asdict(cfg)
    truth["oracle_src_bound"] = labeled_oracle_bound(dataset)
    paths["truth"].write_text(json.dumps(truth, sort_keys=True), encoding="utf-8")
    return paths


def read_truth(path):
    return SynthTruth.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
