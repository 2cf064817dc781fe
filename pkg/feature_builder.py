"""Construction of the five feature blocks: visual, textual, spatial, user, cross.

Fitted state (SVD embeddings, PCA, account-age anchors, cluster centroids)
lives in a FeaturePipeline so each cross-validation fold can fit its own on
training rows and apply it to everything else.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.cluster.vq import kmeans2, vq
from sklearn.utils.extmath import randomized_svd, svd_flip

from artifact_io import prefixed, unprefixed
from pipeline_errors import DataError, DegenerateInputError, RankError, ShapeError
from post_data import BLOCK_ORDER, FeatureMatrix, concat_blocks, derive_seed

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-12
SECONDS_PER_DAY = 86400

TEXT_STAT_NAMES = (
    "char_count", "word_count", "tag_count", "mean_word_length",
    "digit_ratio", "uppercase_ratio", "hashtag_count",
)
TEMPORAL_NAMES = ("hour_sin", "hour_cos", "dow_sin", "dow_cos", "month_sin", "month_cos", "day_index")
GEO_NAMES = ("latitude", "longitude", "geo_accuracy", "geo_missing", "account_age_days")
USER_STAT_NAMES = ("followers", "following", "user_post_count", "is_pro", "log1p_followers")


@dataclass(frozen=True)
class FeatureConfig:
    use_visual: bool = True
    use_textual: bool = True
    use_spatial: bool = True
    use_user: bool = True
    use_cross: bool = True
    # geo columns and location embedding inside the spatial block
    use_geo: bool = True
    # 0 disables PCA for that block
    visual_pca: int = 0
    text_pca: int = 0
    use_tag_glove: bool = True
    user_rank: int = 16
    location_rank: int = 8
    svd_iterations: int = 7
    grid_size: float = 0.1
    cluster_features: bool = False
    n_clusters: int = 8

    def enabled_blocks(self):
        flags = {
            "visual": self.use_visual, "textual": self.use_textual, "spatial": self.use_spatial,
            "user": self.use_user, "cross": self.use_cross,
        }
        return [name for name in BLOCK_ORDER if flags[name]]


# Text and time

def text_stats(caption, tags):
    """Statistical features of a caption and its tags, in TEXT_STAT_NAMES order."""
    words = caption.split()
    n_chars = len(caption)
    digits = sum(ch.isdigit() for ch in caption)
    upper = sum(ch.isupper() for ch in caption)
    return np.array([
        n_chars,
        len(words),
        len(tags),
        float(np.mean([len(w) for w in words])) if words else 0.0,
        digits / n_chars if n_chars else 0.0,
        upper / n_chars if n_chars else 0.0,
        sum(w.startswith("#") and len(w) > 1 for w in words),
    ], dtype=np.float64)


def temporal_frame(timestamps):
    """Cyclic hour/weekday/month encodings plus the raw UTC day index."""
    ts = np.asarray(timestamps, dtype=np.int64)
    if (ts < 0).any():
        raise DataError("timestamps must be non-negative")
    seconds_of_day = ts % SECONDS_PER_DAY
    day_index = ts // SECONDS_PER_DAY
    # 1970-01-01 was a Thursday; Monday = 0
    weekday = (day_index + 3) % 7
    month = pd.to_datetime(ts, unit="s", utc=True).month.to_numpy() - 1
    hour_angle = 2 * np.pi * seconds_of_day / SECONDS_PER_DAY
    dow_angle = 2 * np.pi * weekday / 7
    month_angle = 2 * np.pi * month / 12
    return pd.DataFrame({
        "hour_sin": np.sin(hour_angle), "hour_cos": np.cos(hour_angle),
        "dow_sin": np.sin(dow_angle), "dow_cos": np.cos(dow_angle),
        "month_sin": np.sin(month_angle), "month_cos": np.cos(month_angle),
        "day_index": day_index.astype(np.float64),
    }, columns=list(TEMPORAL_NAMES))


def temporal_features(timestamp):
    return temporal_frame([timestamp]).to_numpy()[0]


# Truncated SVD embeddings

@dataclass(frozen=True)
class SvdModel:
    left_factors: np.ndarray
    singular_values: np.ndarray
    right_factors: np.ndarray
    row_index: dict
    column_index: dict = field(default_factory=dict)
    fitted_on: str = "matrix"

    @property
    def k(self):
        return len(self.singular_values)

    def embeddings(self):
        """Entity embeddings U_k * sqrt(S_k)."""
        return self.left_factors * np.sqrt(self.singular_values)

    def to_sections(self):
        return {
            "left": self.left_factors,
            "singular": self.singular_values,
            "right": self.right_factors,
            "rows": sorted(self.row_index, key=self.row_index.get),
            "columns": sorted(self.column_index, key=self.column_index.get),
            "fitted_on": self.fitted_on,
        }

    @classmethod
    def from_sections(cls, sections):
        return cls(
            left_factors=sections["left"],
            singular_values=sections["singular"],
            right_factors=sections["right"],
            row_index={id_: i for i, id_ in enumerate(sections["rows"])},
            column_index={c: i for i, c in enumerate(sections["columns"])},
            fitted_on=sections["fitted_on"],
        )


def fit_svd(matrix, k, iterations=7, seed=0, row_ids=None, column_ids=None, fitted_on="matrix"):
    """
    Rank-k factorisation M ~ U S V^T

    Small matrices use a dense LAPACK SVD; larger ones a randomized range
    finder with `iterations` power iterations. Signs follow the largest
    absolute entry of each left factor.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.size == 0 or not np.any(matrix):
        raise DegenerateInputError(f"interaction matrix for {fitted_on} is empty")
    m, n = matrix.shape
    if not 1 <= k <= min(m, n):
        raise RankError(f"rank {k} outside [1, {min(m, n)}] for a {m}x{n} matrix ({fitted_on})")
    if min(m, n) <= k + 10 or m * n <= 1_000_000:
        u, s, vt = linalg.svd(matrix, full_matrices=False, lapack_driver="gesvd")
        u, vt = svd_flip(u, vt)
        u, s, vt = u[:, :k], s[:k], vt[:k]
    else:
        u, s, vt = randomized_svd(matrix, k, n_iter=iterations, random_state=int(seed) % (2**32))
        u, vt = svd_flip(u, vt)
    row_ids = list(row_ids) if row_ids is not None else [str(i) for i in range(m)]
    column_ids = list(column_ids) if column_ids is not None else [str(j) for j in range(n)]
    return SvdModel(
        left_factors=np.ascontiguousarray(u),
        singular_values=np.ascontiguousarray(s),
        right_factors=np.ascontiguousarray(vt.T),
        row_index={id_: i for i, id_ in enumerate(row_ids)},
        column_index={c: j for j, c in enumerate(column_ids)},
        fitted_on=fitted_on,
    )


def location_cell(post, grid_size=0.1):
    """Grid cell id of a post, or None when its geo was imputed."""
    if post.geo_missing or post.latitude is None or post.longitude is None:
        return None
    return f"{math.floor(post.latitude / grid_size)}:{math.floor(post.longitude / grid_size)}"


def entity_of(post, entity, grid_size=0.1):
    if entity == "user":
        return post.user_id
    if entity == "location":
        return location_cell(post, grid_size)
    raise DataError(f"unknown entity kind {entity!r}")


def build_interaction_matrix(posts, entity, grid_size=0.1):
    """
    Entity x tag-vocabulary co-occurrence counts, damped with log(1 + count)

    Returns:
    - (entity ids, tag vocabulary, matrix), both id lists sorted
    """
    counts = Counter()
    for post in posts:
        key = entity_of(post, entity, grid_size)
        if key is None:
            continue
        for tag in post.tags:
            counts[(key, tag)] += 1
    entities = sorted({e for e, _ in counts})
    vocabulary = sorted({t for _, t in counts})
    matrix = np.zeros((len(entities), len(vocabulary)))
    e_index = {e: i for i, e in enumerate(entities)}
    t_index = {t: j for j, t in enumerate(vocabulary)}
    for (e, t), c in counts.items():
        matrix[e_index[e], t_index[t]] = c
    return entities, vocabulary, np.log1p(matrix)


def fit_svd_embeddings(posts, entity, k, iterations=7, seed=0, grid_size=0.1):
    """Fit user or location embeddings from training posts."""
    entities, vocabulary, matrix = build_interaction_matrix(posts, entity, grid_size)
    model = fit_svd(matrix, k, iterations, seed, entities, vocabulary, fitted_on=entity)
    logger.info("fitted %s embeddings: %d entities x %d tags, rank %d", entity, len(entities), len(vocabulary), k)
    return model


def embed_entities(model, ids, prefix="entity", row_ids=None):
    """Embedding rows for ids; unseen (or None) ids get zeros and the unseen flag."""
    embeddings = model.embeddings()
    out = np.zeros((len(ids), model.k + 1))
    for i, id_ in enumerate(ids):
        row = model.row_index.get(id_) if id_ is not None else None
        if row is None:
            out[i, -1] = 1.0
        else:
            out[i, :-1] = embeddings[row]
    names = [f"{prefix}_svd_{j}" for j in range(model.k)] + [f"{prefix}_unseen"]
    row_ids = row_ids if row_ids is not None else [str(i) for i in range(len(ids))]
    return FeatureMatrix.from_array(row_ids, names, out)


# PCA

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    def to_sections(self):
        return {"mean": self.mean, "components": self.components, "explained_variance": self.explained_variance}

    @classmethod
    def from_sections(cls, sections):
        return cls(sections["mean"], sections["components"], sections["explained_variance"])


def fit_pca(X, k):
    X = np.asarray(X, dtype=np.float64)
    rows, dims = X.shape
    if not 1 <= k <= min(rows - 1, dims):
        raise RankError(f"{k} components outside [1, {min(rows - 1, dims)}] for {rows}x{dims} data")
    mean = X.mean(axis=0)
    u, s, vt = linalg.svd(X - mean, full_matrices=False, lapack_driver="gesvd")
    u, vt = svd_flip(u, vt)
    return PcaModel(
        mean=mean,
        components=np.ascontiguousarray(vt[:k]),
        explained_variance=s[:k] ** 2 / (rows - 1),
    )


def apply_pca(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != model.mean.shape[0]:
        raise ShapeError(f"PCA expects {model.mean.shape[0]} columns, got {X.shape[1]}")
    return (X - model.mean) @ model.components.T


# Cross-modal coherence

def cross_modal_similarity(v, t):
    """Cosine of a visual and a text row; 0 when either side is the zero vector."""
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if v.shape != t.shape:
        raise ShapeError(f"visual dimension {v.shape} != text dimension {t.shape}")
    norm = np.linalg.norm(v) * np.linalg.norm(t)
    if norm == 0.0:
        return 0.0
    return float(np.clip(np.dot(v, t) / norm, -1.0, 1.0))


def cross_modal_similarity_rows(V, T):
    V = np.asarray(V, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if V.shape != T.shape:
        raise ShapeError(f"visual table shape {V.shape} != text table shape {T.shape}")
    return np.array([cross_modal_similarity(v, t) for v, t in zip(V, T)])


# Scaling and outliers

@dataclass(frozen=True)
class ScalerModel:
    means: np.ndarray
    stds: np.ndarray

    def to_sections(self):
        return {"means": self.means, "stds": self.stds}

    @classmethod
    def from_sections(cls, sections):
        return cls(sections["means"], sections["stds"])


def fit_scaler(X):
    X = np.asarray(X, dtype=np.float64)
    return ScalerModel(means=X.mean(axis=0), stds=np.maximum(X.std(axis=0), STD_FLOOR))


def apply_scaler(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != model.means.shape[0]:
        raise ShapeError(f"scaler expects {model.means.shape[0]} columns, got {X.shape[1]}")
    out = (X - model.means) / model.stds
    # constant training columns map to zero
    out[:, model.stds <= STD_FLOOR] = 0.0
    return out


def iqr_filter(labels, multiplier=1.5):
    """Keep-mask for labels inside [Q1 - m*IQR, Q3 + m*IQR], linear-interpolated quartiles."""
    y = np.asarray(labels, dtype=np.float64)
    if y.size < 4:
        raise DegenerateInputError(f"IQR filtering needs at least 4 labels, got {y.size}")
    if math.isinf(multiplier):
        return np.ones(y.size, dtype=bool)
    q1, q3 = np.quantile(y, [0.25, 0.75], method="linear")
    spread = multiplier * (q3 - q1)
    return (y >= q1 - spread) & (y <= q3 + spread)


# Pipeline

@dataclass
class FeaturePipeline:
    """Everything build_features learns from training posts."""

    config: FeatureConfig
    user_svd: SvdModel | None = None
    location_svd: SvdModel | None = None
    visual_pca: PcaModel | None = None
    text_pca: PcaModel | None = None
    first_seen: dict = field(default_factory=dict)
    visual_centroids: np.ndarray | None = None
    text_centroids: np.ndarray | None = None
    cluster_majority: np.ndarray | None = None

    def to_sections(self):
        sections = {"config": asdict(self.config), "first_seen": self.first_seen}
        for name in ("user_svd", "location_svd", "visual_pca", "text_pca"):
            model = getattr(self, name)
            if model is not None:
                sections.update(prefixed(name, model.to_sections()))
        for name in ("visual_centroids", "text_centroids", "cluster_majority"):
            value = getattr(self, name)
            if value is not None:
                sections[name] = value
        return sections

    @classmethod
    def from_sections(cls, sections):
        pipeline = cls(config=FeatureConfig(**sections["config"]), first_seen=dict(sections["first_seen"]))
        for name, model_cls in (("user_svd", SvdModel), ("location_svd", SvdModel),
                                ("visual_pca", PcaModel), ("text_pca", PcaModel)):
            part = unprefixed(name, sections)
            if part:
                setattr(pipeline, name, model_cls.from_sections(part))
        for name in ("visual_centroids", "text_centroids", "cluster_majority"):
            if name in sections:
                setattr(pipeline, name, sections[name])
        return pipeline


def _table(tables, tag):
    if tag not in tables:
        raise DataError(f"embedding table {tag!r} is required by the feature configuration")
    return tables[tag]


def _post_rows(tables, tag, posts):
    table = _table(tables, tag)
    index = table.row_index()
    missing = [p.post_id for p in posts if p.post_id not in index]
    if missing:
        raise DataError(f"{len(missing)} posts missing from table {tag!r}, e.g. {missing[0]}")
    return table.data[[index[p.post_id] for p in posts]] if posts else np.zeros((0, table.dim))


def fit_feature_pipeline(posts, tables, config, seed=0):
    """
    Fit every learned feature component on training posts

    Parameters:
    - posts: imputed training posts
    - tables: mapping source tag -> EmbeddingTable
    - config: FeatureConfig
    - seed: base seed for randomized SVD and k-means
    """
    pipeline = FeaturePipeline(config=config)
    blocks = config.enabled_blocks()
    if "visual" in blocks and config.visual_pca:
        pipeline.visual_pca = fit_pca(_post_rows(tables, "visual_clip", posts), config.visual_pca)
    if "textual" in blocks and config.text_pca:
        pipeline.text_pca = fit_pca(_post_rows(tables, "text_clip", posts), config.text_pca)
    if "user" in blocks and config.user_rank:
        pipeline.user_svd = fit_svd_embeddings(posts, "user", config.user_rank, config.svd_iterations, seed, config.grid_size)
    if "spatial" in blocks:
        if config.use_geo and config.location_rank:
            pipeline.location_svd = fit_svd_embeddings(
                posts, "location", config.location_rank, config.svd_iterations, derive_seed(seed, "location"), config.grid_size
            )
        first_seen = {}
        for post in posts:
            if post.user_id not in first_seen or post.timestamp < first_seen[post.user_id]:
                first_seen[post.user_id] = int(post.timestamp)
        pipeline.first_seen = dict(sorted(first_seen.items()))
    if "cross" in blocks and config.cluster_features:
        visual = _post_rows(tables, "visual_clip", posts)
        text = _post_rows(tables, "text_clip", posts)
        pipeline.visual_centroids, visual_codes = kmeans2(visual, config.n_clusters, minit="++", seed=derive_seed(seed, "visual_clusters") % 2**32)
        pipeline.text_centroids, text_codes = kmeans2(text, config.n_clusters, minit="++", seed=derive_seed(seed, "text_clusters") % 2**32)
        majority = np.zeros(config.n_clusters, dtype=np.int64)
        for c in range(config.n_clusters):
            members = text_codes[visual_codes == c]
            if members.size:
                # ties go to the lowest text cluster
                majority[c] = int(np.argmax(np.bincount(members, minlength=config.n_clusters)))
        pipeline.cluster_majority = majority
    return pipeline


def _visual_block(posts, tables, pipeline):
    raw = _post_rows(tables, "visual_clip", posts)
    if pipeline.visual_pca is not None:
        values = apply_pca(pipeline.visual_pca, raw)
        names = [f"pc_{j}" for j in range(values.shape[1])]
    else:
        values = raw
        names = [f"clip_{j}" for j in range(values.shape[1])]
    return values, names


def _textual_block(posts, tables, pipeline):
    raw = _post_rows(tables, "text_clip", posts)
    if pipeline.text_pca is not None:
        parts = [apply_pca(pipeline.text_pca, raw)]
        names = [f"pc_{j}" for j in range(parts[0].shape[1])]
    else:
        parts = [raw]
        names = [f"clip_{j}" for j in range(raw.shape[1])]
    if pipeline.config.use_tag_glove:
        glove = _table(tables, "tags_glove")
        index = glove.row_index()
        pooled = np.zeros((len(posts), glove.dim))
        for i, post in enumerate(posts):
            rows = [index[t] for t in post.tags if t in index]
            if rows:
                pooled[i] = glove.data[rows].mean(axis=0)
        parts.append(pooled)
        names += [f"glove_{j}" for j in range(glove.dim)]
    stats = np.array([text_stats(p.caption, p.tags) for p in posts]).reshape(len(posts), len(TEXT_STAT_NAMES))
    parts.append(stats)
    names += list(TEXT_STAT_NAMES)
    return np.hstack(parts), names


def _as_float(value):
    return np.nan if value is None else float(value)


def _spatial_block(posts, pipeline):
    temporal = temporal_frame([p.timestamp for p in posts]).to_numpy() if posts else np.zeros((0, len(TEMPORAL_NAMES)))
    geo = np.array([
        [
            _as_float(p.latitude), _as_float(p.longitude), _as_float(p.geo_accuracy), float(p.geo_missing),
            (p.timestamp - pipeline.first_seen[p.user_id]) / SECONDS_PER_DAY if p.user_id in pipeline.first_seen else 0.0,
        ]
        for p in posts
    ]).reshape(len(posts), len(GEO_NAMES))
    if not pipeline.config.use_geo:
        # account age is not a geo column
        return np.hstack([temporal, geo[:, -1:]]), list(TEMPORAL_NAMES) + [GEO_NAMES[-1]]
    parts, names = [temporal, geo], list(TEMPORAL_NAMES) + list(GEO_NAMES)
    if pipeline.location_svd is not None:
        cells = [location_cell(p, pipeline.config.grid_size) for p in posts]
        loc = embed_entities(pipeline.location_svd, cells, "location", [p.post_id for p in posts])
        parts.append(loc.data)
        names += list(loc.col_names)
    return np.hstack(parts), names


def _user_block(posts, pipeline):
    stats = np.array([
        [
            _as_float(p.followers), _as_float(p.following), _as_float(p.user_post_count),
            _as_float(p.is_pro), math.log1p(p.followers) if p.followers is not None else np.nan,
        ]
        for p in posts
    ]).reshape(len(posts), len(USER_STAT_NAMES))
    parts, names = [stats], list(USER_STAT_NAMES)
    if pipeline.user_svd is not None:
        emb = embed_entities(pipeline.user_svd, [p.user_id for p in posts], "user", [p.post_id for p in posts])
        parts.append(emb.data)
        names += list(emb.col_names)
    return np.hstack(parts), names


def _cross_block(posts, tables, pipeline):
    visual = _post_rows(tables, "visual_clip", posts)
    text = _post_rows(tables, "text_clip", posts)
    parts = [cross_modal_similarity_rows(visual, text).reshape(-1, 1)]
    names = ["s_cross"]
    if pipeline.visual_centroids is not None:
        visual_codes, visual_dist = vq(visual, pipeline.visual_centroids)
        text_codes, _ = vq(text, pipeline.text_centroids)
        agreement = (pipeline.cluster_majority[visual_codes] == text_codes).astype(np.float64)
        parts += [agreement.reshape(-1, 1), visual_dist.reshape(-1, 1)]
        names += ["cluster_agreement", "visual_centroid_distance"]
    return np.hstack(parts), names


def build_features(posts, tables, config, pipeline=None, seed=0):
    """
    Assemble x = [visual; textual; spatial; user; cross] for aligned posts

    Parameters:
    - posts: imputed posts
    - tables: mapping source tag -> EmbeddingTable ("visual_clip", "text_clip", "tags_glove")
    - config: FeatureConfig
    - pipeline: fitted FeaturePipeline; fitted on `posts` when omitted

    Returns:
    - FeatureMatrix with block_spans for every enabled block
    """
    if pipeline is None:
        pipeline = fit_feature_pipeline(posts, tables, config, seed)
    ids = [p.post_id for p in posts]
    builders = {
        "visual": lambda: _visual_block(posts, tables, pipeline),
        "textual": lambda: _textual_block(posts, tables, pipeline),
        "spatial": lambda: _spatial_block(posts, pipeline),
        "user": lambda: _user_block(posts, pipeline),
        "cross": lambda: _cross_block(posts, tables, pipeline),
    }
    blocks = config.enabled_blocks()
    if not blocks:
        raise DataError("every feature block is disabled")
    parts = []
    for name in blocks:
        values, names = builders[name]()
        parts.append(FeatureMatrix.from_array(ids, names, values, block=name))
    matrix = concat_blocks(parts)
    if not matrix.is_finite():
        bad = np.argwhere(~np.isfinite(matrix.data))[0]
        raise DataError(f"non-finite feature {matrix.col_names[bad[1]]!r} for post {ids[bad[0]]} (impute first)")
    return matrix
