import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from pipeline_errors import (
    AlignmentError,
    DataError,
    DuplicateIdError,
    FormatError,
    ImputationError,
    ParseError,
    RangeError,
)
from post_data import POST_FIELDS, Post, posts_to_frame

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"PFE1"

# Which imputation rule covers which post field
NUMERIC_FIELDS = ("followers", "following", "user_post_count", "geo_accuracy")
CATEGORICAL_FIELDS = ("is_pro",)
GEO_FIELDS = ("latitude", "longitude")

# Expected JSON types for each key of a posts file
FIELD_TYPES = {
    "post_id": (str,),
    "user_id": (str,),
    "timestamp": (int,),
    "latitude": (int, float),
    "longitude": (int, float),
    "geo_accuracy": (int,),
    "caption": (str,),
    "tags": (list,),
    "followers": (int,),
    "following": (int,),
    "user_post_count": (int,),
    "is_pro": (bool,),
    "label": (int, float),
}


def _check_type(key, value, path, line_number):
    expected = FIELD_TYPES[key]
    # bool is an int subclass; only is_pro may be boolean
    if isinstance(value, bool) and bool not in expected:
        raise ParseError(path, line_number, f"{key} must be {expected[0].__name__}, got bool")
    if not isinstance(value, expected):
        raise ParseError(path, line_number, f"{key} must be {expected[0].__name__}, got {type(value).__name__}")
    if key == "tags" and not all(isinstance(tag, str) for tag in value):
        raise ParseError(path, line_number, "tags must be a list of strings")


def read_posts(path):
    """
    Read a UTF-8 JSONL posts file

    Parameters:
    - path: file with one JSON object per line; absent keys are missing values

    Returns:
    - List of Post objects in file order
    """
    path = Path(path)
    posts = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(path, line_number, f"malformed JSON ({e.msg})") from e
            if not isinstance(record, dict):
                raise ParseError(path, line_number, "expected a JSON object")
            values = {}
            for key in POST_FIELDS:
                if key in record and record[key] is not None:
                    _check_type(key, record[key], path, line_number)
                    values[key] = record[key]
            for required in ("post_id", "user_id", "timestamp"):
                if required not in values:
                    raise ParseError(path, line_number, f"missing required key {required!r}")
            if "tags" in values:
                values["tags"] = tuple(values["tags"])
            for key in ("latitude", "longitude", "label"):
                if key in values:
                    values[key] = float(values[key])
            try:
                post = Post(**values)
            except RangeError as e:
                raise RangeError(e.field, e.value, f"{path}:{line_number}") from e
            if post.post_id in seen:
                raise DuplicateIdError(post.post_id, f"{path}:{line_number}")
            seen.add(post.post_id)
            posts.append(post)
    logger.info("read %d posts from %s", len(posts), path)
    return posts


def write_posts(posts, path):
    """Write posts as JSONL; absent values are omitted, so unlabeled posts carry no label key."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for post in posts:
            record = {}
            for key in POST_FIELDS:
                value = getattr(post, key)
                if value is None:
                    continue
                record[key] = list(value) if key == "tags" else value
            f.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")


@dataclass(frozen=True)
class EmbeddingTable:
    """Precomputed encoder outputs, one row per id."""

    ids: tuple
    data: np.ndarray
    source_tag: str

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 2 or data.shape[0] != len(self.ids) or data.shape[1] < 1:
            raise DataError(f"embedding table {self.source_tag!r}: data shape {data.shape} does not match {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            dup = pd.Series(list(self.ids)).loc[lambda s: s.duplicated()].iloc[0]
            raise DuplicateIdError(dup, f"embedding table {self.source_tag}")
        if not np.isfinite(data).all():
            raise DataError(f"embedding table {self.source_tag!r} holds non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "data", data)

    @property
    def dim(self):
        return self.data.shape[1]

    def row_index(self):
        return {id_: i for i, id_ in enumerate(self.ids)}

    def take(self, ids):
        """Rows for the given ids, in the given order."""
        index = self.row_index()
        rows = [index[id_] for id_ in ids]
        return EmbeddingTable(tuple(ids), self.data[rows] if rows else np.zeros((0, self.dim)), self.source_tag)

    def lookup(self, ids):
        """Matrix of rows for `ids`; ids absent from the table map to zero rows."""
        index = self.row_index()
        out = np.zeros((len(ids), self.dim))
        for i, id_ in enumerate(ids):
            row = index.get(id_)
            if row is not None:
                out[i] = self.data[row]
        return out


def write_embeddings(table, path):
    """
    Write an embedding table in the PFE1 binary layout (little-endian)

    magic "PFE1" | u32 rows | u32 dim | u8 tag length + tag | per row: u16 id length, id, dim x f32
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tag = table.source_tag.encode("utf-8")
    if len(tag) > 255:
        raise DataError(f"source tag longer than 255 bytes: {table.source_tag!r}")
    values = table.data.astype("<f4")
    if not np.isfinite(values).all():
        raise DataError(f"embedding table {table.source_tag!r} overflows 32-bit storage")
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<IIB", len(table.ids), table.dim, len(tag)))
        f.write(tag)
        for id_, row in zip(table.ids, values):
            encoded = id_.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise DataError(f"id longer than 65535 bytes: {id_[:32]!r}...")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(row.tobytes())


def read_embeddings(path):
    """
    Read a PFE1 embedding file

    Returns:
    - EmbeddingTable with float64 copies of the stored 32-bit values
    """
    buffer = Path(path).read_bytes()
    offset = 0

    def take(size, what):
        nonlocal offset
        if offset + size > len(buffer):
            raise FormatError(offset, f"truncated payload while reading {what} ({len(buffer) - offset} of {size} bytes left)")
        chunk = buffer[offset:offset + size]
        offset += size
        return chunk

    magic = take(4, "magic")
    if magic != EMBEDDING_MAGIC:
        raise FormatError(0, f"bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
    rows, dim, tag_length = struct.unpack("<IIB", take(9, "header"))
    if dim < 1:
        raise FormatError(8, "dimension must be positive")
    try:
        source_tag = take(tag_length, "source tag").decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(13, "source tag is not UTF-8") from e

    ids = []
    data = np.empty((rows, dim), dtype=np.float64)
    for r in range(rows):
        (id_length,) = struct.unpack("<H", take(2, f"id length of row {r}"))
        id_start = offset
        try:
            ids.append(take(id_length, f"id of row {r}").decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FormatError(id_start, f"id of row {r} is not UTF-8") from e
        values_start = offset
        values = np.frombuffer(take(4 * dim, f"values of row {r}"), dtype="<f4")
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise FormatError(values_start + 4 * int(bad[0]), f"non-finite value in row {r}")
        data[r] = values
    if offset != len(buffer):
        raise FormatError(offset, f"{len(buffer) - offset} trailing bytes after {rows} rows")
    if len(set(ids)) != len(ids):
        raise DuplicateIdError(pd.Series(ids).loc[lambda s: s.duplicated()].iloc[0], str(path))
    logger.info("read %d x %d embeddings tagged %r from %s", rows, dim, source_tag, path)
    return EmbeddingTable(tuple(ids), data, source_tag)


def align(posts, tables, policy="inner"):
    """
    Put posts and post-keyed embedding tables into one shared id order

    Parameters:
    - posts: posts in file order
    - tables: embedding tables keyed by post id
    - policy: "inner" drops posts missing from any table; "require_all" fails instead

    Returns:
    - (posts, tables) restricted to the join, in post file order
    """
    if policy not in ("inner", "require_all"):
        raise DataError(f"unknown align policy {policy!r}")
    table_ids = [set(t.ids) for t in tables]
    kept, missing = [], []
    for post in posts:
        if all(post.post_id in ids for ids in table_ids):
            kept.append(post)
        else:
            missing.append(post.post_id)
    if missing and policy == "require_all":
        shown = ", ".join(missing[:10])
        raise AlignmentError(f"{len(missing)} posts missing from embedding tables: {shown}", missing_ids=missing[:10])
    order = [p.post_id for p in kept]
    aligned = [t.take(order) for t in tables]
    for table in tables:
        extra = len(table.ids) - len(order)
        if extra:
            logger.info("align: %d rows of %r have no post and were dropped", extra, table.source_tag)
    if missing:
        logger.info("align: dropped %d of %d posts missing from a table", len(missing), len(posts))
    return kept, aligned


@dataclass(frozen=True)
class ImputationPolicy:
    """numeric_rule: "median" | "constant"; categorical_rule: "mode" | "sentinel"; geo always (0, 0) + flag."""

    numeric_rule: str = "median"
    numeric_constant: float = 0.0
    categorical_rule: str = "sentinel"
    geo_rule: str = "sentinel"

    def __post_init__(self):
        if self.numeric_rule not in ("median", "constant"):
            raise DataError(f"unknown numeric imputation rule {self.numeric_rule!r}")
        if self.categorical_rule not in ("mode", "sentinel"):
            raise DataError(f"unknown categorical imputation rule {self.categorical_rule!r}")
        if self.geo_rule != "sentinel":
            raise DataError(f"unknown geo imputation rule {self.geo_rule!r}")


@dataclass(frozen=True)
class ImputationStats:
    """Fill values learned from training rows only."""

    numeric: dict = field(default_factory=dict)
    categorical: dict = field(default_factory=dict)


@dataclass
class ImputationReport:
    counts: dict = field(default_factory=dict)

    @property
    def total(self):
        return sum(self.counts.values())

    def to_frame(self):
        return pd.DataFrame({"field": list(self.counts), "imputed": list(self.counts.values())})


def fit_imputation(posts, policy, stats_from):
    """
    Learn fill values from the rows flagged as training

    Parameters:
    - posts: all posts
    - policy: ImputationPolicy
    - stats_from: boolean sequence, True for training rows
    """
    mask = np.asarray(stats_from, dtype=bool)
    if mask.shape != (len(posts),):
        raise DataError("stats_from must flag every post")
    frame = posts_to_frame(posts).loc[mask]
    numeric = {}
    for name in NUMERIC_FIELDS:
        if policy.numeric_rule == "constant":
            numeric[name] = float(policy.numeric_constant)
            continue
        present = frame[name].dropna().astype(float)
        if present.empty:
            raise ImputationError(name)
        numeric[name] = float(present.median())
    categorical = {}
    for name in CATEGORICAL_FIELDS:
        if policy.categorical_rule == "sentinel":
            categorical[name] = False
        else:
            present = frame[name].dropna().astype(bool)
            # ties go to False
            categorical[name] = bool(present.sum() > len(present) - present.sum())
    return ImputationStats(numeric=numeric, categorical=categorical)


def apply_imputation(posts, stats):
    """Fill absent values; present values are never touched."""
    counts = {name: 0 for name in NUMERIC_FIELDS + CATEGORICAL_FIELDS + GEO_FIELDS + ("tags",)}
    out = []
    for post in posts:
        changes = {}
        for name in NUMERIC_FIELDS:
            if getattr(post, name) is None:
                if name not in stats.numeric:
                    raise ImputationError(name)
                changes[name] = stats.numeric[name]
                counts[name] += 1
        for name in CATEGORICAL_FIELDS:
            if getattr(post, name) is None:
                changes[name] = stats.categorical[name]
                counts[name] += 1
        for name in GEO_FIELDS:
            if getattr(post, name) is None:
                changes[name] = 0.0
                changes["geo_missing"] = True
                counts[name] += 1
        out.append(replace(post, **changes) if changes else post)
    return out, ImputationReport(counts)


def impute(posts, policy, stats_from):
    """
    Fill missing values with training-only statistics

    Returns:
    - (imputed posts, ImputationReport with per-field counts)
    """
    stats = fit_imputation(posts, policy, stats_from)
    imputed, report = apply_imputation(posts, stats)
    logger.info("imputed %d values: %s", report.total, {k: v for k, v in report.counts.items() if v})
    return imputed, report
