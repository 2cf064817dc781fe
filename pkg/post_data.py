"""Domain types shared by every stage: posts, feature matrices, seeded randomness."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from pipeline_errors import AlignmentError, RangeError

# Fixed modality order of the fused feature vector
BLOCK_ORDER = ("visual", "textual", "spatial", "user", "cross")

POST_FIELDS = (
    "post_id", "user_id", "timestamp", "latitude", "longitude", "geo_accuracy",
    "caption", "tags", "followers", "following", "user_post_count", "is_pro", "label",
)


@dataclass(frozen=True)
class Post:
    """One social-media record. Optional fields are None when absent."""

    post_id: str
    user_id: str
    timestamp: int
    latitude: float | None = None
    longitude: float | None = None
    geo_accuracy: int | None = None
    caption: str = ""
    tags: tuple[str, ...] = ()
    followers: int | None = None
    following: int | None = None
    user_post_count: int | None = None
    is_pro: bool | None = None
    label: float | None = None
    geo_missing: bool = False

    def __post_init__(self):
        if not self.post_id:
            raise RangeError("post_id", self.post_id)
        if not isinstance(self.tags, tuple):
            object.__setattr__(self, "tags", tuple(self.tags))
        where = f"post {self.post_id}"
        if self.latitude is not None and not -90.0 <= self.latitude <= 90.0:
            raise RangeError("latitude", self.latitude, where)
        if self.longitude is not None and not -180.0 <= self.longitude <= 180.0:
            raise RangeError("longitude", self.longitude, where)
        if self.label is not None and not math.isfinite(self.label):
            raise RangeError("label", self.label, where)
        for name in ("followers", "following", "user_post_count"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise RangeError(name, value, where)

    @property
    def has_label(self):
        return self.label is not None

    def with_label(self, label):
        return replace(self, label=float(label))

    def without_label(self):
        return replace(self, label=None)


def posts_to_frame(posts: Sequence[Post]) -> pd.DataFrame:
    """Tabular view of posts, one row per post in input order."""
    records = [{name: getattr(p, name) for name in POST_FIELDS + ("geo_missing",)} for p in posts]
    frame = pd.DataFrame.from_records(records, columns=list(POST_FIELDS) + ["geo_missing"])
    return frame


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense row-major matrix with named columns, aligned ids and modality spans.

    block_spans maps a modality name to a half-open column range [start, end).
    """

    ids: tuple[str, ...]
    col_names: tuple[str, ...]
    data: np.ndarray
    block_spans: Mapping[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim == 1 and len(self.col_names) == 0:
            data = data.reshape(len(self.ids), 0)
        if data.ndim != 2:
            raise AlignmentError(f"feature data must be 2-D, got shape {data.shape}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "col_names", tuple(self.col_names))
        object.__setattr__(self, "block_spans", dict(self.block_spans))
        if data.shape != (len(self.ids), len(self.col_names)):
            raise AlignmentError(
                f"data shape {data.shape} does not match {len(self.ids)} ids x {len(self.col_names)} columns"
            )
        if len(set(self.col_names)) != len(self.col_names):
            raise AlignmentError("column names must be unique")
        taken = np.zeros(len(self.col_names), dtype=bool)
        for name, (start, end) in self.block_spans.items():
            if not 0 <= start <= end <= len(self.col_names):
                raise AlignmentError(f"block span {name} [{start}, {end}) outside [0, {len(self.col_names)})", block=name)
            if taken[start:end].any():
                raise AlignmentError(f"block span {name} overlaps another block", block=name)
            taken[start:end] = True

    @classmethod
    def from_array(cls, ids, col_names, data, block=None):
        """Build a single-block matrix; names become `<block>.<name>` when a block is given."""
        col_names = list(col_names)
        spans = {}
        if block is not None:
            col_names = [name if name.startswith(f"{block}.") else f"{block}.{name}" for name in col_names]
            spans = {block: (0, len(col_names))}
        data = np.asarray(data, dtype=np.float64).reshape(len(ids), len(col_names))
        return cls(tuple(ids), tuple(col_names), data, spans)

    @property
    def n_rows(self):
        return self.data.shape[0]

    @property
    def n_cols(self):
        return self.data.shape[1]

    def block(self, name):
        start, end = self.block_spans[name]
        return FeatureMatrix(self.ids, self.col_names[start:end], self.data[:, start:end], {name: (0, end - start)})

    def blocks(self):
        """Blocks in column order."""
        ordered = sorted(self.block_spans.items(), key=lambda item: item[1][0])
        return [self.block(name) for name, _ in ordered]

    def drop_blocks(self, names: Iterable[str]):
        dropped = set(names)
        kept = [b for b in self.blocks() if next(iter(b.block_spans)) not in dropped]
        if not kept:
            return FeatureMatrix(self.ids, (), np.zeros((self.n_rows, 0)), {})
        return concat_blocks(kept)

    def take_rows(self, index):
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.intp)
        ids = tuple(np.asarray(self.ids, dtype=object)[index])
        return FeatureMatrix(ids, self.col_names, self.data[index], self.block_spans)

    def with_data(self, data):
        return FeatureMatrix(self.ids, self.col_names, data, self.block_spans)

    def is_finite(self):
        return bool(np.isfinite(self.data).all())

    def to_frame(self):
        frame = pd.DataFrame(self.data, columns=list(self.col_names))
        frame.insert(0, "post_id", list(self.ids))
        return frame


def concat_blocks(blocks: Sequence[FeatureMatrix], names: Sequence[str] | None = None) -> FeatureMatrix:
    """Concatenate blocks column-wise, keeping row order.

    With `names`, block i is prefixed and spanned as names[i]. Without, each
    block keeps its own spans, shifted by its column offset.
    """
    if not blocks:
        raise AlignmentError("nothing to concatenate")
    if names is not None and len(names) != len(blocks):
        raise AlignmentError("one name per block is required")
    ids = blocks[0].ids
    col_names, spans, parts = [], {}, []
    offset = 0
    for i, blk in enumerate(blocks):
        label = names[i] if names is not None else ",".join(blk.block_spans) or f"block{i}"
        if blk.ids != ids:
            raise AlignmentError(f"block {label!r} ids do not match the first block's ids", block=label)
        if names is not None:
            cols = [c if c.startswith(f"{label}.") else f"{label}.{c}" for c in blk.col_names]
            block_spans = {label: (0, blk.n_cols)}
        else:
            cols = list(blk.col_names)
            block_spans = blk.block_spans
        for col in cols:
            if col in col_names:
                raise AlignmentError(f"block {label!r} repeats column {col!r}", block=label)
        for name, (start, end) in block_spans.items():
            if name in spans:
                raise AlignmentError(f"block {name!r} appears twice", block=name)
            spans[name] = (start + offset, end + offset)
        col_names.extend(cols)
        parts.append(blk.data)
        offset += blk.n_cols
    data = np.hstack(parts) if parts else np.zeros((len(ids), 0))
    return FeatureMatrix(ids, tuple(col_names), data, spans)


# Seeded randomness. PCG64 produces the same stream on every platform for a
# given seed; all draws go through make_rng.

SEED_MASK = (1 << 64) - 1


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & SEED_MASK))


def derive_seed(seed: int, *keys) -> int:
    """seed XOR blake2b(keys): independent, reproducible child seeds."""
    digest = hashlib.blake2b(repr(tuple(keys)).encode("utf-8"), digest_size=8).digest()
    return (int(seed) ^ int.from_bytes(digest, "little")) & SEED_MASK
