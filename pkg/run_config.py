"""Sectioned TOML run configuration and the run manifest.

One file drives a whole run. Sections map onto frozen dataclasses; every
value is type- and range-checked on load, and a bad value raises
ConfigError naming the dotted field (e.g. `synth.labeled_fraction`).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import tomllib
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

from artifact_io import atomic_write_bytes
from data_loader import ImputationPolicy
from ensemble import EnsembleConfig
from feature_builder import FeatureConfig
from pipeline_errors import ConfigError, DataError
from pseudo_labeling import PseudoLabelConfig
from regressors import MEMBER_KINDS, GbdtParams, MlpParams, RidgeParams
from synthetic_data import DATASET_FILES, SynthConfig

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.3.0"
DEFAULT_SEED = 20250601
ABLATION_TOGGLES = ("drop-visual", "drop-textual", "drop-user", "drop-geo", "no-pseudo", "no-iqr", "single-split")


@dataclass(frozen=True)
class PathsConfig:
    """Empty file entries fall back to the standard names inside data_dir."""

    data_dir: str = "data"
    posts: str = ""
    visual_clip: str = ""
    text_clip: str = ""
    tags_glove: str = ""
    predictions: str = ""
    model: str = ""
    align_policy: str = "inner"


@dataclass(frozen=True)
class EnsembleSettings:
    k: int = 5
    members: tuple = MEMBER_KINDS
    metric: str = "mae"
    stratified: bool = False
    iqr_multiplier: float = 1.5
    huber_delta: float = 1.0
    holdout_fraction: float = 0.2
    standardize_labels: bool = True


@dataclass(frozen=True)
class EvaluateConfig:
    bins: int = 20
    importance_repeats: int = 5
    top_features: int = 20
    ablations: tuple = ABLATION_TOGGLES


@dataclass(frozen=True)
class RunSettings:
    seed: int = DEFAULT_SEED
    workers: int = 1
    out_dir: str = "runs/latest"


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    imputation: ImputationPolicy = field(default_factory=ImputationPolicy)
    gbdt: GbdtParams = field(default_factory=GbdtParams)
    mlp: MlpParams = field(default_factory=MlpParams)
    ridge: RidgeParams = field(default_factory=RidgeParams)
    ensemble: EnsembleSettings = field(default_factory=EnsembleSettings)
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    run: RunSettings = field(default_factory=RunSettings)
    base_dir: str = "."

    @property
    def seed(self):
        return self.run.seed

    def resolve(self, name):
        """Absolute path of a [paths] entry, defaulting to the dataset file names."""
        value = getattr(self.paths, name, "")
        if not value:
            if name not in DATASET_FILES:
                raise ConfigError(f"paths.{name}", "not set")
            value = str(Path(self.paths.data_dir) / DATASET_FILES[name])
        path = Path(value)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def out_dir(self):
        path = Path(self.run.out_dir)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def model_path(self):
        return self.resolve("model") if self.paths.model else self.out_dir() / "model.pfa"

    def ensemble_config(self):
        return EnsembleConfig(
            k=self.ensemble.k,
            members=tuple(self.ensemble.members),
            metric=self.ensemble.metric,
            stratified=self.ensemble.stratified,
            iqr_multiplier=self.ensemble.iqr_multiplier,
            huber_delta=self.ensemble.huber_delta,
            standardize_labels=self.ensemble.standardize_labels,
            features=self.features,
            imputation=self.imputation,
            gbdt=self.gbdt,
            mlp=self.mlp,
            ridge=self.ridge,
        )

    def to_dict(self):
        data = asdict(self)
        data.pop("base_dir")
        return data

    def content_hash(self):
        """SHA-256 of the canonical JSON of every resolved setting."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _positive(value):
    return value > 0


def _non_negative(value):
    return value >= 0


def _fraction_open(value):
    return 0.0 < value < 1.0


RULES = {
    "paths.align_policy": (lambda v: v in ("inner", "require_all"), "must be inner or require_all"),
    "features.visual_pca": (_non_negative, "must be >= 0"),
    "features.text_pca": (_non_negative, "must be >= 0"),
    "features.user_rank": (_non_negative, "must be >= 0"),
    "features.location_rank": (_non_negative, "must be >= 0"),
    "features.svd_iterations": (_positive, "must be >= 1"),
    "features.grid_size": (_positive, "must be > 0"),
    "features.n_clusters": (lambda v: v >= 2, "must be >= 2"),
    "gbdt.n_trees": (_non_negative, "must be >= 0"),
    "gbdt.learning_rate": (lambda v: 0 < v <= 1, "must be in (0, 1]"),
    "gbdt.max_depth": (_positive, "must be >= 1"),
    "gbdt.min_leaf": (_positive, "must be >= 1"),
    "gbdt.subsample": (lambda v: 0 < v <= 1, "must be in (0, 1]"),
    "mlp.projection_width": (_positive, "must be >= 1"),
    "mlp.hidden": (lambda v: all(isinstance(h, int) and h > 0 for h in v), "must list positive widths"),
    "mlp.epochs": (_positive, "must be >= 1"),
    "mlp.batch_size": (lambda v: v >= 2, "must be >= 2"),
    "mlp.learning_rate": (_positive, "must be > 0"),
    "mlp.momentum": (lambda v: 0 <= v < 1, "must be in [0, 1)"),
    "mlp.clip_norm": (_positive, "must be > 0"),
    "mlp.norm_decay": (_fraction_open, "must be in (0, 1)"),
    "ridge.l2": (_non_negative, "must be >= 0"),
    "ensemble.k": (lambda v: v >= 2, "must be >= 2"),
    "ensemble.members": (lambda v: len(v) >= 1 and all(m in MEMBER_KINDS for m in v) and len(set(v)) == len(v),
                         f"must list distinct members from {MEMBER_KINDS}"),
    "ensemble.metric": (lambda v: v in ("mae", "src"), "must be mae or src"),
    "ensemble.iqr_multiplier": (lambda v: v > 0, "must be > 0 (inf disables filtering)"),
    "ensemble.huber_delta": (lambda v: 0 < v < math.inf, "must be finite and > 0"),
    "ensemble.holdout_fraction": (lambda v: 0 <= v < 1, "must be in [0, 1)"),
    "evaluate.bins": (_positive, "must be >= 1"),
    "evaluate.importance_repeats": (_positive, "must be >= 1"),
    "evaluate.top_features": (_positive, "must be >= 1"),
    "evaluate.ablations": (lambda v: all(t in ABLATION_TOGGLES for t in v), f"toggles must be from {ABLATION_TOGGLES}"),
    "run.seed": (lambda v: 0 <= v < 2**64, "must be a u64"),
    "run.workers": (lambda v: v >= 1 or v == -1, "must be >= 1 (or -1 for all cores)"),
}


def _coerce(dotted, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(dotted, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(dotted, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(dotted, f"expected a number, got {value!r}")
        value = float(value)
        if math.isnan(value):
            raise ConfigError(dotted, "NaN is not allowed")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(dotted, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(dotted, f"expected a list, got {value!r}")
        return tuple(value)
    raise ConfigError(dotted, f"unsupported setting type {type(default).__name__}")


def _section(name, cls, table):
    if not isinstance(table, dict):
        raise ConfigError(name, "expected a table")
    values = {}
    for f in fields(cls):
        if f.name not in table:
            continue
        default = f.default if f.default is not MISSING else f.default_factory()
        dotted = f"{name}.{f.name}"
        values[f.name] = _coerce(dotted, table[f.name], default)
        rule = RULES.get(dotted)
        if rule and not rule[0](values[f.name]):
            raise ConfigError(dotted, f"{rule[1]}, got {table[f.name]!r}")
    for key in table:
        if key not in values and key not in {f.name for f in fields(cls)}:
            logger.debug("ignoring unknown setting %s.%s", name, key)
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (DataError, ValueError) as e:
        raise ConfigError(name, str(e)) from e


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig) if f.name != "base_dir"}


def config_from_dict(data, base_dir="."):
    sections = {}
    for name, factory in SECTIONS.items():
        cls = type(factory())
        sections[name] = _section(name, cls, data.get(name, {}))
    return RunConfig(**sections, base_dir=str(base_dir))


def load_config(path=None):
    """Read a TOML run config; no path means every default."""
    if path is None:
        return config_from_dict({})
    path = Path(path)
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError("--config", f"{path} does not exist") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("--config", f"{path} is not valid TOML: {e}") from e
    return config_from_dict(data, base_dir=path.parent)


def with_overrides(config, seed=None, workers=None, out_dir=None):
    """Apply command-line overrides of the [run] section."""
    changes = {}
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ConfigError("run.seed", f"must be a u64, got {seed}")
        changes["seed"] = seed
    if workers is not None:
        if workers < 1 and workers != -1:
            raise ConfigError("run.workers", f"must be >= 1, got {workers}")
        changes["workers"] = workers
    if out_dir is not None:
        changes["out_dir"] = str(Path(out_dir).resolve())
    if not changes:
        return config
    return replace(config, run=replace(config.run, **changes))


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    tool_version: str = TOOL_VERSION
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None
    stages: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def start(cls, command, config):
        return cls(command=command, config_hash=config.content_hash(), seed=config.seed)

    def record_stage(self, name, status, **metrics):
        self.stages[name] = {"status": status, **metrics}

    def add_artifact(self, name, path):
        self.artifacts[name] = str(path)

    def to_json(self):
        return asdict(self)

    def write(self, path):
        """Stamp the end time and replace `path` atomically."""
        self.finished_at = _now()
        text = json.dumps(self.to_json(), sort_keys=True, indent=2)
        atomic_write_bytes(path, text.encode("utf-8"))
