import json
from pathlib import Path

import pytest

from pipeline_errors import ConfigError
from regressors import MEMBER_KINDS
from run_config import DEFAULT_SEED, RunManifest, config_from_dict, load_config, with_overrides

SAMPLE = """
[paths]
data_dir = "inputs"
model = "models/run.pfa"

[ensemble]
k = 3
members = ["gbdt", "ridge"]
iqr_multiplier = 3

[gbdt]
n_trees = 50
learning_rate = 0.05

[mlp]
hidden = [16, 8]

[pseudo]
alpha = 0.25
max_iterations = 1

[run]
seed = 11
extra_knob = "ignored"
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(SAMPLE, encoding="utf-8")
    return path


def test_defaults():
    config = load_config()
    assert config.seed == DEFAULT_SEED
    assert config.ensemble.k == 5
    assert config.ensemble.members == MEMBER_KINDS
    assert config.pseudo.max_iterations == 2
    assert config.synth.n_posts == 10_000


def test_sections_map_onto_settings(config_path):
    config = load_config(config_path)
    assert config.seed == 11
    assert config.ensemble.members == ("gbdt", "ridge")
    assert config.ensemble.iqr_multiplier == 3.0
    assert isinstance(config.ensemble.iqr_multiplier, float)
    assert config.gbdt.n_trees == 50 and config.gbdt.learning_rate == 0.05
    assert config.gbdt.max_depth == 4
    assert config.mlp.hidden == (16, 8)
    assert config.pseudo.alpha == 0.25
    ens = config.ensemble_config()
    assert ens.k == 3 and ens.gbdt is config.gbdt and ens.features is config.features


def test_paths_resolve_against_the_config_directory(config_path):
    config = load_config(config_path)
    assert config.resolve("posts") == config_path.parent / "inputs" / "posts.jsonl"
    assert config.resolve("visual_clip").name == "visual_clip.pfe"
    assert config.model_path() == config_path.parent / "models" / "run.pfa"
    with pytest.raises(ConfigError) as excinfo:
        config.resolve("predictions")
    assert excinfo.value.field == "paths.predictions"


@pytest.mark.parametrize("data, field", [
    ({"ensemble": {"k": "five"}}, "ensemble.k"),
    ({"ensemble": {"k": 1}}, "ensemble.k"),
    ({"ensemble": {"members": ["gbdt", "forest"]}}, "ensemble.members"),
    ({"ensemble": {"members": ["gbdt", "gbdt"]}}, "ensemble.members"),
    ({"ensemble": {"stratified": 1}}, "ensemble.stratified"),
    ({"gbdt": {"learning_rate": 0}}, "gbdt.learning_rate"),
    ({"mlp": {"hidden": [8, 0]}}, "mlp.hidden"),
    ({"evaluate": {"ablations": ["drop-everything"]}}, "evaluate.ablations"),
    ({"run": {"seed": -1}}, "run.seed"),
    ({"pseudo": {"alpha": float("nan")}}, "pseudo.alpha"),
    ({"pseudo": {"max_iterations": 0}}, "pseudo.max_iterations"),
    ({"synth": {"labeled_fraction": 1.5}}, "synth.labeled_fraction"),
    ({"paths": {"align_policy": "outer"}}, "paths.align_policy"),
    ({"gbdt": 3}, "gbdt"),
])
def test_bad_values_name_the_field(data, field):
    with pytest.raises(ConfigError) as excinfo:
        config_from_dict(data)
    assert excinfo.value.field == field
    assert excinfo.value.exit_code == 2


def test_invalid_toml(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("[ensemble\nk = 3\n", encoding="utf-8")
    with pytest.raises(ConfigError) as excinfo:
        load_config(path)
    assert excinfo.value.field == "--config"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


def test_overrides(config_path, tmp_path):
    config = load_config(config_path)
    assert with_overrides(config) is config
    changed = with_overrides(config, seed=99, workers=2, out_dir=tmp_path / "out")
    assert changed.seed == 99 and changed.run.workers == 2
    assert Path(changed.run.out_dir).is_absolute()
    assert changed.out_dir() == (tmp_path / "out").resolve()
    assert config.seed == 11
    with pytest.raises(ConfigError):
        with_overrides(config, workers=0)


def test_content_hash(config_path):
    config = load_config(config_path)
    assert config.content_hash() == load_config(config_path).content_hash()
    assert len(config.content_hash()) == 64
    assert with_overrides(config, seed=12).content_hash() != config.content_hash()
    # location of the config file is not a setting
    assert config_from_dict({}, base_dir="/a").content_hash() == config_from_dict({}, base_dir="/b").content_hash()


def test_manifest_records_stages_and_artifacts(config_path, tmp_path):
    config = load_config(config_path)
    manifest = RunManifest.start("train", config)
    manifest.record_stage("load", "ok", posts=10)
    manifest.record_stage("pseudo", "skipped")
    manifest.add_artifact("model", tmp_path / "model.pfa")
    path = tmp_path / "train_manifest.json"
    manifest.write(path)
    written = json.loads(path.read_text(encoding="utf-8"))
    assert written["command"] == "train"
    assert written["config_hash"] == config.content_hash()
    assert written["seed"] == 11
    assert written["stages"] == {"load": {"status": "ok", "posts": 10}, "pseudo": {"status": "skipped"}}
    assert written["artifacts"]["model"] == str(tmp_path / "model.pfa")
    assert written["finished_at"] is not None
