import json
import math
from collections import defaultdict

import numpy as np
import pytest

from data_loader import ImputationPolicy, impute, read_embeddings
from evaluation import spearman_src
from feature_builder import FeatureConfig, build_features, cross_modal_similarity_rows
from pipeline_errors import ConfigError
from synthetic_data import (
    DATASET_FILES, SynthConfig, generate, labeled_oracle_bound, oracle_src_bound, read_truth, write_dataset,
)

from conftest import small_synth_config

QUIET = dict(visual_effect=0.0, text_effect=0.0, temporal_effect=0.0, coherence_effect=0.0)


def test_generation_is_deterministic(small_dataset):
    again = generate(small_synth_config())
    assert again.posts == small_dataset.posts
    np.testing.assert_array_equal(again.labels, small_dataset.labels)
    np.testing.assert_array_equal(again.tables["visual_clip"].data, small_dataset.tables["visual_clip"].data)
    other = generate(small_synth_config(seed=8))
    assert not np.array_equal(other.labels, small_dataset.labels)


@pytest.mark.parametrize("fraction", [0.8, 0.5, 0.33, 1.0])
def test_labeled_fraction(fraction):
    dataset = generate(small_synth_config(labeled_fraction=fraction))
    assert len(dataset.labeled) == math.floor(fraction * 300)
    assert len(dataset.labeled) + len(dataset.unlabeled) == 300


def test_tables_cover_every_post(small_dataset):
    ids = tuple(p.post_id for p in small_dataset.posts)
    assert small_dataset.tables["visual_clip"].ids == ids
    assert small_dataset.tables["text_clip"].data.shape == (300, 8)
    assert small_dataset.tables["tags_glove"].dim == 4
    vocab = set(small_dataset.tables["tags_glove"].ids)
    assert all(set(p.tags) <= vocab for p in small_dataset.posts)


def test_user_only_labels_depend_on_the_user_alone():
    dataset = generate(small_synth_config(noise_std=0.0, outlier_fraction=0.0, labeled_fraction=1.0, **QUIET))
    by_user = defaultdict(set)
    for post in dataset.posts:
        by_user[post.user_id].add(post.label)
    assert all(len(labels) == 1 for labels in by_user.values())


def test_noiseless_labels_reach_the_bound():
    dataset = generate(small_synth_config(noise_std=0.0, outlier_fraction=0.0))
    assert labeled_oracle_bound(dataset) == pytest.approx(1.0, abs=1e-9)


def test_heavy_noise_destroys_the_bound():
    cfg = SynthConfig(n_posts=10_000, visual_dim=8, text_dim=8, glove_dim=4, content_dim=3, private_dim=2,
                      noise_std=100.0, seed=3)
    assert abs(labeled_oracle_bound(generate(cfg))) < 0.1


def test_oracle_bound_over_all_posts(small_dataset):
    bound = oracle_src_bound(small_dataset.truth, small_dataset.labels)
    assert 0.5 < bound < 1.0


@pytest.mark.parametrize("overrides, field", [
    (dict(labeled_fraction=1.5), "synth.labeled_fraction"),
    (dict(labeled_fraction=0.0), "synth.labeled_fraction"),
    (dict(n_posts=0), "synth.n_posts"),
    (dict(text_dim=4), "synth.text_dim"),
    (dict(private_dim=9), "synth.private_dim"),
    (dict(noise_std=float("inf")), "synth.noise_std"),
])
def test_invalid_configs_name_the_field(overrides, field):
    with pytest.raises(ConfigError) as excinfo:
        small_synth_config(**overrides)
    assert excinfo.value.field == field


def test_written_dataset_hides_unlabeled_labels(small_dataset, tmp_path):
    paths = write_dataset(small_dataset, tmp_path, small_synth_config())
    assert set(paths) == set(DATASET_FILES)
    labeled = {p.post_id for p in small_dataset.labeled}
    for line in paths["posts"].read_text(encoding="utf-8").splitlines():
        record = json.loads(line)
        assert ("label" in record) == (record["post_id"] in labeled)
    raw = json.loads(paths["truth"].read_text(encoding="utf-8"))
    assert not any("label" in key for key in raw)
    assert "labels" not in raw
    assert raw["oracle_src_bound"] == pytest.approx(labeled_oracle_bound(small_dataset))
    truth = read_truth(paths["truth"])
    np.testing.assert_array_equal(truth.latent, small_dataset.truth.latent)
    np.testing.assert_array_equal(read_embeddings(paths["visual_clip"]).data, small_dataset.tables["visual_clip"].data)


def test_labels_are_right_skewed():
    labels = generate(small_synth_config(n_posts=2000)).labels
    assert labels.min() > 0
    assert labels.mean() > np.median(labels)


def test_coherent_posts_are_more_popular():
    dataset = generate(small_synth_config(n_posts=2000))
    labeled = dataset.labeled
    rows = [int(p.post_id[1:]) for p in labeled]
    similarity = cross_modal_similarity_rows(
        dataset.tables["visual_clip"].data[rows], dataset.tables["text_clip"].data[rows],
    )
    assert spearman_src(similarity, [p.label for p in labeled]) > 0.1


def test_planted_columns_exist_in_the_features(small_dataset):
    posts, _ = impute(small_dataset.posts, ImputationPolicy(), [p.has_label for p in small_dataset.posts])
    matrix = build_features(posts, small_dataset.tables, FeatureConfig(user_rank=4, location_rank=2), seed=1)
    for columns in small_dataset.truth.planted_columns.values():
        assert set(columns) <= set(matrix.col_names)


def test_outliers_are_recorded():
    dataset = generate(small_synth_config(outlier_fraction=0.05))
    assert len(dataset.truth.outlier_ids) == 15
    assert len(set(dataset.truth.outlier_ids)) == 15
