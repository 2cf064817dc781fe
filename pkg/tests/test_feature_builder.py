import math
from dataclasses import replace

import numpy as np
import pytest

from artifact_io import decode_sections, encode_sections
from data_loader import ImputationPolicy, impute
from feature_builder import (
    TEXT_STAT_NAMES, FeatureConfig, FeaturePipeline, apply_pca, apply_scaler, build_features,
    build_interaction_matrix, cross_modal_similarity, embed_entities, fit_feature_pipeline, fit_pca, fit_scaler,
    fit_svd, iqr_filter, temporal_frame, text_stats,
)
from pipeline_errors import DataError, DegenerateInputError, RankError, ShapeError

from conftest import make_post


def stats_dict(caption, tags):
    return dict(zip(TEXT_STAT_NAMES, text_stats(caption, tags)))


def test_text_stats_empty():
    stats = stats_dict("", [])
    assert all(value == 0 for value in stats.values())


def test_text_stats_counts():
    stats = stats_dict("Hello world", ["sun", "sea"])
    assert stats["char_count"] == 11
    assert stats["word_count"] == 2
    assert stats["tag_count"] == 2
    assert stats["mean_word_length"] == 5.0


def test_text_stats_ratios():
    stats = stats_dict("AB12", [])
    assert stats["digit_ratio"] == 0.5
    assert stats["uppercase_ratio"] == 0.5


def test_text_stats_hashtags():
    assert stats_dict("sunset #beach #sea #", [])["hashtag_count"] == 2


def test_hour_encoding():
    frame = temporal_frame([0, 6 * 3600, 86400 + 6 * 3600])
    assert frame.loc[0, "hour_sin"] == pytest.approx(0.0, abs=1e-12)
    assert frame.loc[0, "hour_cos"] == pytest.approx(1.0)
    assert frame.loc[1, "hour_sin"] == pytest.approx(1.0)
    assert frame.loc[1, "hour_cos"] == pytest.approx(0.0, abs=1e-12)
    assert frame.loc[1, ["hour_sin", "hour_cos"]].tolist() == frame.loc[2, ["hour_sin", "hour_cos"]].tolist()


def test_weekday_and_month_encoding():
    # 1970-01-05 was a Monday; 1970-03-01 starts the third month
    frame = temporal_frame([4 * 86400, 59 * 86400])
    assert frame.loc[0, "dow_sin"] == pytest.approx(0.0, abs=1e-12)
    assert frame.loc[0, "dow_cos"] == pytest.approx(1.0)
    assert frame.loc[1, "month_sin"] == pytest.approx(math.sin(2 * math.pi * 2 / 12))
    assert frame.loc[1, "day_index"] == 59


def test_negative_timestamp_rejected():
    with pytest.raises(DataError):
        temporal_frame([-1])


def test_svd_identity():
    model = fit_svd(np.eye(4), 4)
    np.testing.assert_allclose(model.singular_values, np.ones(4), atol=1e-12)


def test_svd_rank_one():
    a = np.array([1.0, 2.0, 2.0])
    b = np.array([3.0, 0.0, 4.0, 0.0])
    model = fit_svd(np.outer(a, b), 2)
    assert model.singular_values[0] == pytest.approx(np.linalg.norm(a) * np.linalg.norm(b))
    assert model.singular_values[1] == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("seed", range(100))
def test_svd_matches_gram_eigendecomposition(seed):
    rng = np.random.default_rng(seed)
    m, n = rng.integers(4, 21, size=2)
    M = rng.standard_normal((m, n))
    k = int(rng.integers(1, min(m, n) + 1))
    model = fit_svd(M, k)
    eigenvalues, eigenvectors = np.linalg.eigh(M.T @ M)
    order = np.argsort(eigenvalues)[::-1][:k]
    np.testing.assert_allclose(model.singular_values, np.sqrt(np.clip(eigenvalues[order], 0, None)), atol=1e-6)
    # columns agree up to sign
    alignment = np.abs(np.sum(model.right_factors * eigenvectors[:, order], axis=0))
    np.testing.assert_allclose(alignment, np.ones(k), atol=1e-6)
    np.testing.assert_allclose(model.left_factors.T @ model.left_factors, np.eye(k), atol=1e-8)
    np.testing.assert_allclose(model.right_factors.T @ model.right_factors, np.eye(k), atol=1e-8)
    assert np.all(np.diff(model.singular_values) <= 1e-12)


def test_svd_errors():
    with pytest.raises(RankError):
        fit_svd(np.ones((3, 2)), 3)
    with pytest.raises(RankError):
        fit_svd(np.ones((3, 2)), 0)
    with pytest.raises(DegenerateInputError):
        fit_svd(np.zeros((3, 2)), 1)
    with pytest.raises(DegenerateInputError):
        fit_svd(np.zeros((0, 2)), 1)


def test_embed_entities_seen_and_unseen():
    M = np.array([[1.0, 0.0, 2.0], [0.0, 3.0, 1.0], [1.0, 1.0, 0.0]])
    model = fit_svd(M, 2, row_ids=["u1", "u2", "u3"])
    out = embed_entities(model, ["u2", "nobody", "u2", None], "user")
    np.testing.assert_array_equal(out.data[0, :-1], model.embeddings()[1])
    assert out.data[0, -1] == 0.0
    np.testing.assert_array_equal(out.data[1], [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(out.data[0], out.data[2])
    assert out.data[3, -1] == 1.0
    assert out.col_names == ("user_svd_0", "user_svd_1", "user_unseen")


def test_interaction_matrix_counts_are_damped():
    posts = [
        make_post("p1", user_id="a", tags=("x", "y")),
        make_post("p2", user_id="a", tags=("x",)),
        make_post("p3", user_id="b", tags=("y",)),
    ]
    entities, vocabulary, matrix = build_interaction_matrix(posts, "user")
    assert entities == ["a", "b"] and vocabulary == ["x", "y"]
    np.testing.assert_allclose(matrix, np.log1p([[2, 1], [0, 1]]))


def test_pca_on_a_line():
    X = np.array([[t, t] for t in range(5)], dtype=float)
    model = fit_pca(X, 2)
    np.testing.assert_allclose(np.abs(model.components[0]), np.full(2, 1 / math.sqrt(2)), atol=1e-12)
    assert model.explained_variance[1] == pytest.approx(0.0, abs=1e-12)


def test_pca_full_rank_reconstructs():
    X = np.random.default_rng(0).standard_normal((30, 8))
    model = fit_pca(X, 8)
    reconstructed = apply_pca(model, X) @ model.components + model.mean
    np.testing.assert_allclose(reconstructed, X, atol=1e-8)


@pytest.mark.parametrize("seed", range(100))
def test_pca_matches_covariance_eigendecomposition(seed):
    rng = np.random.default_rng(100 + seed)
    rows, dims = int(rng.integers(6, 21)), int(rng.integers(2, 9))
    X = rng.standard_normal((rows, dims)) @ rng.standard_normal((dims, dims))
    k = int(rng.integers(1, min(rows - 1, dims) + 1))
    model = fit_pca(X, k)
    eigenvalues, eigenvectors = np.linalg.eigh(np.cov(X, rowvar=False))
    order = np.argsort(eigenvalues)[::-1][:k]
    oracle = (X - X.mean(axis=0)) @ eigenvectors[:, order]
    projected = apply_pca(model, X)
    for j in range(k):
        sign = np.sign(np.dot(projected[:, j], oracle[:, j])) or 1.0
        np.testing.assert_allclose(projected[:, j], sign * oracle[:, j], atol=1e-6)
    np.testing.assert_allclose(model.explained_variance, eigenvalues[order], atol=1e-6)


@pytest.mark.parametrize("seed", range(100))
def test_pca_ignores_a_constant_shift(seed):
    rng = np.random.default_rng(300 + seed)
    rows, dims = int(rng.integers(6, 21)), int(rng.integers(2, 9))
    X = rng.standard_normal((rows, dims)) @ rng.standard_normal((dims, dims))
    k = int(rng.integers(1, min(rows - 1, dims) + 1))
    shifted = X + rng.uniform(-5.0, 5.0, size=dims)
    base = apply_pca(fit_pca(X, k), X)
    moved = apply_pca(fit_pca(shifted, k), shifted)
    for j in range(k):
        sign = np.sign(np.dot(base[:, j], moved[:, j])) or 1.0
        np.testing.assert_allclose(moved[:, j], sign * base[:, j], atol=1e-8)


def test_pca_errors():
    X = np.ones((5, 3))
    with pytest.raises(RankError):
        fit_pca(X, 4)
    model = fit_pca(np.random.default_rng(1).standard_normal((5, 3)), 2)
    with pytest.raises(ShapeError):
        apply_pca(model, np.ones((2, 4)))


def test_cross_modal_similarity():
    assert cross_modal_similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)
    assert cross_modal_similarity([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert cross_modal_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert cross_modal_similarity([0.0, 0.0], [1.0, 1.0]) == 0.0
    with pytest.raises(ShapeError):
        cross_modal_similarity([1.0], [1.0, 2.0])


@pytest.mark.parametrize("seed", range(50))
def test_cross_modal_similarity_ignores_positive_scaling(seed):
    rng = np.random.default_rng(seed)
    v, t = rng.standard_normal((2, 8))
    a, b = 10.0 ** rng.uniform(-3, 3, size=2)
    assert cross_modal_similarity(a * v, b * t) == pytest.approx(cross_modal_similarity(v, t), abs=1e-12)


def test_scaler_standardizes_with_population_std():
    X = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    out = apply_scaler(fit_scaler(X), X)
    np.testing.assert_allclose(out[:, 0], [-1.224744871391589, 0.0, 1.224744871391589])
    np.testing.assert_array_equal(out[:, 1], np.zeros(3))


def test_scaler_is_idempotent_on_its_output():
    X = np.random.default_rng(2).standard_normal((40, 5)) * 3 + 7
    once = apply_scaler(fit_scaler(X), X)
    refit = fit_scaler(once)
    assert np.all(np.abs(refit.means) <= 1e-9)
    assert np.all(np.abs(refit.stds - 1) <= 1e-9)
    np.testing.assert_allclose(apply_scaler(refit, once), once, atol=1e-9)


def test_scaler_width_mismatch():
    with pytest.raises(ShapeError):
        apply_scaler(fit_scaler(np.ones((3, 2))), np.ones((3, 3)))


def test_iqr_filter_drops_far_outlier():
    labels = list(range(1, 10)) + [100]
    keep = iqr_filter(labels)
    assert keep.tolist() == [True] * 9 + [False]


def test_iqr_filter_degenerate_cases():
    assert iqr_filter([4.0] * 6).all()
    assert iqr_filter(list(range(1, 10)) + [100], math.inf).all()
    with pytest.raises(DegenerateInputError):
        iqr_filter([1.0, 2.0, 3.0])


@pytest.mark.parametrize("seed", range(50))
def test_iqr_filter_ignores_label_order(seed):
    rng = np.random.default_rng(seed)
    y = np.exp(rng.standard_normal(int(rng.integers(4, 200))) * 1.5)
    order = rng.permutation(y.size)
    np.testing.assert_array_equal(iqr_filter(y[order]), iqr_filter(y)[order])


@pytest.fixture(scope="module")
def imputed(small_dataset):
    posts, _ = impute(small_dataset.posts, ImputationPolicy(), [p.has_label for p in small_dataset.posts])
    return posts


def test_full_width_is_sum_of_blocks(small_dataset, imputed):
    config = FeatureConfig(user_rank=4, location_rank=2)
    matrix = build_features(imputed, small_dataset.tables, config, seed=3)
    spans = sorted(matrix.block_spans.values())
    assert [name for name in matrix.block_spans] == ["visual", "textual", "spatial", "user", "cross"]
    assert spans[0][0] == 0 and spans[-1][1] == matrix.n_cols
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    assert matrix.block("visual").n_cols == 8
    assert matrix.block("cross").col_names == ("cross.s_cross",)
    assert matrix.ids == tuple(p.post_id for p in imputed)


def test_disabling_a_block_removes_its_columns(small_dataset, imputed):
    full = build_features(imputed, small_dataset.tables, FeatureConfig(user_rank=4, location_rank=2), seed=3)
    reduced = build_features(
        imputed, small_dataset.tables, FeatureConfig(use_visual=False, user_rank=4, location_rank=2), seed=3,
    )
    assert "visual" not in reduced.block_spans
    assert reduced.n_cols == full.n_cols - full.block("visual").n_cols


def test_disabling_geo_keeps_time_and_account_age(small_dataset, imputed):
    matrix = build_features(imputed, small_dataset.tables, FeatureConfig(use_geo=False, user_rank=4), seed=3)
    names = matrix.block("spatial").col_names
    assert "spatial.hour_sin" in names and "spatial.account_age_days" in names
    assert not any("latitude" in n or "location" in n for n in names)


def test_geo_missing_column_marks_original_absence(small_dataset, imputed):
    matrix = build_features(imputed, small_dataset.tables, FeatureConfig(user_rank=4, location_rank=2), seed=3)
    column = matrix.col_names.index("spatial.geo_missing")
    expected = [float(p.latitude is None) for p in small_dataset.posts]
    assert matrix.data[:, column].tolist() == expected


def test_posts_by_one_user_share_user_embedding(small_dataset, imputed):
    matrix = build_features(imputed, small_dataset.tables, FeatureConfig(user_rank=4, location_rank=2), seed=3)
    columns = [j for j, n in enumerate(matrix.col_names) if n.startswith("user.user_")]
    first = {}
    for row, post in enumerate(imputed):
        if post.user_id in first:
            np.testing.assert_array_equal(matrix.data[row, columns], matrix.data[first[post.user_id], columns])
        else:
            first[post.user_id] = row
    assert len(first) < len(imputed)


def test_unimputed_posts_are_rejected(small_dataset):
    posts = list(small_dataset.posts[:20])
    posts[3] = replace(posts[3], followers=None, latitude=1.0, longitude=1.0)
    with pytest.raises(DataError, match="non-finite"):
        build_features(posts, small_dataset.tables, FeatureConfig(use_user=True, user_rank=0, location_rank=0))


def test_all_blocks_disabled(small_dataset, imputed):
    config = FeatureConfig(use_visual=False, use_textual=False, use_spatial=False, use_user=False, use_cross=False)
    with pytest.raises(DataError):
        build_features(imputed, small_dataset.tables, config)


def test_pipeline_state_survives_an_artifact(small_dataset, imputed):
    config = FeatureConfig(user_rank=4, location_rank=2, visual_pca=3, cluster_features=True, n_clusters=3)
    training = [p for p in imputed if p.has_label]
    pipeline = fit_feature_pipeline(training, small_dataset.tables, config, seed=11)
    restored = FeaturePipeline.from_sections(decode_sections(encode_sections(pipeline.to_sections())))
    before = build_features(imputed, small_dataset.tables, config, pipeline)
    after = build_features(imputed, small_dataset.tables, config, restored)
    np.testing.assert_array_equal(before.data, after.data)
    assert "cross.cluster_agreement" in before.col_names
    assert before.block("visual").n_cols == 3
