import numpy as np
import pytest

from data_loader import EmbeddingTable
from ensemble import EnsembleConfig
from feature_builder import FeatureConfig
from post_data import Post
from pseudo_labeling import PseudoLabelConfig
from regressors import GbdtParams, MlpParams
from synthetic_data import SynthConfig, generate

SMALL_SYNTH = dict(
    n_posts=300, n_users=40, n_locations=10, visual_dim=8, text_dim=8, glove_dim=4,
    tag_vocab=30, content_dim=3, private_dim=2, seed=7,
)


def small_synth_config(**overrides):
    return SynthConfig(**{**SMALL_SYNTH, **overrides})


def small_ensemble_config(**overrides):
    base = dict(
        k=3,
        features=FeatureConfig(user_rank=4, location_rank=2),
        gbdt=GbdtParams(n_trees=20, min_leaf=5, max_depth=3),
        mlp=MlpParams(projection_width=4, hidden=(8,), epochs=5, batch_size=32),
    )
    base.update(overrides)
    return EnsembleConfig(**base)


def make_post(post_id, **fields):
    values = dict(
        user_id="u1", timestamp=1_500_000_000, latitude=45.0, longitude=7.0, geo_accuracy=16,
        caption="a photo", tags=("sun",), followers=100, following=50, user_post_count=10, is_pro=False,
    )
    values.update(fields)
    return Post(post_id=post_id, **values)


@pytest.fixture(scope="session")
def small_dataset():
    return generate(small_synth_config())


@pytest.fixture
def ensemble_config():
    return small_ensemble_config()


@pytest.fixture
def pseudo_config():
    return PseudoLabelConfig(alpha=0.5, max_iterations=2, sample_weight=0.5)


@pytest.fixture
def tiny_tables():
    """Post-keyed tables for p1..p4 plus a two-tag GloVe table."""
    ids = ("p1", "p2", "p3", "p4")
    return {
        "visual_clip": EmbeddingTable(ids, np.arange(8, dtype=float).reshape(4, 2), "visual_clip"),
        "text_clip": EmbeddingTable(ids, np.ones((4, 2)), "text_clip"),
        "tags_glove": EmbeddingTable(("sun", "sea"), np.array([[1.0, 0.0], [0.0, 1.0]]), "tags_glove"),
    }
