import numpy as np
import pytest

from pipeline_errors import AlignmentError, RangeError
from post_data import FeatureMatrix, Post, concat_blocks, derive_seed, make_rng

from conftest import make_post


def block(name, width, ids=("p1", "p2")):
    data = np.arange(len(ids) * width, dtype=float).reshape(len(ids), width)
    return FeatureMatrix.from_array(ids, [f"c{j}" for j in range(width)], data, block=name)


def test_concat_widths_add():
    fused = concat_blocks([block("a", 3), block("b", 4)])
    assert fused.n_cols == 7
    assert fused.block_spans == {"a": (0, 3), "b": (3, 7)}
    assert fused.col_names[3] == "b.c0"


def test_concat_single_block_is_identity():
    only = block("a", 3)
    fused = concat_blocks([only])
    assert fused.ids == only.ids
    np.testing.assert_array_equal(fused.data, only.data)
    assert fused.block_spans == {"a": (0, 3)}


@pytest.mark.parametrize("seed", range(20))
def test_concat_is_associative(seed):
    rng = np.random.default_rng(seed)
    ids = tuple(f"p{i}" for i in range(int(rng.integers(1, 10))))
    a, b, c = (
        FeatureMatrix.from_array(ids, [f"c{j}" for j in range(w)], rng.standard_normal((len(ids), w)), block=name)
        for name, w in zip("abc", rng.integers(1, 6, size=3))
    )
    nested = concat_blocks([concat_blocks([a, b]), c])
    flat = concat_blocks([a, b, c])
    np.testing.assert_array_equal(nested.data, flat.data)
    assert nested.col_names == flat.col_names
    assert nested.block_spans == flat.block_spans


def test_concat_rejects_mismatched_ids():
    with pytest.raises(AlignmentError) as excinfo:
        concat_blocks([block("a", 3), block("b", 2, ids=("p2", "p1"))])
    assert excinfo.value.block == "b"


def test_concat_rejects_repeated_columns():
    with pytest.raises(AlignmentError):
        concat_blocks([block("a", 2), block("a", 2)])


def test_block_views_and_drop():
    fused = concat_blocks([block("a", 3), block("b", 4), block("c", 1)])
    assert [next(iter(b.block_spans)) for b in fused.blocks()] == ["a", "b", "c"]
    kept = fused.drop_blocks(["b"])
    assert kept.block_spans == {"a": (0, 3), "c": (3, 4)}
    np.testing.assert_array_equal(kept.block("c").data, fused.block("c").data)


def test_take_rows_keeps_ids_with_rows():
    fused = block("a", 2, ids=("p1", "p2", "p3"))
    taken = fused.take_rows([2, 0])
    assert taken.ids == ("p3", "p1")
    np.testing.assert_array_equal(taken.data, fused.data[[2, 0]])


def test_feature_matrix_is_read_only():
    fused = block("a", 2)
    with pytest.raises(ValueError):
        fused.data[0, 0] = 1.0


def test_overlapping_spans_rejected():
    with pytest.raises(AlignmentError):
        FeatureMatrix(("p1",), ("x", "y"), np.zeros((1, 2)), {"a": (0, 2), "b": (1, 2)})


def test_post_range_checks():
    with pytest.raises(RangeError) as excinfo:
        make_post("p1", latitude=200.0)
    assert excinfo.value.field == "latitude"
    with pytest.raises(RangeError):
        make_post("p1", followers=-1)
    with pytest.raises(RangeError):
        make_post("p1", label=float("nan"))


def test_post_label_helpers():
    post = Post("p1", "u1", 0)
    assert not post.has_label
    labeled = post.with_label(3)
    assert labeled.label == 3.0 and labeled.has_label
    assert labeled.without_label() == post


def test_seeded_streams_are_reproducible():
    assert make_rng(5).random(4).tolist() == make_rng(5).random(4).tolist()
    assert derive_seed(5, "fold", 1) == derive_seed(5, "fold", 1)
    assert derive_seed(5, "fold", 1) != derive_seed(5, "fold", 2)
    assert derive_seed(5, "fold", 1) != derive_seed(6, "fold", 1)
