import struct

import numpy as np
import pytest

from artifact_io import (
    FORMAT_VERSION, decode_sections, encode_sections, prefixed, read_artifact, unprefixed, write_artifact,
)
from pipeline_errors import FormatError, VersionMismatchError


@pytest.fixture
def sections():
    return {
        "meta": {"kind": "gbdt", "n_trees": 3, "names": ["a", "b"]},
        "weights": np.array([[0.1, -0.0], [np.finfo(float).tiny, 1e300]]),
        "feature": np.array([0, -1, 2], dtype=np.int64),
        "empty": np.zeros((0, 4)),
    }


def test_floats_survive_bit_for_bit(sections):
    restored = decode_sections(encode_sections(sections))
    assert list(restored) == list(sections)
    assert restored["weights"].tobytes() == sections["weights"].tobytes()
    assert np.signbit(restored["weights"][0, 1])
    np.testing.assert_array_equal(restored["feature"], sections["feature"])
    assert restored["empty"].shape == (0, 4)
    assert restored["meta"] == sections["meta"]


def test_encoding_is_stable(sections):
    assert encode_sections(sections) == encode_sections(dict(sections))


def test_bad_magic():
    with pytest.raises(FormatError) as excinfo:
        decode_sections(b"PFE1" + bytes(6))
    assert excinfo.value.offset == 0


def test_version_mismatch_names_both_versions(sections):
    with pytest.raises(VersionMismatchError) as excinfo:
        decode_sections(encode_sections(sections, version=FORMAT_VERSION + 1))
    assert excinfo.value.found == FORMAT_VERSION + 1
    assert excinfo.value.expected == FORMAT_VERSION
    assert f"version {FORMAT_VERSION + 1}" in str(excinfo.value)


@pytest.mark.parametrize("cut", [3, 8, 11, 25, -1])
def test_truncation_is_reported(sections, cut):
    with pytest.raises(FormatError, match="truncated"):
        decode_sections(encode_sections(sections)[:cut])


def test_unknown_kind_is_rejected():
    blob = b"PFA1" + struct.pack("<HI", FORMAT_VERSION, 1) + struct.pack("<H", 1) + b"x" + struct.pack("<BQ", 9, 0)
    with pytest.raises(FormatError, match="unknown kind"):
        decode_sections(blob)


def test_atomic_write_leaves_no_temporaries(sections, tmp_path):
    path = tmp_path / "nested" / "model.pfa"
    write_artifact(path, sections)
    write_artifact(path, {"meta": {"kind": "ridge"}})
    assert [p.name for p in path.parent.iterdir()] == ["model.pfa"]
    assert read_artifact(path) == {"meta": {"kind": "ridge"}}


def test_prefixes_namespace_sections():
    inner = {"meta": {"k": 1}, "values": np.ones(2)}
    outer = {**prefixed("fold0", inner), **prefixed("fold1", {"meta": {"k": 2}})}
    assert sorted(outer) == ["fold0/meta", "fold0/values", "fold1/meta"]
    assert unprefixed("fold1", outer) == {"meta": {"k": 2}}
    assert list(unprefixed("fold0", outer)) == ["meta", "values"]
