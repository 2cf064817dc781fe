"""Versioned binary artifacts made of named, length-prefixed sections.

Layout (little-endian throughout):

    magic "PFA1" | u16 format version | u32 section count
    per section: u16 name length | name (UTF-8) | u8 kind | u64 payload length | payload

Kinds: 1 = float64 array, 2 = int64 array (payload: u8 ndim, ndim x u64 shape,
raw values), 3 = JSON text with sorted keys. Floats are stored as raw 64-bit
values, so a write/read cycle is bit-exact.
"""

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from pipeline_errors import FormatError, VersionMismatchError

ARTIFACT_MAGIC = b"PFA1"
FORMAT_VERSION = 1

KIND_FLOAT = 1
KIND_INT = 2
KIND_JSON = 3


def _encode_array(array, dtype):
    array = np.ascontiguousarray(array, dtype=dtype)
    header = struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + array.tobytes()


def _encode(value):
    if isinstance(value, np.ndarray):
        if value.dtype.kind == "f":
            return KIND_FLOAT, _encode_array(value, "<f8")
        if value.dtype.kind in "iub":
            return KIND_INT, _encode_array(value, "<i8")
        raise TypeError(f"cannot store array of dtype {value.dtype}")
    text = json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return KIND_JSON, text.encode("utf-8")


def encode_sections(sections, version=FORMAT_VERSION):
    """Serialise an ordered mapping name -> array or JSON-compatible value."""
    parts = [ARTIFACT_MAGIC, struct.pack("<HI", version, len(sections))]
    for name, value in sections.items():
        encoded_name = name.encode("utf-8")
        kind, payload = _encode(value)
        parts.append(struct.pack("<H", len(encoded_name)))
        parts.append(encoded_name)
        parts.append(struct.pack("<BQ", kind, len(payload)))
        parts.append(payload)
    return b"".join(parts)


def decode_sections(buffer, expected_version=FORMAT_VERSION):
    offset = 0

    def take(size, what):
        nonlocal offset
        if offset + size > len(buffer):
            raise FormatError(offset, f"truncated artifact while reading {what}")
        chunk = buffer[offset:offset + size]
        offset += size
        return chunk

    if take(4, "magic") != ARTIFACT_MAGIC:
        raise FormatError(0, "not a model artifact (bad magic)")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != expected_version:
        raise VersionMismatchError(version, expected_version)
    sections = {}
    for _ in range(count):
        (name_length,) = struct.unpack("<H", take(2, "section name length"))
        name = take(name_length, "section name").decode("utf-8")
        kind, length = struct.unpack("<BQ", take(9, f"section {name} header"))
        payload_start = offset
        payload = take(length, f"section {name}")
        if kind == KIND_JSON:
            sections[name] = json.loads(payload.decode("utf-8"))
        elif kind in (KIND_FLOAT, KIND_INT):
            ndim = payload[0]
            shape = struct.unpack(f"<{ndim}Q", payload[1:1 + 8 * ndim])
            dtype = "<f8" if kind == KIND_FLOAT else "<i8"
            values = np.frombuffer(payload[1 + 8 * ndim:], dtype=dtype)
            if values.size != int(np.prod(shape, dtype=np.int64)):
                raise FormatError(payload_start, f"section {name}: payload does not match shape {shape}")
            sections[name] = values.reshape(shape).copy()
        else:
            raise FormatError(payload_start - 9, f"section {name}: unknown kind {kind}")
    return sections


def atomic_write_bytes(path, data):
    """Write to a temporary sibling then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_artifact(path, sections):
    atomic_write_bytes(path, encode_sections(sections))


def read_artifact(path):
    return decode_sections(Path(path).read_bytes())


def prefixed(prefix, sections):
    """Namespace a section mapping under `prefix/`."""
    return {f"{prefix}/{name}": value for name, value in sections.items()}


def unprefixed(prefix, sections):
    head = f"{prefix}/"
    return {name[len(head):]: value for name, value in sections.items() if name.startswith(head)}
