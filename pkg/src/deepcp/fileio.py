"""Binary file formats for fields, masks and named-tensor checkpoints.

Every file is ``MAGIC (16 bytes) | header length (uint64 LE) | JSON header |
payload``.  The JSON header is written with sorted keys so identical
content gives identical bytes.
"""

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError
from .kspace import SamplingMask

FIELD_MAGIC = b"DEEPCP-FIELD\x00v1\x00"
MASK_MAGIC = b"DEEPCP-MASK\x00\x00v1\x00"
TENSORS_MAGIC = b"DEEPCP-TENSORSv1"
assert len(FIELD_MAGIC) == len(MASK_MAGIC) == len(TENSORS_MAGIC) == 16

_LEN = struct.Struct("<Q")


def atomic_write_bytes(path, data):
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    dirname = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(magic, header, payload):
    head = json.dumps(header, sort_keys=True).encode()
    return magic + _LEN.pack(len(head)) + head + payload


def _unpack(data, magic, path):
    if len(data) < 24 or data[:16] != magic:
        raise FormatError(f"{path}: bad magic")
    (n,) = _LEN.unpack_from(data, 16)
    if 24 + n > len(data):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[24:24 + n])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed JSON header ({exc})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not an object")
    return header, data[24 + n:]


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def _dims(header, path):
    try:
        h, w = int(header["height"]), int(header["width"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{path}: header lacks height/width") from None
    if h <= 0 or w <= 0:
        raise FormatError(f"{path}: non-positive dimensions {h}x{w}")
    return h, w


def field_to_bytes(x):
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim != 2:
        raise ValueError(f"field must be 2-D, got {x.shape}")
    header = {"height": x.shape[0], "width": x.shape[1], "dtype": "c128"}
    return _pack(FIELD_MAGIC, header, x.astype("<c16").tobytes(order="C"))


def save_field(path, x):
    atomic_write_bytes(path, field_to_bytes(x))


def load_field(path):
    header, payload = _unpack(_read(path), FIELD_MAGIC, path)
    h, w = _dims(header, path)
    if header.get("dtype") != "c128":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    if len(payload) != h * w * 16:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {h * w * 16}")
    return np.frombuffer(payload, dtype="<c16").reshape(h, w).astype(np.complex128)


def mask_to_bytes(m):
    header = {
        "height": m.height, "width": m.width, "dtype": "bool8",
        "target_R": m.target_R, "calib_radius": m.calib_radius, "seed": m.seed,
        "min_distance": m.min_distance,
    }
    return _pack(MASK_MAGIC, header, m.kept.astype(np.uint8).tobytes(order="C"))


def save_mask(path, m):
    atomic_write_bytes(path, mask_to_bytes(m))


def load_mask(path):
    header, payload = _unpack(_read(path), MASK_MAGIC, path)
    h, w = _dims(header, path)
    if header.get("dtype") != "bool8" or len(payload) != h * w:
        raise FormatError(f"{path}: bad mask payload")
    raw = np.frombuffer(payload, dtype=np.uint8)
    if raw.max(initial=0) > 1:
        raise FormatError(f"{path}: mask bytes must be 0 or 1")
    try:
        return SamplingMask(
            raw.reshape(h, w).astype(bool),
            target_R=float(header["target_R"]),
            calib_radius=float(header["calib_radius"]),
            seed=int(header["seed"]),
            min_distance=float(header.get("min_distance", 0.0)),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None


def tensors_to_bytes(tensors, manifest=None):
    """Serialize an ordered mapping of real arrays as little-endian doubles."""
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = arr.astype("<f8").tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"manifest": manifest or {}, "tensors": entries}
    return _pack(TENSORS_MAGIC, header, b"".join(chunks))


def save_tensors(path, tensors, manifest=None):
    atomic_write_bytes(path, tensors_to_bytes(tensors, manifest))


def load_tensors(path):
    """Return ``(tensors, manifest)``; tensors keep their on-disk order."""
    header, payload = _unpack(_read(path), TENSORS_MAGIC, path)
    tensors = {}
    try:
        for e in header["tensors"]:
            shape = tuple(int(s) for s in e["shape"])
            start, nbytes = int(e["offset"]), int(e["nbytes"])
            if start + nbytes > len(payload) or nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
                raise FormatError(f"{path}: tensor {e['name']!r} out of bounds")
            arr = np.frombuffer(payload[start:start + nbytes], dtype="<f8").reshape(shape)
            tensors[e["name"]] = arr.astype(np.float64)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed tensor table ({exc})") from None
    return tensors, header.get("manifest", {})
