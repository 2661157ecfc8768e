"""Binary tensor files and parameter bundles.

Layout of a single tensor file::

    magic   4 bytes  "M2MT"
    version u32 LE   currently 1
    dtype   u8       0 = float32 (the only code)
    ndim    u8       1..5
    dims    ndim * u32 LE
    payload row-major float32 LE, 4 * prod(dims) bytes

Storage is float32, in-memory tensors are float64; a write/read roundtrip
preserves dims exactly and values to float32 precision.  A parameter bundle
is a directory of tensor files plus a ``manifest.json`` keyed by parameter
name.
"""

import json
import re
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadDtypeError,
    BadMagicError,
    BadVersionError,
    PayloadSizeError,
    ShapeError,
    TensorFileError,
)
from .tensor import MAX_RANK, Tensor

MAGIC = b"M2MT"
VERSION = 1
DTYPE_FLOAT32 = 0


def write_tensor(path, t):
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if not 1 <= data.ndim <= MAX_RANK:
        raise ShapeError(f"tensor files hold rank 1..{MAX_RANK}, got rank {data.ndim}")
    header = MAGIC + struct.pack("<IBB", VERSION, DTYPE_FLOAT32, data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 10:
        raise PayloadSizeError(f"{path}: truncated header")
    version, dtype, ndim = struct.unpack_from("<IBB", raw, 4)
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise BadDtypeError(f"{path}: unsupported dtype code {dtype}")
    if not 1 <= ndim <= MAX_RANK:
        raise TensorFileError(f"{path}: unsupported rank {ndim}")
    dims_end = 10 + 4 * ndim
    if len(raw) < dims_end:
        raise PayloadSizeError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", raw, 10)
    expected = 4 * int(np.prod(dims))
    payload = raw[dims_end:]
    if len(payload) != expected:
        raise PayloadSizeError(
            f"{path}: payload holds {len(payload)} bytes, dims {dims} need {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return Tensor(values.reshape(dims))


def _safe_name(name):
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def save_params(dirpath, params):
    """Write a name -> Tensor mapping as a bundle directory; returns its path."""
    bundle = Path(dirpath)
    bundle.mkdir(parents=True, exist_ok=True)
    entries = {}
    for idx, (name, t) in enumerate(params.items()):
        fname = f"{idx:04d}_{_safe_name(name)}.m2mt"
        write_tensor(bundle / fname, t)
        entries[name] = {"file": fname, "shape": list(t.shape)}
    manifest = {"format": "m2mt-bundle", "version": 1, "params": entries}
    with open(bundle / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return bundle


def load_params(dirpath):
    """Read a bundle back as trainable tensors keyed by parameter name."""
    bundle = Path(dirpath)
    try:
        with open(bundle / "manifest.json") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise TensorFileError(f"{bundle}: unreadable bundle manifest: {exc}") from exc
    if manifest.get("format") != "m2mt-bundle":
        raise TensorFileError(f"{bundle}: not a parameter bundle manifest")
    params = {}
    for name, entry in manifest["params"].items():
        t = read_tensor(bundle / entry["file"])
        if list(t.shape) != entry["shape"]:
            raise TensorFileError(
                f"{bundle}: {name} has shape {list(t.shape)}, manifest says {entry['shape']}"
            )
        params[name] = Tensor(t.data, requires_grad=True, name=name)
    return params
