"""TensorFile binary format, checkpoints, and atomic file writes.

TensorFile layout (little-endian)::

    b"QTEN" | version u32 | dtype u32 (1 = f32, 2 = f64) | ndim u32 | ndim x u64 dims | payload

A checkpoint is a directory holding ``manifest.json`` plus one TensorFile per
parameter, buffer, and optimizer slot under ``tensors/``.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"QTEN"
FORMAT_VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
MANIFEST_SCHEMA = 1


class FormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<III", FORMAT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise FormatError("not a TensorFile (bad magic)")
    version, code, ndim = struct.unpack_from("<III", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported TensorFile version {version}")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 16 + 8 * ndim
    if len(buf) < off:
        raise FormatError("truncated TensorFile header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 16)
    dtype = DTYPES[code]
    expected = dtype.itemsize * int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != expected:
        raise FormatError(f"payload is {len(buf) - off} bytes, expected {expected}")
    return np.frombuffer(buf, dtype=dtype, offset=off).reshape(dims).astype(dtype.newbyteorder("="))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_tensor(path, arr: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def tensor_filename(name: str) -> str:
    return name.replace("/", "_") + ".qten"


def save_checkpoint_dir(path, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a checkpoint directory atomically (build aside, then rename into place)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}.tmp-"))
    try:
        (tmp / "tensors").mkdir()
        index = {}
        for name, arr in tensors.items():
            fname = tensor_filename(name)
            (tmp / "tensors" / fname).write_bytes(encode_tensor(arr))
            index[name] = fname
        manifest = {"schema": MANIFEST_SCHEMA, **manifest, "tensors": index}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        old = None
        if path.exists():
            old = path.with_name(f".{path.name}.old-{os.getpid()}")
            os.replace(path, old)
        os.replace(tmp, path)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_checkpoint_dir(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: no manifest.json") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt manifest ({e})") from None
    if not isinstance(manifest, dict) or manifest.get("schema") != MANIFEST_SCHEMA:
        raise FormatError(f"{path}: unsupported manifest schema {manifest.get('schema') if isinstance(manifest, dict) else None!r}")
    tensors = {}
    for name, fname in manifest.get("tensors", {}).items():
        try:
            tensors[name] = read_tensor(path / "tensors" / fname)
        except FileNotFoundError:
            raise FormatError(f"{path}: missing tensor file {fname}") from None
    return manifest, tensors
