"""Binary persistence: tensor checkpoints and latent sample files.

Checkpoint layout (all integers little-endian)::

    magic     8 bytes  b"LCDCKPT\\0"
    version   u32
    count     u32      number of tensors
    per tensor:
      name_len u32, name (utf-8), rank u32, dims u64 * rank, dtype u8, raw data
    trailer   32 bytes SHA-256 of every preceding byte

Metadata travels as a uint8 tensor named ``__meta__`` holding canonical JSON.

Latent files hold one ``[n, dim]`` array::

    magic b"LCDLATN\\0", version u32, dim u32, n u64, dtype u8, raw data

with a ``<file>.json`` sidecar describing how the samples were produced.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .denoiser import DenoiserModel, ModelConfig

CKPT_MAGIC = b"LCDCKPT\x00"
LATENT_MAGIC = b"LCDLATN\x00"
VERSION = 1
META_KEY = "__meta__"

DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<f4"), 4: np.dtype("u1")}
_CODE_OF = {(dt.kind, dt.itemsize): code for code, dt in DTYPE_CODES.items()}


class CheckpointError(IOError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _code(arr: np.ndarray) -> int:
    try:
        return _CODE_OF[(arr.dtype.kind, arr.dtype.itemsize)]
    except KeyError:
        raise CheckpointError(f"unsupported dtype {arr.dtype}") from None


def encode_tensors(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    items = dict(tensors)
    if meta is not None:
        items[META_KEY] = np.frombuffer(canonical_json(meta).encode(), dtype=np.uint8)
    parts = [CKPT_MAGIC, struct.pack("<II", VERSION, len(items))]
    for name in sorted(items):
        arr = np.asarray(items[name])
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
        key = name.encode()
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", code) + raw)
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_tensors(blob: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if len(blob) < len(CKPT_MAGIC) + 8 + 32 or blob[:8] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, trailer = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError("checkpoint content hash mismatch")
    version, count = struct.unpack_from("<II", body, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", body, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            (code,) = struct.unpack_from("<B", body, off)
            off += 1
            dt = DTYPE_CODES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
            off += nbytes
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint body")
    meta_arr = out.pop(META_KEY, None)
    meta = json.loads(meta_arr.tobytes().decode()) if meta_arr is not None else None
    return out, meta


def content_hash(blob: bytes) -> str:
    return blob[-32:].hex()


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> str:
    """Write atomically; returns the hex content hash (the trailer)."""
    blob = encode_tensors(tensors, meta)
    atomic_write(path, blob)
    return content_hash(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, str]:
    blob = Path(path).read_bytes()
    tensors, meta = decode_tensors(blob)
    return tensors, meta or {}, content_hash(blob)


def encode_latents(z: np.ndarray) -> bytes:
    z = np.atleast_2d(np.asarray(z))
    code = _code(z)
    header = LATENT_MAGIC + struct.pack("<IIQB", VERSION, z.shape[1], z.shape[0], code)
    return header + np.ascontiguousarray(z, dtype=DTYPE_CODES[code]).tobytes()


def decode_latents(blob: bytes) -> np.ndarray:
    hsize = len(LATENT_MAGIC) + struct.calcsize("<IIQB")
    if blob[:8] != LATENT_MAGIC or len(blob) < hsize:
        raise CheckpointError("not a latent file (bad magic)")
    version, dim, n, code = struct.unpack_from("<IIQB", blob, 8)
    if version != VERSION or code not in DTYPE_CODES:
        raise CheckpointError("unsupported latent file")
    dt = DTYPE_CODES[code]
    if len(blob) - hsize != dim * n * dt.itemsize:
        raise CheckpointError("latent file size does not match its header")
    return np.frombuffer(blob, dtype=dt, offset=hsize).reshape(n, dim).copy()


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_latents(path, z: np.ndarray, meta: dict) -> None:
    atomic_write(path, encode_latents(z))
    atomic_write(sidecar_path(path), canonical_json(meta).encode())


def load_latents(path) -> tuple[np.ndarray, dict]:
    z = decode_latents(Path(path).read_bytes())
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    return z, meta


def save_model(path, model, meta: dict | None = None) -> str:
    """Checkpoint a :class:`~lcdistill.denoiser.DenoiserModel`; returns the content hash."""
    full = {"schema": "denoiser", "T": model.T, "model": asdict(model.cfg)}
    full.update(meta or {})
    return save_checkpoint(path, model.params, full)


def load_model(path):
    """Returns ``(model, meta, content_hash)``."""
    tensors, meta, digest = load_checkpoint(path)
    if meta.get("schema") != "denoiser":
        raise CheckpointError(f"{path} does not hold a denoiser")
    try:
        model = DenoiserModel(ModelConfig(**meta["model"]), meta["T"], tensors)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, meta, digest
