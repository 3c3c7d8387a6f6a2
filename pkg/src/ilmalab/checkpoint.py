"""Binary tensor container used for model checkpoints and feature archives.

Layout (all integers little-endian)::

    b"ILMA"                      magic
    u32                          format version
    --- payload (covered by the CRC) ---
    u32 n, n bytes               UTF-8 JSON metadata (sorted keys)
    u32                          tensor count
    per tensor:
        u16 n, n bytes           UTF-8 name
        u32                      rank
        rank x u32               extents
        prod(extents) x f64      row-major values
    --- end payload ---
    u32                          CRC-32 of the payload
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Tensor
from .transducer import ModelConfig, Transducer

MAGIC = b"ILMA"
VERSION = 1


class CheckpointError(ValueError):
    pass


class IntegrityError(CheckpointError):
    """CRC mismatch or truncated payload."""


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray]


def encode(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes(order="C") handles strides; keeps 0-d shapes
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    payload = b"".join(parts)
    return MAGIC + struct.pack("<I", VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not an ILMA container (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise VersionError(f"unsupported container version {version} (expected {VERSION})")
    payload = blob[8:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != crc:
        raise IntegrityError("CRC-32 mismatch; file is corrupt")
    try:
        pos = 0
        (n,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        meta = json.loads(payload[pos : pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", payload, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) * 8
            tensors[name] = np.frombuffer(payload[pos : pos + size], dtype="<f8").reshape(shape).astype(np.float64)
            pos += size
    except (struct.error, ValueError, UnicodeDecodeError) as err:
        raise IntegrityError(f"malformed payload: {err}") from None
    if pos != len(payload):
        raise IntegrityError("trailing bytes after tensor table")
    return Checkpoint(meta, tensors)


def write_container(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(meta, tensors))


def read_container(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def save_checkpoint(model: Transducer, path: str | Path, **meta) -> None:
    """Write a transducer checkpoint; extra keyword args land in the metadata block."""
    header = {"kind": "transducer", "model": model.config.to_dict(), **meta}
    write_container(path, header, {k: v.data for k, v in model.params.items()})


def load_checkpoint(path: str | Path) -> Checkpoint:
    return read_container(path)


def load_model(path: str | Path) -> tuple[Transducer, dict]:
    ckpt = read_container(path)
    if ckpt.meta.get("kind") != "transducer":
        raise CheckpointError(f"{path} holds a {ckpt.meta.get('kind')!r}, not a transducer")
    config = ModelConfig(**ckpt.meta["model"])
    return Transducer(config, {k: Tensor(v, name=k) for k, v in ckpt.tensors.items()}), ckpt.meta


def save_external_lm(lm, path: str | Path, **meta) -> None:
    header = {"kind": "external_lm", "vocab_size": lm.vocab_size, **meta}
    write_container(path, header, {k: v.data for k, v in lm.params.items()})


def load_external_lm(path: str | Path):
    from .decoding import ExternalLM

    ckpt = read_container(path)
    if ckpt.meta.get("kind") != "external_lm":
        raise CheckpointError(f"{path} is not an external LM")
    return ExternalLM(ckpt.meta["vocab_size"], {k: Tensor(v, name=k) for k, v in ckpt.tensors.items()}), ckpt.meta


def save_features(path: str | Path, feats: dict[str, np.ndarray], **meta) -> None:
    write_container(path, {"kind": "features", **meta}, feats)


def load_features(path: str | Path) -> dict[str, np.ndarray]:
    ckpt = read_container(path)
    if ckpt.meta.get("kind") != "features":
        raise CheckpointError(f"{path} is not a feature archive")
    return ckpt.tensors
