"""Binary envelopes for component packages, full models and datasets.

Layout (all integers little-endian)::

    magic      7 bytes   b"SMCPKG1" | b"SMCMDL1" | b"SMCDAT1"
    version    1 byte    0x01
    meta_len   4 bytes   uint32
    metadata   meta_len  canonical JSON (sorted keys, no whitespace), UTF-8
    blob       ...       float32 tensors, concatenated in directory order
    crc32      4 bytes   CRC-32 (poly 0xEDB88320) of every preceding byte

The metadata carries a ``tensors`` directory of ``{name, role, shape, offset,
length}`` entries with byte offsets and byte lengths into the blob.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path
from typing import Any

import numpy as np

from smckit.errors import CorruptPackage, InvalidInput, UnknownFormat

PKG_MAGIC = b"SMCPKG1"
MDL_MAGIC = b"SMCMDL1"
DAT_MAGIC = b"SMCDAT1"
MAGICS = (PKG_MAGIC, MDL_MAGIC, DAT_MAGIC)
VERSION = 1
HEADER_SIZE = len(PKG_MAGIC) + 1 + 4
CRC_SIZE = 4
_WIRE = np.dtype("<f4")


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def to_wire(a: np.ndarray) -> np.ndarray:
    """Round to 32-bit wire precision and back."""
    return np.asarray(a, dtype=np.float64).astype(_WIRE).astype(np.float64)


def round_tensors(tensors: dict[str, dict[str, np.ndarray]]) -> dict[str, dict[str, np.ndarray]]:
    return {n: {r: to_wire(t) for r, t in p.items()} for n, p in tensors.items()}


def model_checksum(graph) -> str:
    """SHA-256 of a graph's architecture and 32-bit-rounded parameters.

    The trainable mask is excluded, so a frozen copy and a decoded copy of the
    same model hash identically.
    """
    h = hashlib.sha256()
    h.update(canonical_json({"input_shape": list(graph.input_shape), "layers": [l.spec() for l in graph.layers]}))
    for layer in graph.layers:
        for role in sorted(graph.params.get(layer.name, {})):
            h.update(np.ascontiguousarray(graph.params[layer.name][role], dtype=np.float64).astype(_WIRE).tobytes())
    return h.hexdigest()


def encode_envelope(magic: bytes, metadata: dict[str, Any], tensors: dict[str, dict[str, np.ndarray]]) -> bytes:
    if magic not in MAGICS:
        raise InvalidInput(f"unknown magic {magic!r}")
    directory, chunks, offset = [], [], 0
    for name in sorted(tensors):
        for role in sorted(tensors[name]):
            t = np.asarray(tensors[name][role], dtype=np.float64)
            if not np.all(np.isfinite(t)):
                raise InvalidInput(f"tensor {name}.{role} has non-finite values")
            raw = np.ascontiguousarray(t).astype(_WIRE).tobytes()
            directory.append({"name": name, "role": role, "shape": list(t.shape), "offset": offset, "length": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    if "tensors" in metadata:
        raise InvalidInput("metadata key 'tensors' is reserved for the directory")
    meta = canonical_json({**metadata, "tensors": directory})
    body = magic + bytes([VERSION]) + struct.pack("<I", len(meta)) + meta + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_envelope(data: bytes) -> tuple[bytes, dict[str, Any], dict[str, dict[str, np.ndarray]]]:
    data = bytes(data)
    magic = data[: len(PKG_MAGIC)]
    if len(data) < len(PKG_MAGIC) or magic not in MAGICS:
        raise UnknownFormat("not an SMC envelope")
    if len(data) < HEADER_SIZE + CRC_SIZE:
        raise CorruptPackage("truncated envelope")
    body, crc = data[:-CRC_SIZE], struct.unpack("<I", data[-CRC_SIZE:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptPackage("CRC mismatch")
    if body[len(magic)] != VERSION:
        raise UnknownFormat(f"unsupported version {body[len(magic)]}")
    (meta_len,) = struct.unpack("<I", body[len(magic) + 1 : HEADER_SIZE])
    if HEADER_SIZE + meta_len > len(body):
        raise CorruptPackage("metadata length exceeds envelope")
    try:
        meta = json.loads(body[HEADER_SIZE : HEADER_SIZE + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptPackage(f"unreadable metadata: {e}") from None
    blob = body[HEADER_SIZE + meta_len :]
    tensors: dict[str, dict[str, np.ndarray]] = {}
    expected = 0
    for entry in meta.pop("tensors", []):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        if entry["offset"] != expected or entry["length"] != 4 * n or expected + entry["length"] > len(blob):
            raise CorruptPackage(f"bad directory entry for {entry['name']}.{entry['role']}")
        arr = np.frombuffer(blob, dtype=_WIRE, count=n, offset=expected).astype(np.float64).reshape(shape)
        tensors.setdefault(entry["name"], {})[entry["role"]] = arr
        expected += entry["length"]
    if expected != len(blob):
        raise CorruptPackage("blob length does not match directory")
    return magic, meta, tensors


def encode(obj) -> bytes:
    """Serialize a component payload, a model graph, an expanded model or a dataset."""
    from smckit.datagen import ShapeDataset
    from smckit.expandable import ExpandedModel, SmcPayload
    from smckit.model import ModelGraph

    if isinstance(obj, SmcPayload):
        return encode_envelope(PKG_MAGIC, obj.metadata, obj.tensors)
    if isinstance(obj, ModelGraph):
        return encode_envelope(MDL_MAGIC, {"structure": "sequential", "graph": obj.spec()}, obj.params)
    if isinstance(obj, ExpandedModel):
        meta = {
            "structure": "expanded",
            "base": obj.base.spec(),
            "split": obj.split.to_dict(),
            "kind": obj.kind.to_dict(),
            "phi_s_new": obj.phi_s_new.spec(),
            "head_new": obj.head_new.spec(),
            "lambda": float(obj.train_info.get("lambda", 0.0)),
            "beta": float(obj.train_info.get("beta", 0.0)),
        }
        tensors = {**obj.base.params, **obj.phi_s_new.params, **obj.head_new.params}
        return encode_envelope(MDL_MAGIC, meta, tensors)
    if isinstance(obj, ShapeDataset):
        meta = {"domain": obj.domain, "seed": int(obj.seed), "count": len(obj)}
        tensors = {
            "images": {"data": obj.images},
            "labels": {"data": obj.labels.astype(np.float64)},
            "masks": {"data": obj.masks.astype(np.float64)},
            "boxes": {"data": obj.boxes},
        }
        return encode_envelope(DAT_MAGIC, meta, tensors)
    raise InvalidInput(f"cannot encode {type(obj).__name__}")


def decode(data: bytes):
    """Inverse of :func:`encode`, at 32-bit precision."""
    from smckit.datagen import ShapeDataset
    from smckit.expandable import ExpandedModel, SmcKind, SmcPayload
    from smckit.model import ModelGraph
    from smckit.svcca import SplitPlan

    magic, meta, tensors = decode_envelope(data)
    try:
        if magic == PKG_MAGIC:
            return SmcPayload(meta, tensors)
        if magic == DAT_MAGIC:
            return ShapeDataset(
                tensors["images"]["data"],
                tensors["labels"]["data"].astype(np.int64),
                tensors["masks"]["data"].astype(bool),
                tensors["boxes"]["data"],
                meta["domain"],
                meta["seed"],
            )
        if meta.get("structure") == "sequential":
            return ModelGraph.from_spec(meta["graph"], tensors)
        base = ModelGraph.from_spec(meta["base"], tensors)
        em = ExpandedModel(
            base,
            SplitPlan.from_dict(meta["split"]),
            SmcKind.from_dict(meta["kind"]),
            ModelGraph.from_spec(meta["phi_s_new"], tensors),
            ModelGraph.from_spec(meta["head_new"], tensors),
        )
        em.train_info = {"lambda": meta["lambda"], "beta": meta["beta"]}
        return em
    except KeyError as e:
        raise CorruptPackage(f"envelope is missing {e}") from None


def save(path: str | Path, obj) -> int:
    data = encode(obj)
    Path(path).write_bytes(data)
    return len(data)


def load(path: str | Path):
    return decode(Path(path).read_bytes())
