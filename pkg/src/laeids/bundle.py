"""Deployable model bundle: every tier for every mask, plus scaler and schema digest.

On disk the bundle is a small binary container::

    b"LAEB" | uint32 version | uint64 header length | header JSON | array blobs

The header lists each array's name, dtype, shape and offset into the blob
section. Arrays are stored little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from laeids.classify import ClassifierModel, Tier
from laeids.imaging import ImageConfig, ScalerStats

BUNDLE_MAGIC = b"LAEB"
BUNDLE_VERSION = 1
_HEAD = struct.Struct("<4sIQ")


def pack_container(meta: dict, arrays: dict, magic: bytes = BUNDLE_MAGIC, version: int = BUNDLE_VERSION) -> bytes:
    index, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        index.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True).encode()
    return _HEAD.pack(magic, version, len(header)) + header + b"".join(blobs)


def unpack_container(blob: bytes, magic: bytes = BUNDLE_MAGIC):
    m, version, hlen = _HEAD.unpack_from(blob)
    if m != magic:
        raise ValueError(f"bad magic {m!r}")
    if version != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {version}")
    header = json.loads(blob[_HEAD.size:_HEAD.size + hlen])
    base = _HEAD.size + hlen
    arrays = {}
    for e in header["arrays"]:
        a = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=base + e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(a.dtype.newbyteorder("="))
    return header["meta"], arrays


@dataclass
class ModelBundle:
    pool: dict  # mask bits -> {Tier: ClassifierModel}
    default_mask: str
    scaler: Optional[ScalerStats]
    image_cfg: ImageConfig
    schema: dict
    schema_digest: str
    feature_mode: str = "concat"
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        arrays, models = {}, {}
        for bits, tiers in sorted(self.pool.items()):
            models[bits] = {}
            for tier, model in sorted(tiers.items(), key=lambda kv: kv[0].value):
                models[bits][tier.value] = model.meta()
                for name, a in model.to_arrays().items():
                    arrays[f"{bits}/{tier.value}/{name}"] = a
        meta = {
            "default_mask": self.default_mask,
            "scaler": self.scaler.to_dict() if self.scaler else None,
            "image": self.image_cfg.to_dict(),
            "schema": self.schema,
            "schema_digest": self.schema_digest,
            "feature_mode": self.feature_mode,
            "models": models,
            "extra": self.extra,
        }
        return pack_container(meta, arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelBundle":
        meta, arrays = unpack_container(blob)
        pool = {}
        for bits, tiers in meta["models"].items():
            pool[bits] = {}
            for tier, mmeta in tiers.items():
                prefix = f"{bits}/{tier}/"
                parts = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
                pool[bits][Tier(tier)] = ClassifierModel.from_parts(mmeta, parts)
        scaler = ScalerStats.from_dict(meta["scaler"]) if meta.get("scaler") else None
        return cls(pool, meta["default_mask"], scaler, ImageConfig.from_dict(meta["image"]), meta["schema"],
                   meta["schema_digest"], meta.get("feature_mode", "concat"), meta.get("extra", {}))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelBundle":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def describe(self) -> dict:
        out = {"schema": self.schema.get("name"), "schema_digest": self.schema_digest,
               "feature_mode": self.feature_mode, "default_mask": self.default_mask, "masks": {}}
        for bits, tiers in sorted(self.pool.items()):
            out["masks"][bits] = {
                t.value: {"kind": m.kind.value, "trees": len(m.trees), "nodes": sum(x.n_nodes for x in m.trees),
                          "inputs": m.n_inputs, "train_accuracy": m.train_accuracy, "digest": m.digest()}
                for t, m in sorted(tiers.items(), key=lambda kv: kv[0].value)
            }
        return out
