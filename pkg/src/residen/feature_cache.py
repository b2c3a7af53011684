"""Binary cache of expression feature vectors keyed by sample id.

Layout: magic 'RSFC' | u32 version | u32 width | u64 count |
u16 ckpt-id-len | ckpt id | records (u16 id-len | id | width * f32 LE).
The source checkpoint id ties a cache to the extractor that produced it;
consumers must refuse a cache whose width or provenance is wrong.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Dict, Mapping

import numpy as np

from .errors import ProtocolError, UsageError

MAGIC = b"RSFC"
VERSION = 1


@dataclass
class FeatureCache:
    checkpoint_id: str
    width: int
    features: "Dict[str, np.ndarray]"

    def __len__(self) -> int:
        return len(self.features)

    def matrix(self, ids) -> np.ndarray:
        """[N, width] float32 rows in the order of ids; missing ids are protocol errors."""
        rows = []
        for sample_id in ids:
            vec = self.features.get(sample_id)
            if vec is None:
                raise ProtocolError(f"feature cache has no entry for sample {sample_id!r}")
            rows.append(vec)
        return np.stack(rows) if rows else np.zeros((0, self.width), dtype=np.float32)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ProtocolError(f"truncated feature cache while reading {what}")
    return data


def write_feature_cache(path: str, checkpoint_id: str,
                        features: Mapping[str, np.ndarray],
                        width: int = 0) -> None:
    items = list(features.items())
    if items:
        width = int(items[0][1].size) if not width else width
    elif not width:
        raise UsageError("an empty cache needs an explicit width")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", width))
        fh.write(struct.pack("<Q", len(items)))
        cid = checkpoint_id.encode("ascii")
        fh.write(struct.pack("<H", len(cid)))
        fh.write(cid)
        for sample_id, vec in items:
            arr = np.asarray(vec, dtype=np.float32).reshape(-1)
            if arr.size != width:
                raise UsageError(
                    f"feature for {sample_id!r} has width {arr.size}, cache is {width}"
                )
            sid = sample_id.encode("utf-8")
            fh.write(struct.pack("<H", len(sid)))
            fh.write(sid)
            fh.write(arr.astype("<f4", copy=False).tobytes())
    os.replace(tmp, path)


def read_feature_cache(path: str) -> FeatureCache:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise ProtocolError(f"cannot read feature cache {path}: {e}") from e
    with fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise ProtocolError(f"{path} is not a feature cache (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise ProtocolError(f"unsupported feature cache version {version}")
        (width,) = struct.unpack("<I", _read_exact(fh, 4, "width"))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "count"))
        (cid_len,) = struct.unpack("<H", _read_exact(fh, 2, "checkpoint id length"))
        checkpoint_id = _read_exact(fh, cid_len, "checkpoint id").decode("ascii")
        features: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (sid_len,) = struct.unpack("<H", _read_exact(fh, 2, "sample id length"))
            sid = _read_exact(fh, sid_len, "sample id").decode("utf-8")
            if sid in features:
                raise ProtocolError(f"duplicate sample id {sid!r} in feature cache")
            payload = _read_exact(fh, width * 4, f"features for {sid!r}")
            features[sid] = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        if fh.read(1):
            raise ProtocolError("trailing bytes after feature cache payload")
    return FeatureCache(checkpoint_id=checkpoint_id, width=width, features=features)
