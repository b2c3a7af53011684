"""Checkpoint container: resolved config, named tensors, optimizer and RNG state.

Layout (all integers little-endian):

    magic 'RSDN' | u32 version | u16 id-len | id hex | u64 header-len | header JSON
    u32 tensor-count | tensors... | u8 optimizer-flag [| u64 step | u32 n | tensors...]

One tensor is: u16 name-len | name | u8 kind | u8 dtype | u8 ndim | u32*ndim | payload.
The header JSON holds the resolved config, epoch and RNG state. Nothing
time-dependent is written, so saving the same state twice gives identical
bytes. The id is a hash over config, epoch and model tensors; loading
recomputes and verifies it.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .config import config_digest_bytes
from .errors import ConfigError, ProtocolError
from .layers import ModelGraph

MAGIC = b"RSDN"
VERSION = 1

KIND_PARAM = 0
KIND_BUFFER = 1
KIND_OPT = 2

_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_TO_DTYPE = {0: "<f4", 1: "<f8"}


def _le_bytes(arr: np.ndarray) -> bytes:
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise ConfigError(f"cannot serialize dtype {arr.dtype}")
    return np.ascontiguousarray(arr).astype(_CODE_TO_DTYPE[code], copy=False).tobytes()


def _write_tensor(fh, name: str, kind: int, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise ConfigError(f"cannot serialize {name!r} with dtype {arr.dtype}")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BBB", kind, code, arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(_le_bytes(arr))


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ProtocolError(f"truncated checkpoint while reading {what}")
    return data


def _read_tensor(fh) -> Tuple[str, int, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
    name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
    kind, code, ndim = struct.unpack("<BBB", _read_exact(fh, 3, "tensor header"))
    if code not in _CODE_TO_DTYPE:
        raise ProtocolError(f"tensor {name!r} has unknown dtype code {code}")
    shape = tuple(
        struct.unpack("<I", _read_exact(fh, 4, "tensor dims"))[0] for _ in range(ndim)
    )
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    dt = np.dtype(_CODE_TO_DTYPE[code])
    payload = _read_exact(fh, count * dt.itemsize, f"tensor {name!r} payload")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return name, kind, arr


def compute_checkpoint_id(config: dict, epoch: int,
                          arrays: "Dict[str, Tuple[int, np.ndarray]]") -> str:
    h = hashlib.sha256()
    h.update(config_digest_bytes(config))
    h.update(struct.pack("<q", epoch))
    for name, (kind, arr) in arrays.items():
        h.update(name.encode("utf-8"))
        h.update(struct.pack("<B", kind))
        h.update(_le_bytes(arr))
    return h.hexdigest()[:16]


@dataclass
class CheckpointData:
    config: dict
    epoch: int
    rng_state: dict
    arrays: "Dict[str, Tuple[int, np.ndarray]]"
    optimizer: Optional[Tuple[int, Dict[str, Tuple[np.ndarray, np.ndarray]]]]
    id: str

    def model_arrays(self) -> Dict[str, np.ndarray]:
        return {name: arr for name, (kind, arr) in self.arrays.items()}


def save_checkpoint(path: str, config: dict, model: ModelGraph, epoch: int = 0,
                    rng_state: Optional[dict] = None, optimizer=None) -> str:
    """Write the model (and optional optimizer) to path; returns the checkpoint id.

    Output paths are dropped from the embedded config: where results were
    written has no bearing on what the model is, and keeping them out makes
    runs that differ only in destination produce identical files.
    """
    config = {k: v for k, v in config.items() if k != "output"}
    arrays = model.export_arrays()
    ckpt_id = compute_checkpoint_id(config, epoch, arrays)
    header = json.dumps(
        {"config": config, "epoch": int(epoch), "rng_state": rng_state or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        idb = ckpt_id.encode("ascii")
        fh.write(struct.pack("<H", len(idb)))
        fh.write(idb)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(arrays)))
        for name, (kind, arr) in arrays.items():
            _write_tensor(fh, name, kind, arr)
        if optimizer is None:
            fh.write(struct.pack("<B", 0))
        else:
            step, slots = optimizer.export_state()
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", step))
            fh.write(struct.pack("<I", len(slots)))
            for name, (m, v) in slots.items():
                _write_tensor(fh, name + ".m", KIND_OPT, m)
                _write_tensor(fh, name + ".v", KIND_OPT, v)
    os.replace(tmp, path)
    return ckpt_id


def load_checkpoint(path: str) -> CheckpointData:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise ProtocolError(f"cannot read checkpoint {path}: {e}") from e
    with fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise ProtocolError(f"{path} is not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise ProtocolError(f"unsupported checkpoint version {version}")
        (id_len,) = struct.unpack("<H", _read_exact(fh, 2, "id length"))
        stored_id = _read_exact(fh, id_len, "id").decode("ascii")
        (hdr_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, hdr_len, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ProtocolError(f"corrupt checkpoint header: {e}") from e
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        arrays: Dict[str, Tuple[int, np.ndarray]] = {}
        for _ in range(n_tensors):
            name, kind, arr = _read_tensor(fh)
            if name in arrays:
                raise ProtocolError(f"duplicate tensor {name!r} in checkpoint")
            arrays[name] = (kind, arr)
        (opt_flag,) = struct.unpack("<B", _read_exact(fh, 1, "optimizer flag"))
        optimizer = None
        if opt_flag == 1:
            (step,) = struct.unpack("<Q", _read_exact(fh, 8, "optimizer step"))
            (n_slots,) = struct.unpack("<I", _read_exact(fh, 4, "optimizer count"))
            slots: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
            for _ in range(n_slots):
                mname, _, m = _read_tensor(fh)
                vname, _, v = _read_tensor(fh)
                if not (mname.endswith(".m") and vname.endswith(".v")
                        and mname[:-2] == vname[:-2]):
                    raise ProtocolError("malformed optimizer slot pair")
                slots[mname[:-2]] = (m, v)
            optimizer = (step, slots)
        elif opt_flag != 0:
            raise ProtocolError(f"unknown optimizer flag {opt_flag}")
        if fh.read(1):
            raise ProtocolError("trailing bytes after checkpoint payload")

    config = header.get("config")
    epoch = int(header.get("epoch", 0))
    if not isinstance(config, dict):
        raise ProtocolError("checkpoint header is missing the resolved config")
    expect = compute_checkpoint_id(config, epoch, arrays)
    if expect != stored_id:
        raise ProtocolError(
            f"checkpoint id mismatch: header says {stored_id}, contents hash to {expect}"
        )
    return CheckpointData(config=config, epoch=epoch,
                          rng_state=header.get("rng_state", {}), arrays=arrays,
                          optimizer=optimizer, id=stored_id)


def build_model_from_arch(arch: dict, seed: int = 0, dtype=np.float32):
    """Construct an untrained model from a resolved architecture dict."""
    from . import expression, fusion, residen_net

    kind = arch.get("kind")
    if kind == "residen":
        return residen_net.build_residen(residen_net.config_from_dict(arch),
                                         seed=seed, dtype=dtype)
    if kind == "expr_cnn":
        return expression.build_expr_cnn(expression.config_from_dict(arch),
                                         seed=seed, dtype=dtype)
    if kind == "fusion":
        arch = dict(arch)
        image_arch = arch.pop("image", None)
        expr_arch = arch.pop("expr", None)
        if image_arch is None or expr_arch is None:
            raise ConfigError(
                "a fusion architecture needs both branch architectures "
                "('image' and 'expr') to build a model"
            )
        fcfg = fusion.config_from_dict(arch)
        icfg = residen_net.config_from_dict(image_arch)
        expr_model = build_model_from_arch(expr_arch, seed=seed, dtype=dtype)
        extractor = expression.ExpressionExtractor(expr_model)
        return fusion.build_fusion(fcfg, icfg, extractor, seed=seed, dtype=dtype)
    raise ConfigError(f"unknown architecture kind {kind!r}")


def model_from_checkpoint(ckpt: CheckpointData, dtype=np.float32):
    """Rebuild the model a checkpoint describes and load its weights."""
    arch = ckpt.config.get("architecture")
    if not isinstance(arch, dict):
        raise ProtocolError("checkpoint config has no architecture section")
    model = build_model_from_arch(arch, seed=int(ckpt.config.get("seed", 0)),
                                  dtype=dtype)
    model.import_arrays(ckpt.model_arrays())
    return model
