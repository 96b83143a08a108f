"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SMKD" | u32 version | u64 header length | UTF-8 JSON header | f32 array data

The header lists every array as ``{name, shape, offset}`` (offset in bytes
from the start of the data section) plus scalar state, the architecture and
its hash. JSON is written with sorted keys so identical models give
identical files.
"""

from __future__ import annotations

import json
import struct
import warnings
from pathlib import Path

import numpy as np

from .data import DataFormatError
from .head import CenterState, HeadConfig
from .tensor import Tensor
from .trainer import AdamState, ModelPair
from .vit import VitConfig

MAGIC = b"SMKD"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")


class CheckpointError(DataFormatError):
    """Malformed, mismatched or truncated checkpoint."""


class TruncatedCheckpointError(CheckpointError):
    def __init__(self, path, expected: int, actual: int):
        super().__init__(f"{path}: truncated checkpoint, expected {expected} bytes, found {actual}")
        self.expected = expected
        self.actual = actual


class HashMismatchWarning(UserWarning):
    pass


def _arrays(model: ModelPair) -> list[tuple[str, np.ndarray]]:
    out = [(f"student/{k}", v.data) for k, v in sorted(model.student.items())]
    out += [(f"teacher/{k}", v.data) for k, v in sorted(model.teacher.items())]
    out += [(f"ce/{k}", v.data) for k, v in sorted(model.ce_head.items())]
    out += [("center/cls", model.center_cls.center), ("center/patch", model.center_patch.center)]
    out += [(f"opt_m/{k}", v) for k, v in sorted(model.opt.m.items())]
    out += [(f"opt_v/{k}", v) for k, v in sorted(model.opt.v.items())]
    return out


def encode_checkpoint(model: ModelPair, config_hash: str) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in _arrays(model):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "arrays": entries,
        "state": {"step": model.step, "epoch": model.epoch, "stage": model.stage, "opt_t": model.opt.t},
        "arch": {"vit": model.vit.to_dict(), "head": model.head.to_dict()},
        "config_hash": config_hash,
        "data_bytes": offset,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def save_checkpoint(path, model: ModelPair, config_hash: str) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(model, config_hash))
    return path


def read_header(raw: bytes, path="<bytes>") -> tuple[dict, int]:
    if len(raw) < _PREAMBLE.size:
        raise TruncatedCheckpointError(path, _PREAMBLE.size, len(raw))
    magic, version, hlen = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (reader handles {VERSION})")
    start = _PREAMBLE.size + hlen
    if len(raw) < start:
        raise TruncatedCheckpointError(path, start, len(raw))
    try:
        header = json.loads(raw[_PREAMBLE.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    return header, start


def decode_checkpoint(raw: bytes, expected_hash: str | None = None, strict: bool = False, path="<bytes>") -> tuple[ModelPair, str]:
    """Rebuild a :class:`ModelPair`; returns it with the stored config hash.

    A hash different from ``expected_hash`` warns, or raises when ``strict``.
    """
    header, start = read_header(raw, path)
    expected_size = start + int(header["data_bytes"])
    if len(raw) < expected_size:
        raise TruncatedCheckpointError(path, expected_size, len(raw))
    if len(raw) > expected_size:
        raise CheckpointError(f"{path}: {len(raw) - expected_size} unexpected trailing bytes")
    stored = header["config_hash"]
    if expected_hash is not None and stored != expected_hash:
        msg = f"{path}: config hash {stored} does not match {expected_hash}"
        if strict:
            raise CheckpointError(msg)
        warnings.warn(msg, HashMismatchWarning, stacklevel=2)

    groups: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo = start + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=lo).reshape(shape).astype(np.float32)
        group, _, name = entry["name"].partition("/")
        groups.setdefault(group, {})[name] = arr

    state = header["state"]
    arch = header["arch"]
    model = ModelPair(
        vit=VitConfig(**arch["vit"]),
        head=HeadConfig(**arch["head"]),
        student={k: Tensor(v, requires_grad=True, name=k) for k, v in groups.get("student", {}).items()},
        teacher={k: Tensor(v, name=k) for k, v in groups.get("teacher", {}).items()},
        center_cls=CenterState(groups["center"]["cls"]),
        center_patch=CenterState(groups["center"]["patch"]),
        step=int(state["step"]),
        epoch=int(state["epoch"]),
        stage=str(state["stage"]),
        ce_head={k: Tensor(v, requires_grad=True, name=k) for k, v in groups.get("ce", {}).items()},
        opt=AdamState(m=groups.get("opt_m", {}), v=groups.get("opt_v", {}), t=int(state["opt_t"])),
    )
    return model, stored


def load_checkpoint(path, expected_hash: str | None = None, strict: bool = False) -> tuple[ModelPair, str]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), expected_hash, strict, path)
