"""Binary checkpoint format.

Layout (little-endian)::

    b"R2RP"  u32 version=1  u32 tensor_count
    tensor_count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 dim, f32 payload }
    u32 crc32 of every byte between the header and the checksum

The model/optimizer configuration travels as a rank-1 tensor named
``__meta__`` whose elements are the bytes of a JSON document.  Optimizer
moments are stored as ``optim.m.<param>`` / ``optim.v.<param>``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import Model, ModelConfig
from .training import OptimState

MAGIC = b"R2RP"
VERSION = 1
META = "__meta__"


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    body = bytearray()
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    head = MAGIC + struct.pack("<II", VERSION, len(tensors))
    return head + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 12:
        raise FormatError(f"checkpoint truncated: {len(blob)} bytes, header needs 12 (offset 0)")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at offset 0, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if count == 0:
        raise FormatError("empty tensor table at offset 8")
    if len(blob) < 16:
        raise FormatError(f"checkpoint truncated at offset {len(blob)}")
    body_end = len(blob) - 4
    (crc,) = struct.unpack_from("<I", blob, body_end)
    if zlib.crc32(blob[12:body_end]) != crc:
        raise FormatError(f"CRC mismatch over payload region at offset {body_end}")
    out: dict[str, np.ndarray] = {}
    pos = 12

    def need(n: int, what: str):
        if pos + n > body_end:
            raise FormatError(f"truncated {what} at offset {pos}")

    for _ in range(count):
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(nlen + 1, "name")
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        rank = blob[pos]
        pos += 1
        need(4 * rank, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(nbytes, f"payload of {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
        pos += nbytes
    if pos != body_end:
        raise FormatError(f"{body_end - pos} trailing bytes after tensor table at offset {pos}")
    return out


def save_checkpoint(model: Model, state: OptimState | None, path) -> None:
    meta = {"model": model.config.to_dict()}
    tensors: dict[str, np.ndarray] = {}
    if state is not None:
        meta["optim"] = {**state.hyperparameters(), "step": state.step}
    tensors[META] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    for name, p in model.parameters().items():
        tensors[name] = p.data
    if state is not None:
        for name in model.parameters():
            if name in state.m:
                tensors[f"optim.m.{name}"] = state.m[name]
                tensors[f"optim.v.{name}"] = state.v[name]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_tensors(tensors))


def load_checkpoint(path) -> tuple[Model, OptimState]:
    tensors = decode_tensors(Path(path).read_bytes())
    if META not in tensors:
        raise FormatError(f"{path}: missing {META} record")
    meta = json.loads(tensors[META].astype(np.uint8).tobytes().decode("utf-8"))
    model = Model(ModelConfig.from_dict(meta["model"]))
    for name, p in model.parameters().items():
        if name not in tensors:
            raise FormatError(f"{path}: parameter {name!r} missing")
        arr = tensors[name]
        if arr.shape != p.shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {arr.shape}, expected {p.shape}")
        p.data = arr.astype(np.float64)
    optim = dict(meta.get("optim", {}))
    step = int(optim.pop("step", 0))
    state = OptimState(**optim, step=step)
    for name in model.parameters():
        if f"optim.m.{name}" in tensors:
            state.m[name] = tensors[f"optim.m.{name}"].astype(np.float64)
            state.v[name] = tensors[f"optim.v.{name}"].astype(np.float64)
    return model, state


def checkpoint_crc(path) -> int:
    blob = Path(path).read_bytes()
    return struct.unpack_from("<I", blob, len(blob) - 4)[0]


