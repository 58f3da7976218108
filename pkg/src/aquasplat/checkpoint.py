"""Versioned little-endian binary checkpoints.

Layout::

    magic "AQSPLAT\\0" | u32 version | u64 header length | header JSON (utf-8)
    u32 array count | per array: u16 name length, name, u8 dtype code, u8 ndim,
                      ndim x u64 shape, raw little-endian data
    end magic "AQSPEND\\0" | u32 CRC32 of everything before it
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .gaussian import GaussianCloud
from .medium import MediumParams
from .optim import GradStats, OptimizerState

MAGIC = b"AQSPLAT\0"
END_MAGIC = b"AQSPEND\0"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("|b1")}
_CODES = {np.dtype("float64"): 0, np.dtype("int64"): 1, np.dtype("bool"): 2}
_CLOUD_FIELDS = ("positions", "log_scales", "rotations", "sh_coeffs", "opacity_logits", "semantic_features")


@dataclass
class Checkpoint:
    cloud: GaussianCloud
    medium: MediumParams
    optimizer: OptimizerState
    grad_stats: GradStats
    iteration: int = 0  # number of completed iterations
    log_gamma: float = 0.0
    projector_seed: int = 0
    config: dict = field(default_factory=dict)


def encode_arrays(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<IQ", VERSION, len(head)), head, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"array '{name}' has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(out) + END_MAGIC
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_arrays(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, head_len = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    try:
        header = json.loads(r.take(head_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header is corrupt: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="replace")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"array '{name}' has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.take(len(END_MAGIC)) != END_MAGIC:
        raise CheckpointError("checkpoint is corrupt (missing end marker)")
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(data[:body_end]):
        raise CheckpointError("checkpoint is corrupt (checksum mismatch)")
    if r.pos != len(data):
        raise CheckpointError("checkpoint has trailing bytes")
    return header, arrays


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    arrays = {f"cloud/{f}": getattr(ck.cloud, f) for f in _CLOUD_FIELDS}
    arrays["medium"] = ck.medium.to_vector()
    for name, m in ck.optimizer.first_moment.items():
        arrays[f"adam_m/{name}"] = m
    for name, v in ck.optimizer.second_moment.items():
        arrays[f"adam_v/{name}"] = v
    arrays["grad_stats/accum"] = ck.grad_stats.accum
    arrays["grad_stats/count"] = ck.grad_stats.count
    header = {
        "iteration": int(ck.iteration),
        "log_gamma": float(ck.log_gamma).hex(),  # hex keeps every bit
        "projector_seed": int(ck.projector_seed),
        "step_count": int(ck.optimizer.step_count),
        "lrs": {k: float(v).hex() for k, v in ck.optimizer.lrs.items()},
        "config": ck.config,
    }
    return encode_arrays(header, arrays)


def save_checkpoint(path, ck: Checkpoint) -> None:
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    header, arrays = decode_arrays(data)
    try:
        cloud = GaussianCloud(**{f: arrays[f"cloud/{f}"] for f in _CLOUD_FIELDS})
        first = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_m/")}
        second = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_v/")}
        opt = OptimizerState(first, second, int(header["step_count"]), {k: float.fromhex(v) for k, v in header["lrs"].items()})
        return Checkpoint(
            cloud=cloud,
            medium=MediumParams.from_vector(arrays["medium"]),
            optimizer=opt,
            grad_stats=GradStats(arrays["grad_stats/accum"], arrays["grad_stats/count"]),
            iteration=int(header["iteration"]),
            log_gamma=float.fromhex(header["log_gamma"]),
            projector_seed=int(header["projector_seed"]),
            config=header["config"],
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing field {exc}") from None
