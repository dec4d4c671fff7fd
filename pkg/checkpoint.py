"""
Binary checkpoint format.

    "IDFC" | version u32 | parameter count u32
    per parameter record:  name u16+utf8 | rank u8 | dims u32* | f64 LE values | crc32 u32
    momentum count u32, then momentum records in the same layout
    iteration u64 | prng state u64 | crc32 u32
    config length u32 | utf8 key=value text | crc32 u32

All integers are little-endian. Each record's CRC covers the record bytes
before it, so a flipped byte is reported against the record it hit.
"""
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from errors import (
    BadMagicError, CheckpointError, CorruptRecordError, ShapeError, TruncatedCheckpointError,
    VersionMismatchError,
)
from fusion_net import Model

logger = logging.getLogger(__name__)

MAGIC = b"IDFC"
VERSION = 1


@dataclass
class Checkpoint:
    parameters: Dict[str, np.ndarray]
    momentum: Dict[str, np.ndarray]
    iteration: int = 0
    prng_state: int = 0
    config_text: str = ""

    @classmethod
    def from_model(cls, model: Model, iteration: int = 0, prng_state: int = 0,
                   config_text: str = "") -> "Checkpoint":
        parameters, momentum = {}, {}
        for group_name, group in model.groups.items():
            for name, tensor in group.items():
                parameters[f"{group_name}.{name}"] = tensor.data.copy()
                momentum[f"{group_name}.{name}"] = group.momentum[name].copy()
        return cls(parameters, momentum, iteration, prng_state, config_text)

    def apply_to(self, model: Model):
        """Overwrite model parameters and momentum buffers in place"""
        expected = [name for name, _ in model.named_parameters()]
        missing = sorted(set(expected) - set(self.parameters))
        extra = sorted(set(self.parameters) - set(expected))
        if missing or extra:
            raise CheckpointError(f"checkpoint does not match model: missing {missing[:3]}, unexpected {extra[:3]}")
        for qualified in expected:
            group_name, name = qualified.split(".", 1)
            group = model.group(group_name)
            values = self.parameters[qualified]
            if values.shape != group[name].shape:
                raise ShapeError(f"checkpoint '{qualified}' has shape {values.shape}, model expects {group[name].shape}")
            group[name].data = values.astype(np.float64, copy=True)
            group[name].grad = None
            group.momentum[name] = self.momentum.get(qualified, np.zeros_like(values)).astype(np.float64, copy=True)


def _encode_record(name: str, values: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise CheckpointError(f"parameter name too long: {name[:40]}...")
    if values.ndim > 0xFF:
        raise CheckpointError(f"'{name}' has rank {values.ndim}")
    body = b"".join([
        struct.pack("<H", len(encoded)), encoded,
        struct.pack("<B", values.ndim),
        struct.pack(f"<{values.ndim}I", *values.shape),
        np.ascontiguousarray(values, dtype="<f8").tobytes(),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def _encode_table(table: Dict[str, np.ndarray]) -> bytes:
    return struct.pack("<I", len(table)) + b"".join(_encode_record(n, v) for n, v in table.items())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    counters = struct.pack("<QQ", ckpt.iteration, ckpt.prng_state)
    config = ckpt.config_text.encode("utf-8")
    config_block = struct.pack("<I", len(config)) + config
    return b"".join([
        MAGIC, struct.pack("<I", VERSION),
        _encode_table(ckpt.parameters),
        _encode_table(ckpt.momentum),
        counters, struct.pack("<I", zlib.crc32(counters)),
        config_block, struct.pack("<I", zlib.crc32(config_block)),
    ])


class _Reader:

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint ends inside {what}: needed {size} bytes at offset {self.pos}, "
                f"file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def check_crc(self, start: int, record: str):
        body = self.data[start:self.pos]
        (stored,) = self.unpack("<I", f"checksum of '{record}'")
        if zlib.crc32(body) != stored:
            raise CorruptRecordError("checksum mismatch", record)


def _decode_table(reader: _Reader, label: str) -> Dict[str, np.ndarray]:
    (count,) = reader.unpack("<I", f"{label} count")
    table: Dict[str, np.ndarray] = {}
    for index in range(count):
        start = reader.pos
        placeholder = f"{label}[{index}]"
        (name_len,) = reader.unpack("<H", f"name length of {placeholder}")
        raw_name = reader.take(name_len, f"name of {placeholder}")
        (rank,) = reader.unpack("<B", f"rank of {placeholder}")
        dims = reader.unpack(f"<{rank}I", f"dims of {placeholder}")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = reader.take(8 * size, f"values of {placeholder}")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError:
            name = placeholder
        reader.check_crc(start, name)
        if name in table:
            raise CorruptRecordError("duplicate record name", name)
        table[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    return table


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {magic!r}, expected {MAGIC!r}")
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    parameters = _decode_table(reader, "parameter")
    momentum = _decode_table(reader, "momentum")

    start = reader.pos
    iteration, prng_state = reader.unpack("<QQ", "counters")
    reader.check_crc(start, "counters")

    start = reader.pos
    (config_len,) = reader.unpack("<I", "config length")
    config_bytes = reader.take(config_len, "config text")
    reader.check_crc(start, "config")
    if reader.pos != len(data):
        raise CorruptRecordError(f"{len(data) - reader.pos} trailing bytes", "end of file")
    return Checkpoint(parameters, momentum, iteration, prng_state, config_bytes.decode("utf-8"))


def save_checkpoint(ckpt: Checkpoint, path: str):
    """Write atomically through a temporary sibling file"""
    data = encode_checkpoint(ckpt)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(data)
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint {path} ({len(ckpt.parameters)} tensors, iteration {ckpt.iteration})")


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    ckpt = decode_checkpoint(data)
    logger.debug(f"Loaded checkpoint {path} at iteration {ckpt.iteration}")
    return ckpt