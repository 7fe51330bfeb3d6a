"""Binary model files: magic, config header, named float32 tensors, CRC-32 trailer.

Layout (all integers little-endian uint32)::

    b"GDW1" | header_len | header (YAML run config)
    repeated: name_len | name | rank | extents[rank] | float32 payload
    crc32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from gatedssd.config import RunConfig, dump_config, parse_config
from gatedssd.errors import ModelCorruptError, ModelFormatError, ModelTruncatedError
from gatedssd.model import GatedSSD

MAGIC = b"GDW1"
_U32 = struct.Struct("<I")


def encode_model(config: RunConfig, params: dict[str, np.ndarray]) -> bytes:
    header = dump_config(config).encode("utf-8")
    parts = [MAGIC, _U32.pack(len(header)), header]
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def save_model(path, config: RunConfig, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_model(config, params))


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise ModelTruncatedError(self.pos, self.pos + n - self.end)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_model(data: bytes) -> tuple[RunConfig, dict[str, np.ndarray]]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    if len(data) < 12:
        raise ModelTruncatedError(len(data), 12 - len(data))
    reader = _Reader(data, len(data) - 4)
    reader.take(4)
    header_span = (reader.pos + 4, reader.pos + 4 + reader.u32())
    reader.take(header_span[1] - header_span[0])
    records = []
    # structural pass first: bounds only, nothing constructed
    while reader.pos < reader.end:
        name = reader.take(reader.u32())
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        start = reader.pos
        reader.take(4 * count)
        records.append((name, shape, start, count))
    stored = _U32.unpack(data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored:
        raise ModelCorruptError("checksum mismatch: model file is corrupted")
    try:
        config = parse_config(data[header_span[0]:header_span[1]].decode("utf-8"))
        names = [name.decode("utf-8") for name, *_ in records]
    except UnicodeDecodeError as exc:
        raise ModelFormatError(f"header or tensor name is not UTF-8 ({exc})") from None
    params = {}
    for name, (_, shape, start, count) in zip(names, records):
        if name in params:
            raise ModelFormatError(f"duplicate tensor {name!r}")
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
    return config, params


def load_model(path) -> tuple[RunConfig, dict[str, np.ndarray]]:
    return decode_model(Path(path).read_bytes())


def load_detector(path) -> tuple[RunConfig, GatedSSD]:
    config, params = load_model(path)
    return config, GatedSSD(config.model_config(), params=params)
