"""
Tensor Dump Format
Binary container for named float tensors (SAE and router parameters, activations)

Layout, all integers little-endian:

    b"SAES"                      magic
    u16  version                 FORMAT_VERSION
    u32  tensor count
    per tensor:
        u16  name length, then the UTF-8 name
        u16  rank
        u64  × rank dims
        f32  × prod(dims) values, row-major

Values are stored as float32; loading widens them back to float64, so a
second dump of loaded tensors is bit-identical to the first.
"""

import logging
import os
import struct
from typing import Dict, Mapping, Tuple

import numpy as np

from backend.errors import DumpFormatError, InvalidArgumentError

logger = logging.getLogger(__name__)

MAGIC = b"SAES"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHI")
_U16 = struct.Struct("<H")
_U64 = struct.Struct("<Q")


def dump_tensors(path: str, tensors: Mapping[str, np.ndarray]):
    """Write tensors in insertion order; the file is replaced atomically"""
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(tensors))]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        if not encoded or len(encoded) > 0xFFFF:
            raise InvalidArgumentError(f"tensor name '{name}' must be 1..65535 bytes")
        array = np.asarray(tensor)
        if array.ndim > 0xFFFF:
            raise InvalidArgumentError(f"tensor '{name}' has too many dimensions")
        chunks.append(_U16.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U16.pack(array.ndim))
        chunks.extend(_U64.pack(d) for d in array.shape)
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)
    logger.debug("wrote %d tensors to %s", len(tensors), path)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise DumpFormatError(
                f"{self.path}: truncated while reading {what} "
                f"(need {size} bytes at offset {self.offset}, file has {len(self.data)})"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct, what: str):
        return fmt.unpack(self.take(fmt.size, what))


def _element_count(shape: Tuple[int, ...], remaining: int, what: str) -> int:
    """Element count of a stored shape, bounded by the bytes left in the file"""
    if 0 in shape:
        return 0
    size = 1
    for dim in shape:
        size *= dim
        if 4 * size > remaining:
            raise DumpFormatError(
                f"{what} declares shape {shape}, more values than the {remaining} bytes left"
            )
    return size


def load_tensors(path: str) -> Dict[str, np.ndarray]:
    """Read a dump; OSError for I/O failures, DumpFormatError for malformed content"""
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)

    magic, version, count = reader.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise DumpFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DumpFormatError(f"{path}: unsupported format version {version}")

    tensors: Dict[str, np.ndarray] = {}
    for index in range(count):
        (name_len,) = reader.unpack(_U16, f"name length of tensor {index}")
        try:
            name = reader.take(name_len, f"name of tensor {index}").decode("utf-8")
        except UnicodeDecodeError:
            raise DumpFormatError(f"{path}: tensor {index} name is not UTF-8")
        if name in tensors:
            raise DumpFormatError(f"{path}: duplicate tensor name '{name}'")
        (rank,) = reader.unpack(_U16, f"rank of '{name}'")
        shape = tuple(reader.unpack(_U64, f"dims of '{name}'")[0] for _ in range(rank))
        size = _element_count(shape, len(reader.data) - reader.offset, f"{path}: '{name}'")
        raw = reader.take(4 * size, f"values of '{name}'")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)

    if reader.offset != len(reader.data):
        raise DumpFormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes")
    return tensors
