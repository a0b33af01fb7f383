"""
GGEM tensor container

Little-endian multi-tensor file used for checkpoints and activation maps:

    [offset] [type]            [description]
    0000     4 bytes           magic "GGEM"
    0004     u32               format version (1)
    0008     u32               tensor count
    then per tensor:
             u16               name length in bytes
             bytes             UTF-8 name
             u8                rank
             u32 * rank        dims
             f32 * prod(dims)  row-major payload
"""

import struct
from pathlib import Path
from typing import Dict

import numpy as np

from ml.errors import FormatError
from utils.file_io import PathLike, atomic_write_bytes


MAGIC = b'GGEM'
VERSION = 1


def encode_container(tensors: Dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack('<II', VERSION, len(tensors))]
    for name, tensor in tensors.items():
        encoded_name = name.encode('utf-8')
        if len(encoded_name) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        array = np.asarray(tensor, dtype='<f4')
        if array.ndim > 0xFF:
            raise FormatError(f"tensor '{name}' has rank {array.ndim} > 255")
        chunks.append(struct.pack('<H', len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack('<B', array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    return b''.join(chunks)


def decode_container(payload: bytes) -> Dict[str, np.ndarray]:
    """Decode a container into float64 arrays (insertion order preserved)"""
    if payload[:4] != MAGIC:
        raise FormatError(f"not a GGEM container: expected magic {MAGIC!r}, got {payload[:4]!r}")
    if len(payload) < 12:
        raise FormatError("truncated GGEM header")

    version, count = struct.unpack_from('<II', payload, 4)
    if version != VERSION:
        raise FormatError(f"unsupported GGEM container version {version} (expected {VERSION})")

    offset = 12
    tensors = {}
    try:
        for _ in range(count):
            (name_length,) = struct.unpack_from('<H', payload, offset)
            offset += 2
            name = payload[offset:offset + name_length].decode('utf-8')
            offset += name_length
            (rank,) = struct.unpack_from('<B', payload, offset)
            offset += 1
            dims = struct.unpack_from(f'<{rank}I', payload, offset)
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if offset + 4 * size > len(payload):
                raise FormatError(f"truncated payload for tensor '{name}'")
            data = np.frombuffer(payload, dtype='<f4', count=size, offset=offset)
            offset += 4 * size
            tensors[name] = data.astype(np.float64).reshape(dims)
    except struct.error as e:
        raise FormatError(f"truncated GGEM container: {e}")
    except UnicodeDecodeError:
        raise FormatError(f"tensor name at byte {offset} is not valid UTF-8")

    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes after the last tensor")
    return tensors


def write_container(path: PathLike, tensors: Dict[str, np.ndarray]) -> Path:
    return atomic_write_bytes(path, encode_container(tensors))


def read_container(path: PathLike) -> Dict[str, np.ndarray]:
    return decode_container(Path(path).read_bytes())


def is_container(path: PathLike) -> bool:
    with open(path, 'rb') as f:
        return f.read(4) == MAGIC
