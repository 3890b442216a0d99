"""Tensor data model and the ``.estm`` model container format.

Layout on disk::

    b"ESTM" + b"0001"            8 bytes, magic + format version
    header length                u64 little-endian
    header                       UTF-8 JSON (tensor table, metadata, payload CRC32)
    payload                      raw little-endian tensor payloads, back to back

f32 tensors are stored as row-major float32.  q4/q8 tensors are stored block by
block: each block is ``scale: f32 | offset: f32 | packed codes``; q4 packs two
codes per byte with the low nibble first.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np

MAGIC_PREFIX = b"ESTM"
FORMAT_VERSION = "0001"
MAGIC = MAGIC_PREFIX + FORMAT_VERSION.encode("ascii")

BLOCK_PREFIX_BYTES = 8  # fp32 scale + fp32 offset
DTYPE_BITS = {"q4": 4, "q8": 8}


class ContainerError(Exception):
    """Base class for container read/write failures."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class DuplicateTensorError(ContainerError):
    pass


def _check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d <= 0 for d in shape):
        raise ValueError(f"shape must be a non-empty list of positive dims, got {shape}")
    return shape


@dataclass(eq=False)
class TensorF32:
    """Dense full-precision tensor, stored as row-major float32."""

    name: str
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        self.shape = _check_shape(self.shape)
        self.data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        if self.data.size != math.prod(self.shape):
            raise ValueError(
                f"{self.name}: data has {self.data.size} values, shape {self.shape} needs {math.prod(self.shape)}"
            )

    @classmethod
    def from_array(cls, name: str, arr: np.ndarray) -> "TensorF32":
        arr = np.asarray(arr)
        return cls(name, arr.shape, arr)

    @property
    def dtype(self) -> str:
        return "f32"

    @property
    def numel(self) -> int:
        return self.data.size

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def payload_size(self) -> int:
        return 4 * self.numel

    def to_bytes(self) -> bytes:
        return self.data.astype("<f4", copy=False).tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorF32):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def block_bounds(numel: int, block_size: int) -> list[tuple[int, int]]:
    """(start, stop) of each block over a flattened tensor; the last may be short."""
    return [(i, min(i + block_size, numel)) for i in range(0, numel, block_size)]


def block_payload_size(length: int, bits: int) -> int:
    return BLOCK_PREFIX_BYTES + (length * bits + 7) // 8


def quantized_payload_size(numel: int, bits: int, block_size: int) -> int:
    full, tail = divmod(numel, block_size)
    size = full * block_payload_size(block_size, bits)
    if tail:
        size += block_payload_size(tail, bits)
    return size


@dataclass(eq=False)
class QuantizedTensor:
    """Block-quantized tensor.

    ``codes`` holds one unpacked integer code per element (uint8).  Each block
    ``i`` covers flat elements ``[i*block_size, (i+1)*block_size)`` and dequantizes
    as ``scales[i] * code + offsets[i]``.
    """

    name: str
    shape: tuple[int, ...]
    bits: int
    block_size: int
    scales: np.ndarray
    offsets: np.ndarray
    codes: np.ndarray
    # RTN integer zero-points; informational only, never serialized
    zero_points: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.shape = _check_shape(self.shape)
        if self.bits not in (4, 8):
            raise ValueError(f"bits must be 4 or 8, got {self.bits}")
        if self.block_size < 2:
            raise ValueError("block_size must be >= 2")
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32).reshape(-1)
        self.offsets = np.ascontiguousarray(self.offsets, dtype=np.float32).reshape(-1)
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8).reshape(-1)
        n_blocks = -(-self.numel // self.block_size)
        if self.codes.size != self.numel:
            raise ValueError(f"{self.name}: {self.codes.size} codes for {self.numel} elements")
        if self.scales.size != n_blocks or self.offsets.size != n_blocks:
            raise ValueError(f"{self.name}: expected {n_blocks} scales/offsets")
        if self.codes.size and int(self.codes.max()) > (1 << self.bits) - 1:
            raise ValueError(f"{self.name}: code out of range for {self.bits} bits")

    @property
    def dtype(self) -> str:
        return f"q{self.bits}"

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def n_blocks(self) -> int:
        return self.scales.size

    def payload_size(self) -> int:
        return quantized_payload_size(self.numel, self.bits, self.block_size)

    def to_bytes(self) -> bytes:
        parts = []
        for i, (a, b) in enumerate(block_bounds(self.numel, self.block_size)):
            parts.append(struct.pack("<ff", self.scales[i], self.offsets[i]))
            parts.append(pack_codes(self.codes[a:b], self.bits))
        return b"".join(parts)

    @classmethod
    def from_bytes(
        cls, name: str, shape: tuple[int, ...], bits: int, block_size: int, buf: bytes
    ) -> "QuantizedTensor":
        numel = math.prod(shape)
        if len(buf) != quantized_payload_size(numel, bits, block_size):
            raise TruncatedError(f"{name}: payload length {len(buf)} does not match shape")
        bounds = block_bounds(numel, block_size)
        scales = np.empty(len(bounds), np.float32)
        offsets = np.empty(len(bounds), np.float32)
        codes = np.empty(numel, np.uint8)
        pos = 0
        for i, (a, b) in enumerate(bounds):
            scales[i], offsets[i] = struct.unpack_from("<ff", buf, pos)
            pos += BLOCK_PREFIX_BYTES
            nbytes = block_payload_size(b - a, bits) - BLOCK_PREFIX_BYTES
            codes[a:b] = unpack_codes(buf[pos : pos + nbytes], b - a, bits)
            pos += nbytes
        return cls(name, shape, bits, block_size, scales, offsets, codes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.bits == other.bits
            and self.block_size == other.block_size
            and self.to_bytes() == other.to_bytes()
        )


Tensor = Union[TensorF32, QuantizedTensor]


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    codes = np.asarray(codes, dtype=np.uint8)
    if bits == 8:
        return codes.tobytes()
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, np.uint8)])
    lo, hi = codes[0::2], codes[1::2]
    return (lo | (hi << 4)).astype(np.uint8).tobytes()


def unpack_codes(buf: bytes, count: int, bits: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    if bits == 8:
        if raw.size != count:
            raise TruncatedError("q8 block has wrong byte count")
        return raw.copy()
    if raw.size != (count + 1) // 2:
        raise TruncatedError("q4 block has wrong byte count")
    out = np.empty(raw.size * 2, np.uint8)
    out[0::2] = raw & 0x0F
    out[1::2] = raw >> 4
    return out[:count]


@dataclass(eq=False)
class ModelContainer:
    tensors: dict[str, Tensor] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)
    version: str = FORMAT_VERSION

    @classmethod
    def from_tensors(cls, tensors: Iterable[Tensor], metadata: dict[str, str] | None = None) -> "ModelContainer":
        c = cls(metadata=dict(metadata or {}))
        for t in tensors:
            c.add(t)
        return c

    def add(self, tensor: Tensor) -> None:
        if tensor.name in self.tensors:
            raise DuplicateTensorError(f"duplicate tensor name {tensor.name!r}")
        self.tensors[tensor.name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelContainer):
            return NotImplemented
        return (
            self.version == other.version
            and self.metadata == other.metadata
            and list(self.tensors) == list(other.tensors)
            and all(self.tensors[k] == other.tensors[k] for k in self.tensors)
        )


def container_size_bytes(container: ModelContainer) -> int:
    """Payload bytes on disk, header excluded."""
    return sum(t.payload_size() for t in container.tensors.values())


def _serialize(container: ModelContainer) -> bytes:
    entries = []
    blobs = []
    offset = 0
    seen: set[str] = set()
    for t in container.tensors.values():
        if t.name in seen:
            raise DuplicateTensorError(f"duplicate tensor name {t.name!r}")
        seen.add(t.name)
        blob = t.to_bytes()
        entry = {"name": t.name, "dtype": t.dtype, "shape": list(t.shape), "offset": offset, "length": len(blob)}
        if isinstance(t, QuantizedTensor):
            entry["block_size"] = t.block_size
        entries.append(entry)
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    header = {
        "version": container.version,
        "metadata": container.metadata,
        "tensors": entries,
        "payload_length": len(payload),
        "crc32": zlib.crc32(payload),
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    magic = MAGIC_PREFIX + container.version.encode("ascii")
    return magic + struct.pack("<Q", len(header_bytes)) + header_bytes + payload


def write_container(container: ModelContainer, path: str | Path) -> None:
    data = _serialize(container)
    Path(path).write_bytes(data)


def read_container(path: str | Path) -> ModelContainer:
    return parse_container(Path(path).read_bytes())


def parse_container(data: bytes) -> ModelContainer:
    if len(data) < 16 or data[:4] != MAGIC_PREFIX:
        raise BadMagicError("not an ESTM container")
    version = data[4:8].decode("ascii", errors="replace")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported container version {version!r}")
    (header_len,) = struct.unpack_from("<Q", data, 8)
    start = 16 + header_len
    if start > len(data):
        raise TruncatedError(f"header length {header_len} exceeds file size")
    try:
        header = json.loads(data[16:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TruncatedError(f"unreadable header: {e}") from e
    if header.get("version") != version:
        raise VersionError(f"header version {header.get('version')!r} disagrees with magic")
    payload = data[start:]
    if len(payload) != header["payload_length"]:
        raise TruncatedError(f"payload is {len(payload)} bytes, header says {header['payload_length']}")
    if zlib.crc32(payload) != header["crc32"]:
        raise ChecksumError("payload CRC32 mismatch")

    container = ModelContainer(metadata=dict(header["metadata"]), version=version)
    for e in header["tensors"]:
        buf = payload[e["offset"] : e["offset"] + e["length"]]
        if len(buf) != e["length"]:
            raise TruncatedError(f"{e['name']}: payload out of bounds")
        shape = tuple(e["shape"])
        if e["dtype"] == "f32":
            if len(buf) != 4 * math.prod(shape):
                raise TruncatedError(f"{e['name']}: wrong f32 payload length")
            t: Tensor = TensorF32(e["name"], shape, np.frombuffer(buf, dtype="<f4"))
        elif e["dtype"] in DTYPE_BITS:
            t = QuantizedTensor.from_bytes(e["name"], shape, DTYPE_BITS[e["dtype"]], e["block_size"], buf)
        else:
            raise ContainerError(f"{e['name']}: unknown dtype {e['dtype']!r}")
        container.add(t)
    return container
