"""Binary framing of per-node feature frames.

Layout, little-endian throughout::

    magic "CSFF" | version u8 | node_id u16 | frame_index u32 | count u8
    | count x f32 features | f32 energy | f32 entropy_neg | u32 crc32

The CRC (reflected 0xEDB88320, init and final xor 0xFFFFFFFF, i.e. the
zlib CRC-32) covers every byte after the magic up to and including
entropy_neg.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator

import numpy as np

MAGIC = b"CSFF"
VERSION = 0x01
_HEADER = struct.Struct("<BHIB")  # version, node_id, frame_index, count
_TRAILER = struct.Struct("<ffI")  # energy, entropy_neg, (crc read separately)
HEADER_SIZE = len(MAGIC) + _HEADER.size
MIN_FRAME_SIZE = HEADER_SIZE + 12


class FrameError(ValueError):
    code = "frame-error"


class BadMagic(FrameError):
    code = "bad-magic"


class BadVersion(FrameError):
    code = "bad-version"


class BadCrc(FrameError):
    code = "bad-crc"


class Truncated(FrameError):
    code = "truncated"


class EncodeError(FrameError):
    code = "encode-error"


@dataclass(frozen=True)
class FeatureWireFrame:
    node_id: int
    frame_index: int
    features: tuple[float, ...] = field(default_factory=tuple)
    energy: float = 0.0
    entropy_neg: float = 0.0
    feature_count: int | None = None

    def __post_init__(self):
        feats = tuple(float(np.float32(v)) for v in self.features)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "energy", float(np.float32(self.energy)))
        object.__setattr__(self, "entropy_neg", float(np.float32(self.entropy_neg)))
        if self.feature_count is None:
            object.__setattr__(self, "feature_count", len(feats))

    def same_as(self, other: "FeatureWireFrame") -> bool:
        """Bitwise equality (NaN payloads compare equal to themselves)."""
        a = np.array(self.features + (self.energy, self.entropy_neg), dtype=np.float32)
        b = np.array(other.features + (other.energy, other.entropy_neg), dtype=np.float32)
        return (
            (self.node_id, self.frame_index, self.feature_count)
            == (other.node_id, other.frame_index, other.feature_count)
            and a.tobytes() == b.tobytes()
        )


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def encode_frame(frame: FeatureWireFrame) -> bytes:
    n = len(frame.features)
    if frame.feature_count != n:
        raise EncodeError(f"feature_count {frame.feature_count} != {n} features")
    if n > 255:
        raise EncodeError(f"{n} features exceed the 255 limit")
    if not 0 <= frame.node_id <= 0xFFFF or not 0 <= frame.frame_index <= 0xFFFFFFFF:
        raise EncodeError("node_id or frame_index out of range")
    body = _HEADER.pack(VERSION, frame.node_id, frame.frame_index, n)
    body += np.asarray(frame.features, dtype="<f4").tobytes()
    body += struct.pack("<ff", frame.energy, frame.entropy_neg)
    return MAGIC + body + struct.pack("<I", crc32(body))


def _frame_size(count: int) -> int:
    return HEADER_SIZE + 4 * count + 12


def _count_corrupted(data: bytes) -> bool:
    """True if the buffer is a complete frame whose count byte was damaged."""
    implied, rem = divmod(len(data) - HEADER_SIZE - 12, 4)
    if rem or not 0 <= implied <= 255:
        return False
    body = bytearray(data[4:-4])
    body[_HEADER.size - 1] = implied
    return crc32(bytes(body)) == struct.unpack("<I", data[-4:])[0]


def decode_frame(data: bytes) -> FeatureWireFrame:
    data = bytes(data)
    if len(data) >= HEADER_SIZE and data[:4] == MAGIC:
        declared = _frame_size(data[HEADER_SIZE - 1])
        if declared != len(data) and _count_corrupted(data):
            raise BadCrc("count field does not match the checksummed length")
    frame, used = _decode_prefix(data)
    if used != len(data):
        raise FrameError(f"{len(data) - used} trailing bytes after frame")
    return frame


def _decode_prefix(data: bytes) -> tuple[FeatureWireFrame, int]:
    if len(data) < len(MAGIC):
        raise Truncated(f"{len(data)} bytes is shorter than the magic")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    if len(data) < HEADER_SIZE:
        raise Truncated("header incomplete")
    version, node_id, frame_index, count = _HEADER.unpack_from(data, 4)
    size = _frame_size(count)
    if len(data) < size:
        raise Truncated(f"frame needs {size} bytes, got {len(data)}")
    body = data[4: size - 4]
    (crc,) = struct.unpack_from("<I", data, size - 4)
    if crc32(body) != crc:
        raise BadCrc(f"crc mismatch: stored 0x{crc:08X}, computed 0x{crc32(body):08X}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    feats = np.frombuffer(data, dtype="<f4", count=count, offset=HEADER_SIZE)
    energy, entropy_neg = struct.unpack_from("<ff", data, HEADER_SIZE + 4 * count)
    frame = FeatureWireFrame(node_id, frame_index, tuple(feats.tolist()), energy, entropy_neg)
    return frame, size


def iter_frames(data: bytes, errors: list | None = None) -> Iterator[FeatureWireFrame]:
    """Decode concatenated frames, resynchronizing on the magic after corruption.

    Skipped damage is reported into ``errors`` as ``(offset, FrameError)``.
    """
    pos = 0
    while pos < len(data):
        start = data.find(MAGIC, pos)
        if start < 0:
            if errors is not None and pos < len(data):
                errors.append((pos, BadMagic("no frame start in trailing bytes")))
            return
        if start > pos and errors is not None:
            errors.append((pos, BadMagic(f"{start - pos} bytes skipped")))
        try:
            frame, size = _decode_prefix(data[start:])
        except FrameError as exc:
            if errors is not None:
                errors.append((start, exc))
            pos = start + 1
            continue
        yield frame
        pos = start + size


def write_frames(frames: Iterable[FeatureWireFrame], fh: BinaryIO) -> int:
    n = 0
    for frame in frames:
        fh.write(encode_frame(frame))
        n += 1
    return n


def read_frames(fh: BinaryIO, errors: list | None = None) -> list[FeatureWireFrame]:
    return list(iter_frames(fh.read(), errors))
