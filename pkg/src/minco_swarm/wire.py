"""Broadcast message codec and NTP-style clock offset estimation.

Byte layout (little-endian)::

    offset  size     field
    0       1        version (u8, currently 1)
    1       2        agent id (u16)
    3       4        sequence number (u32)
    7       8        global start time (f64, seconds)
    15      2        piece count M (u16)
    17      8M       durations (f64)
    17+8M   144M     coefficients (M x 6 x 3 f64, row-major, ascending powers)
    end-4   4        CRC32 (IEEE) over every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CrcMismatch, MalformedMessage, TruncatedMessage, VersionMismatch
from .minco import NCOEF, PiecewisePolynomial

VERSION = 1
DIMS = 3
HEADER = struct.Struct("<BHIdH")
CRC = struct.Struct("<I")
MAX_PIECES = 0xFFFF

_F64 = np.dtype("<f8")


def message_size(n_pieces: int) -> int:
    return HEADER.size + 8 * n_pieces * (1 + NCOEF * DIMS) + CRC.size


@dataclass(frozen=True, eq=False)
class TrajectoryMessage:
    agent_id: int
    seq: int
    start: float
    durations: np.ndarray
    coeffs: np.ndarray  # (M, 6, 3)

    def __post_init__(self):
        d = np.ascontiguousarray(self.durations, dtype=float).reshape(-1)
        c = np.ascontiguousarray(self.coeffs, dtype=float).reshape(d.size, NCOEF, DIMS)
        object.__setattr__(self, "durations", d)
        object.__setattr__(self, "coeffs", c)

    @property
    def n_pieces(self) -> int:
        return self.durations.size

    @classmethod
    def from_trajectory(cls, agent_id, seq, trajectory: PiecewisePolynomial, start: float):
        return cls(int(agent_id), int(seq), float(start), trajectory.durations.copy(), trajectory.coeffs.copy())

    def trajectory(self) -> PiecewisePolynomial:
        return PiecewisePolynomial(self.coeffs.copy(), self.durations.copy())

    def __eq__(self, other):
        # bit-exact: compare the raw float bytes, so NaN payloads and -0.0 matter
        if not isinstance(other, TrajectoryMessage):
            return NotImplemented
        return (self.agent_id == other.agent_id and self.seq == other.seq
                and struct.pack("<d", self.start) == struct.pack("<d", other.start)
                and self.durations.tobytes() == other.durations.tobytes()
                and self.coeffs.tobytes() == other.coeffs.tobytes())

    __hash__ = None


def _validate(agent_id, seq, start, durations, coeffs):
    if not 0 <= agent_id <= 0xFFFF:
        raise MalformedMessage(f"agent id {agent_id} does not fit u16")
    if not 0 <= seq <= 0xFFFFFFFF:
        raise MalformedMessage(f"sequence {seq} does not fit u32")
    if not 1 <= durations.size <= MAX_PIECES:
        raise MalformedMessage(f"piece count {durations.size} out of range")
    if not np.isfinite(start):
        raise MalformedMessage("start time is not finite")
    if not np.all(np.isfinite(durations)) or np.any(durations <= 0.0):
        raise MalformedMessage("durations must be finite and positive")
    if not np.all(np.isfinite(coeffs)):
        raise MalformedMessage("coefficients must be finite")


def encode(msg: TrajectoryMessage) -> bytes:
    _validate(msg.agent_id, msg.seq, msg.start, msg.durations, msg.coeffs)
    body = b"".join((
        HEADER.pack(VERSION, msg.agent_id, msg.seq, msg.start, msg.n_pieces),
        msg.durations.astype(_F64, copy=False).tobytes(),
        msg.coeffs.astype(_F64, copy=False).tobytes(),
    ))
    return body + CRC.pack(zlib.crc32(body))


def decode(data) -> TrajectoryMessage:
    """Parse bytes; every failure is a :class:`WireError` subclass."""
    data = bytes(data)
    if len(data) < 1:
        raise TruncatedMessage("empty message")
    if data[0] != VERSION:
        raise VersionMismatch(f"version {data[0]}, expected {VERSION}")
    if len(data) < HEADER.size + CRC.size:
        raise TruncatedMessage(f"{len(data)} bytes is shorter than the header")
    _, agent_id, seq, start, m = HEADER.unpack_from(data)
    size = message_size(m)
    if len(data) < size:
        raise TruncatedMessage(f"{len(data)} bytes, expected {size} for M={m}")
    if len(data) > size:
        raise MalformedMessage(f"{len(data) - size} trailing bytes")
    (crc,) = CRC.unpack_from(data, size - CRC.size)
    if zlib.crc32(data[:size - CRC.size]) != crc:
        raise CrcMismatch("payload checksum mismatch")
    durations = np.frombuffer(data, _F64, m, HEADER.size).astype(float)
    coeffs = np.frombuffer(data, _F64, m * NCOEF * DIMS, HEADER.size + 8 * m).astype(float)
    _validate(agent_id, seq, start, durations, coeffs)
    return TrajectoryMessage(agent_id, seq, start, durations, coeffs.reshape(m, NCOEF, DIMS))


@dataclass(frozen=True)
class SyncSample:
    """One request/response exchange: t1 send and t4 receive on the local clock,
    t2 receive and t3 reply on the peer clock."""

    peer_id: int
    t1: float
    t2: float
    t3: float
    t4: float

    def __post_init__(self):
        if self.t4 < self.t1 or self.t3 < self.t2:
            raise ValueError("response timestamps precede request timestamps")

    @property
    def offset(self) -> float:
        """Peer clock minus local clock."""
        return ((self.t2 - self.t1) + (self.t3 - self.t4)) / 2.0

    @property
    def delay(self) -> float:
        return (self.t4 - self.t1) - (self.t3 - self.t2)


def estimate_offset(samples) -> float:
    """Median of per-sample offsets; robust to a minority of outliers."""
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sync sample")
    return float(np.median([s.offset for s in samples]))
