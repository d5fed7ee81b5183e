"""Fixed-length binary frames for the streaming detector service.

Request (145 bytes, little-endian)::

    u16 magic 0x4753 | u8 version 1 | u8 type 0x01 | u64 client timestamp (us)
    16 x f32 torque | 16 x f32 angle | f32 mass | u8 flags

Flags: bit 0 requests the shape class, bit 1 requests feature attribution
(accepted; attribution has no slot in a v1 response).  Other bits are
rejected.

Response (36 bytes)::

    u16 magic | u8 version | u8 type 0x81 | u64 echoed timestamp
    u8 slip | u8 crumple | u8 shape (255 = not requested)
    f32 slip conf | f32 crumple conf | f32 shape conf | u32 processing us
    5 reserved zero bytes

Error response (36 bytes): type 0xFF, the request's raw timestamp bytes,
u8 reason code, zero padding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = 0x4753
VERSION = 1
MSG_REQUEST = 0x01
MSG_RESPONSE = 0x81
MSG_ERROR = 0xFF
SHAPE_NOT_REQUESTED = 255

FLAG_SHAPE = 0x01
FLAG_ATTRIBUTION = 0x02
KNOWN_FLAGS = FLAG_SHAPE | FLAG_ATTRIBUTION

_HEADER = struct.Struct("<HBB")
_REQUEST = struct.Struct("<HBBQ16f16ffB")
_RESPONSE = struct.Struct("<HBBQBBBfffI5x")
_ERROR = struct.Struct("<HBB8sB23x")

REQUEST_SIZE = _REQUEST.size
RESPONSE_SIZE = _RESPONSE.size
assert REQUEST_SIZE == 145 and RESPONSE_SIZE == 36 == _ERROR.size


class Reason:
    BAD_MAGIC = 1
    BAD_VERSION = 2
    BAD_TYPE = 3
    BAD_FLAGS = 4
    BAD_PAYLOAD = 5
    INTERNAL = 6


class ProtocolError(ValueError):
    def __init__(self, reason: int, message: str):
        super().__init__(message)
        self.reason = reason


@dataclass(frozen=True)
class WireRequest:
    timestamp_us: int
    torque: tuple
    angle: tuple
    mass: float
    flags: int = 0

    def pack(self) -> bytes:
        return _REQUEST.pack(MAGIC, VERSION, MSG_REQUEST, self.timestamp_us,
                             *self.torque, *self.angle, self.mass, self.flags)

    @property
    def wants_shape(self) -> bool:
        return bool(self.flags & FLAG_SHAPE)


@dataclass(frozen=True)
class WireResponse:
    timestamp_us: int
    slip: int
    crumple: int
    shape: int
    slip_conf: float
    crumple_conf: float
    shape_conf: float
    processing_us: int

    def pack(self) -> bytes:
        return _RESPONSE.pack(MAGIC, VERSION, MSG_RESPONSE, self.timestamp_us, self.slip,
                              self.crumple, self.shape, self.slip_conf, self.crumple_conf,
                              self.shape_conf, self.processing_us)


@dataclass(frozen=True)
class WireError:
    timestamp_raw: bytes
    reason: int

    @property
    def timestamp_us(self) -> int:
        return int.from_bytes(self.timestamp_raw, "little")

    def pack(self) -> bytes:
        return _ERROR.pack(MAGIC, VERSION, MSG_ERROR, self.timestamp_raw, self.reason)


def parse_request(raw: bytes) -> WireRequest:
    """Validate header fields before touching the payload."""
    if len(raw) != REQUEST_SIZE:
        raise ProtocolError(Reason.BAD_PAYLOAD, f"request must be {REQUEST_SIZE} bytes")
    magic, version, mtype = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ProtocolError(Reason.BAD_MAGIC, f"bad magic 0x{magic:04x}")
    if version != VERSION:
        raise ProtocolError(Reason.BAD_VERSION, f"unsupported version {version}")
    if mtype != MSG_REQUEST:
        raise ProtocolError(Reason.BAD_TYPE, f"unexpected message type 0x{mtype:02x}")
    vals = _REQUEST.unpack(raw)
    flags = vals[-1]
    if flags & ~KNOWN_FLAGS:
        raise ProtocolError(Reason.BAD_FLAGS, f"unknown flag bits 0x{flags:02x}")
    return WireRequest(vals[3], vals[4:20], vals[20:36], vals[36], flags)


def error_frame(raw: bytes, reason: int) -> bytes:
    ts = bytes(raw[4:12]).ljust(8, b"\0")
    return WireError(ts, reason).pack()


def parse_response(raw: bytes) -> WireResponse | WireError:
    if len(raw) != RESPONSE_SIZE:
        raise ProtocolError(Reason.BAD_PAYLOAD, f"response must be {RESPONSE_SIZE} bytes")
    magic, version, mtype = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise ProtocolError(Reason.BAD_MAGIC, "response header mismatch")
    if mtype == MSG_ERROR:
        _, _, _, ts, reason = _ERROR.unpack(raw)
        return WireError(ts, reason)
    if mtype != MSG_RESPONSE:
        raise ProtocolError(Reason.BAD_TYPE, f"unexpected message type 0x{mtype:02x}")
    return WireResponse(*_RESPONSE.unpack(raw)[3:])
