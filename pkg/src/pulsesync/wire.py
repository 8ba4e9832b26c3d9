"""Framed sender/receiver protocol.

Frame: ``b"PSYN"``, version u8, msg_type u8, payload length u32 (all
little-endian), then the payload. Payloads:

======================  ====  =============================================
TAGS                    0x01  u64 count, count x u64 ps (strictly increasing)
SEQ_REQUEST             0x02  empty
SEQ_REVEAL              0x03  u32 length, symbols packed 2 bits each
INIT_DONE               0x04  i64 absolute_offset_ps, f64 freq_diff
STATUS                  0x05  f64 qber, f64 a_posteriori_jitter_ps
ERROR                   0x7F  u16 code, UTF-8 text
======================  ====  =============================================

Symbol ``i`` of a SEQ_REVEAL sits in byte ``i // 4`` at bit ``2 * (i % 4)``
(Early 00, Late 01, Plus 10, Minus 11).
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .photon_sim import SymbolSequence

MAGIC = b"PSYN"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
MAX_PAYLOAD = 16 * 1024 * 1024
MAX_TAGS_PER_FRAME = (MAX_PAYLOAD - 8) // 8


class MsgType(enum.IntEnum):
    TAGS = 0x01
    SEQ_REQUEST = 0x02
    SEQ_REVEAL = 0x03
    INIT_DONE = 0x04
    STATUS = 0x05
    ERROR = 0x7F


class ErrorCode(enum.IntEnum):
    UNEXPECTED_MESSAGE = 0x0001
    DISCLOSURE_VIOLATION = 0x0002
    REQUEST_AFTER_INIT = 0x0003
    INIT_FAILED = 0x0010
    TRACKING_LOST = 0x0011
    DECODE_ERROR = 0x0020
    INTERNAL = 0x00FF


class DecodeError(ValueError):
    pass


class BadMagic(DecodeError):
    pass


class BadVersion(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class Oversize(DecodeError):
    pass


class UnknownType(DecodeError):
    pass


class MalformedPayload(DecodeError):
    pass


class _Message:
    msg_type: MsgType

    def payload(self) -> bytes:
        raise NotImplementedError

    def __eq__(self, other):
        return type(self) is type(other) and self.payload() == other.payload()

    def __hash__(self):
        return hash((self.msg_type, self.payload()))


def _check_increasing(t: np.ndarray) -> None:
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise MalformedPayload("TAGS timestamps must be strictly increasing")


@dataclass(eq=False)
class Tags(_Message):
    tags: np.ndarray
    msg_type = MsgType.TAGS

    def __post_init__(self):
        t = np.asarray(self.tags)
        if t.size and (t.dtype.kind not in "iu" or t.min() < 0):
            raise MalformedPayload("timestamps must be non-negative integers")
        self.tags = t.astype(np.uint64)
        _check_increasing(self.tags)

    def payload(self):
        return struct.pack("<Q", self.tags.size) + self.tags.astype("<u8").tobytes()

    @classmethod
    def parse(cls, p: bytes):
        if len(p) < 8:
            raise MalformedPayload("TAGS payload shorter than its count field")
        (n,) = struct.unpack_from("<Q", p)
        if len(p) != 8 + 8 * n:
            raise MalformedPayload(f"TAGS count {n} does not match {len(p) - 8} body bytes")
        return cls(np.frombuffer(p, "<u8", n, 8).astype(np.uint64))


@dataclass(eq=False)
class SeqRequest(_Message):
    msg_type = MsgType.SEQ_REQUEST

    def payload(self):
        return b""

    @classmethod
    def parse(cls, p: bytes):
        if p:
            raise MalformedPayload("SEQ_REQUEST carries no payload")
        return cls()


def pack_symbols(symbols) -> bytes:
    s = np.asarray(symbols, dtype=np.uint8)
    if s.size and s.max() > 3:
        raise MalformedPayload("symbols must be 0..3")
    padded = np.zeros(-(-s.size // 4) * 4, np.uint8)
    padded[: s.size] = s
    q = padded.reshape(-1, 4)
    return (q[:, 0] | (q[:, 1] << 2) | (q[:, 2] << 4) | (q[:, 3] << 6)).astype(np.uint8).tobytes()


def unpack_symbols(data: bytes, length: int) -> np.ndarray:
    b = np.frombuffer(data, np.uint8)
    out = np.stack([(b >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)
    return out[:length].astype(np.int8)


@dataclass(eq=False)
class SeqReveal(_Message):
    sequence: SymbolSequence
    msg_type = MsgType.SEQ_REVEAL

    def __post_init__(self):
        if not isinstance(self.sequence, SymbolSequence):
            self.sequence = SymbolSequence(self.sequence)

    def payload(self):
        return struct.pack("<I", self.sequence.length) + pack_symbols(self.sequence.symbols)

    @classmethod
    def parse(cls, p: bytes):
        if len(p) < 4:
            raise MalformedPayload("SEQ_REVEAL payload shorter than its length field")
        (n,) = struct.unpack_from("<I", p)
        if n == 0 or len(p) != 4 + -(-n // 4):
            raise MalformedPayload(f"SEQ_REVEAL length {n} does not match payload")
        return cls(SymbolSequence(unpack_symbols(p[4:], n)))


@dataclass(eq=False)
class InitDone(_Message):
    absolute_offset_ps: int
    freq_diff: float
    msg_type = MsgType.INIT_DONE

    def payload(self):
        return struct.pack("<qd", int(self.absolute_offset_ps), float(self.freq_diff))

    @classmethod
    def parse(cls, p: bytes):
        if len(p) != 16:
            raise MalformedPayload("INIT_DONE payload must be 16 bytes")
        return cls(*struct.unpack("<qd", p))


@dataclass(eq=False)
class Status(_Message):
    qber: float = math.nan
    a_posteriori_jitter_ps: float = math.nan
    msg_type = MsgType.STATUS

    def payload(self):
        return struct.pack("<dd", float(self.qber), float(self.a_posteriori_jitter_ps))

    @classmethod
    def parse(cls, p: bytes):
        if len(p) != 16:
            raise MalformedPayload("STATUS payload must be 16 bytes")
        return cls(*struct.unpack("<dd", p))


@dataclass(eq=False)
class Error(_Message):
    code: int
    text: str = ""
    msg_type = MsgType.ERROR

    def payload(self):
        return struct.pack("<H", int(self.code)) + self.text.encode("utf-8")

    @classmethod
    def parse(cls, p: bytes):
        if len(p) < 2:
            raise MalformedPayload("ERROR payload shorter than its code field")
        try:
            text = p[2:].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayload(f"ERROR text is not UTF-8: {exc}") from None
        return cls(struct.unpack_from("<H", p)[0], text)


_PARSERS = {cls.msg_type: cls for cls in (Tags, SeqRequest, SeqReveal, InitDone, Status, Error)}
Message = Tags | SeqRequest | SeqReveal | InitDone | Status | Error


def encode_frame(msg: _Message) -> bytes:
    payload = msg.payload()
    if len(payload) > MAX_PAYLOAD:
        raise Oversize(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, VERSION, int(msg.msg_type), len(payload)) + payload


def _parse_header(buf) -> tuple[int, int]:
    magic, version, mtype, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if length > MAX_PAYLOAD:
        raise Oversize(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    if mtype not in _PARSERS:
        raise UnknownType(f"unknown message type 0x{mtype:02x}")
    return mtype, length


def decode_frame(data: bytes) -> _Message:
    """Decode exactly one frame."""
    data = bytes(data)
    if len(data) < HEADER.size:
        raise Truncated(f"frame shorter than the {HEADER.size}-byte header")
    mtype, length = _parse_header(data)
    if len(data) < HEADER.size + length:
        raise Truncated(f"payload has {len(data) - HEADER.size} of {length} bytes")
    if len(data) > HEADER.size + length:
        raise MalformedPayload("trailing bytes after frame")
    return _PARSERS[mtype].parse(data[HEADER.size:])


class FrameDecoder:
    """Reassemble frames from a byte stream split at arbitrary points."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[_Message]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER.size:
            mtype, length = _parse_header(self._buf)
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            out.append(_PARSERS[mtype].parse(bytes(self._buf[HEADER.size:end])))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def tag_frames(tags, max_tags: int = MAX_TAGS_PER_FRAME):
    """Encoded TAGS frames covering ``tags`` in order."""
    t = np.asarray(tags)
    for i in range(0, t.size, max_tags):
        yield encode_frame(Tags(t[i:i + max_tags]))


def write_capture(path, messages) -> None:
    with open(path, "wb") as fh:
        for m in messages:
            fh.write(m if isinstance(m, (bytes, bytearray)) else encode_frame(m))


def read_capture(path) -> list[_Message]:
    dec = FrameDecoder()
    with open(path, "rb") as fh:
        msgs = dec.feed(fh.read())
    if dec.pending:
        raise Truncated(f"{dec.pending} trailing bytes in capture")
    return msgs


# ---------------------------------------------------------------- session protocol

class SessionState(str, enum.Enum):
    HANDSHAKE = "Handshake"
    SWEEPING = "Sweeping"
    OFFSET_SEARCH = "OffsetSearch"
    TRACKING = "Tracking"
    FAILED = "Failed"


class ProtocolViolation(RuntimeError):
    def __init__(self, code: ErrorCode, message: str):
        super().__init__(message)
        self.code = ErrorCode(code)

    def to_message(self) -> Error:
        return Error(int(self.code), str(self))


@dataclass
class SessionProtocol:
    """Validates the message trace of one session (both directions).

    A STATUS in Handshake is the hello that opens the session. The
    sequence may be disclosed once, only after it was requested and before
    INIT_DONE; any later disclosure fails the session.
    """

    state: SessionState = SessionState.HANDSHAKE
    reveals: int = 0
    trace: list = field(default_factory=list)

    def _violate(self, code, text):
        self.state = SessionState.FAILED
        raise ProtocolViolation(code, text)

    def observe(self, msg: _Message) -> SessionState:
        return self.observe_kind(msg.msg_type)

    def observe_kind(self, kind: MsgType) -> SessionState:
        st, kind = self.state, MsgType(kind)
        self.trace.append(kind)
        if st is SessionState.FAILED:
            raise ProtocolViolation(ErrorCode.UNEXPECTED_MESSAGE, "session already failed")
        if kind is MsgType.ERROR:
            self.state = SessionState.FAILED
            return self.state
        if st is SessionState.HANDSHAKE:
            if kind is MsgType.STATUS:
                self.state = SessionState.SWEEPING
            else:
                self._violate(ErrorCode.UNEXPECTED_MESSAGE, f"{kind.name} before handshake")
        elif kind in (MsgType.TAGS, MsgType.STATUS):
            pass
        elif kind is MsgType.SEQ_REVEAL:
            if st is SessionState.OFFSET_SEARCH and self.reveals == 0:
                self.reveals += 1
            else:
                self._violate(ErrorCode.DISCLOSURE_VIOLATION,
                              f"sequence disclosure not permitted in {st.value}"
                              + (" (already disclosed)" if self.reveals else ""))
        elif kind is MsgType.SEQ_REQUEST:
            if st is SessionState.SWEEPING:
                self.state = SessionState.OFFSET_SEARCH
            elif st is SessionState.TRACKING:
                self._violate(ErrorCode.REQUEST_AFTER_INIT, "sequence request after initialization")
        elif kind is MsgType.INIT_DONE:
            if st is SessionState.OFFSET_SEARCH and self.reveals == 1:
                self.state = SessionState.TRACKING
            else:
                self._violate(ErrorCode.UNEXPECTED_MESSAGE, f"INIT_DONE in {st.value}")
        return self.state
