"""Protocol messages and their framed binary encoding.

Frame layout (little-endian)::

    u32 length        bytes that follow this field
    u8  version
    u8  variant tag
    ... payload

Decoding never raises anything but :class:`WireError`.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Union

from ..aspe import DimensionError, EncDataVector, EncQueryVector, read_ciphertext
from ..binio import FormatError, Reader, TruncatedError, VersionError, Writer
from ..cascade import DetectionOutcome, EncryptedDetector, read_encrypted_detector, write_encrypted_detector
from ..retrieval import NONCE_BYTES, PhotoRecord, read_record, write_record

WIRE_VERSION = 1
MAX_FRAME_BYTES = 256 * 1024 * 1024
HEADER_BYTES = 6


class ErrorCode(IntEnum):
    # decode-side
    BAD_VERSION = 1
    BAD_TAG = 2
    LENGTH_OVERFLOW = 3
    TRUNCATED = 4
    MALFORMED = 5
    # server-side
    DETECTOR_MISSING = 16
    BAD_DIMENSION = 17
    NONCE_REUSE = 18
    DUPLICATE_PHOTO = 19
    UNEXPECTED_MESSAGE = 20
    INTERNAL = 31


class WireError(Exception):
    def __init__(self, code: ErrorCode, message: str):
        self.code = ErrorCode(code)
        self.message = message
        super().__init__(f"{self.code.name}: {message}")


@dataclass(frozen=True)
class WindowGeometry:
    origin_x: int
    origin_y: int
    scale: float
    edge: int

    def source_box(self) -> tuple[int, int, int, int]:
        """(x, y, width, height) in source-image pixels."""
        side = int(math.floor(self.edge * self.scale))
        return self.origin_x, self.origin_y, side, side


@dataclass(frozen=True)
class RegisterDetector:
    request_id: int
    detector_id: str
    detector: EncryptedDetector


@dataclass(frozen=True)
class DetectRequest:
    request_id: int
    detector_id: str
    windows: tuple[EncQueryVector, ...]
    geometry: tuple[WindowGeometry, ...]

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(self.windows))
        object.__setattr__(self, "geometry", tuple(self.geometry))
        if len(self.windows) != len(self.geometry):
            raise ValueError("one geometry entry per window")


@dataclass(frozen=True)
class DetectResponse:
    request_id: int
    outcomes: tuple[DetectionOutcome, ...]
    geometry: tuple[WindowGeometry, ...]

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "geometry", tuple(self.geometry))
        if len(self.outcomes) != len(self.geometry):
            raise ValueError("one geometry entry per outcome")


@dataclass(frozen=True)
class UploadPhotos:
    request_id: int
    records: tuple[PhotoRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))


@dataclass(frozen=True)
class MatchRequest:
    request_id: int
    eq: EncQueryVector
    lam: int


@dataclass(frozen=True)
class MatchedPhoto:
    photo_id: str
    ciphertext: bytes
    nonce: bytes


@dataclass(frozen=True)
class MatchResponse:
    request_id: int
    photos: tuple[MatchedPhoto, ...]

    def __post_init__(self):
        object.__setattr__(self, "photos", tuple(self.photos))


@dataclass(frozen=True)
class Ack:
    request_id: int
    count: int = 0


@dataclass(frozen=True)
class ErrorReply:
    request_id: int
    code: int
    message: str


Message = Union[RegisterDetector, DetectRequest, DetectResponse, UploadPhotos,
                MatchRequest, MatchResponse, Ack, ErrorReply]

TAGS = {
    RegisterDetector: 0x01,
    DetectRequest: 0x02,
    DetectResponse: 0x03,
    UploadPhotos: 0x04,
    MatchRequest: 0x05,
    MatchResponse: 0x06,
    Ack: 0x07,
    ErrorReply: 0x7F,
}
BY_TAG = {v: k for k, v in TAGS.items()}
REQUESTS = (RegisterDetector, DetectRequest, UploadPhotos, MatchRequest)


# --- payload codecs ------------------------------------------------------------

def _w_geometry(w: Writer, g: WindowGeometry) -> None:
    w.u32(g.origin_x).u32(g.origin_y).f64(g.scale).u16(g.edge)


def _r_geometry(r: Reader) -> WindowGeometry:
    return WindowGeometry(r.u32(), r.u32(), r.f64(), r.u16())


def _w_outcome(w: Writer, o: DetectionOutcome) -> None:
    w.u8(1 if o.accepted else 0)
    w.i32(-1 if o.rejected_at_stage is None else o.rejected_at_stage)
    w.u32(len(o.stage_scores))
    for s in o.stage_scores:
        w.f64(s)


def _r_outcome(r: Reader) -> DetectionOutcome:
    pos = r.pos
    accepted = r.u8()
    rejected = r.i32()
    n = r.u32()
    if accepted > 1 or rejected < -1:
        raise FormatError("bad detection outcome", pos)
    if 8 * n > r.remaining():
        raise TruncatedError("truncated stage scores", r.pos)
    scores = tuple(r.f64_array(n).tolist())
    return DetectionOutcome(bool(accepted), None if rejected < 0 else rejected, scores)


def _count(r: Reader, min_item_bytes: int) -> int:
    pos = r.pos
    n = r.u32()
    if n * min_item_bytes > r.remaining():
        raise TruncatedError(f"count {n} exceeds remaining payload", pos)
    return n


def _encode_payload(w: Writer, msg) -> None:
    if isinstance(msg, RegisterDetector):
        w.u32(msg.request_id).text(msg.detector_id)
        write_encrypted_detector(w, msg.detector)
    elif isinstance(msg, DetectRequest):
        w.u32(msg.request_id).text(msg.detector_id).u32(len(msg.windows))
        for ct, g in zip(msg.windows, msg.geometry):
            ct.write(w)
            _w_geometry(w, g)
    elif isinstance(msg, DetectResponse):
        w.u32(msg.request_id).u32(len(msg.outcomes))
        for o, g in zip(msg.outcomes, msg.geometry):
            _w_outcome(w, o)
            _w_geometry(w, g)
    elif isinstance(msg, UploadPhotos):
        w.u32(msg.request_id).u32(len(msg.records))
        for rec in msg.records:
            w.u16(rec.enc_label.dim)
            write_record(w, rec)
    elif isinstance(msg, MatchRequest):
        w.u32(msg.request_id)
        msg.eq.write(w)
        w.u32(msg.lam)
    elif isinstance(msg, MatchResponse):
        w.u32(msg.request_id).u32(len(msg.photos))
        for p in msg.photos:
            w.text(p.photo_id).raw(p.nonce).blob(p.ciphertext)
    elif isinstance(msg, Ack):
        w.u32(msg.request_id).u32(msg.count)
    elif isinstance(msg, ErrorReply):
        w.u32(msg.request_id).u16(int(msg.code)).text(msg.message)
    else:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")


def _decode_payload(cls, r: Reader):
    rid = r.u32()
    if cls is RegisterDetector:
        did = r.text()
        return RegisterDetector(rid, did, read_encrypted_detector(r))
    if cls is DetectRequest:
        did = r.text()
        n = _count(r, 5 + 18)
        windows, geometry = [], []
        for _ in range(n):
            ct = read_ciphertext(r)
            if not isinstance(ct, EncQueryVector):
                raise FormatError("detection windows must be query-side ciphertexts", r.pos)
            windows.append(ct)
            geometry.append(_r_geometry(r))
        return DetectRequest(rid, did, tuple(windows), tuple(geometry))
    if cls is DetectResponse:
        n = _count(r, 9 + 18)
        outcomes, geometry = [], []
        for _ in range(n):
            outcomes.append(_r_outcome(r))
            geometry.append(_r_geometry(r))
        return DetectResponse(rid, tuple(outcomes), tuple(geometry))
    if cls is UploadPhotos:
        n = _count(r, 2 + 4 + NONCE_BYTES + 4)
        return UploadPhotos(rid, tuple(read_record(r, r.u16()) for _ in range(n)))
    if cls is MatchRequest:
        ct = read_ciphertext(r)
        if not isinstance(ct, EncQueryVector):
            raise FormatError("match query must be a query-side ciphertext", r.pos)
        return MatchRequest(rid, ct, r.u32())
    if cls is MatchResponse:
        n = _count(r, 4 + NONCE_BYTES + 4)
        photos = []
        for _ in range(n):
            pid = r.text()
            nonce = r.take(NONCE_BYTES)
            photos.append(MatchedPhoto(pid, r.blob(), nonce))
        return MatchResponse(rid, tuple(photos))
    if cls is Ack:
        return Ack(rid, r.u32())
    if cls is ErrorReply:
        code = r.u16()
        return ErrorReply(rid, code, r.text())
    raise AssertionError(cls)


def encode(msg: Message) -> bytes:
    w = Writer()
    _encode_payload(w, msg)
    body = w.getvalue()
    length = 2 + len(body)
    if length > MAX_FRAME_BYTES:
        raise WireError(ErrorCode.LENGTH_OVERFLOW, f"frame of {length} bytes exceeds limit")
    return struct.pack("<IBB", length, WIRE_VERSION, TAGS[type(msg)]) + body


def frame_length(header: bytes) -> int:
    """Validate the u32 length prefix and return the number of bytes that follow it."""
    if len(header) < 4:
        raise WireError(ErrorCode.TRUNCATED, "missing length prefix")
    (length,) = struct.unpack_from("<I", header)
    if length > MAX_FRAME_BYTES:
        raise WireError(ErrorCode.LENGTH_OVERFLOW, f"declared length {length} exceeds limit")
    if length < 2:
        raise WireError(ErrorCode.MALFORMED, f"declared length {length} too short for a header")
    return length


def decode(frame: bytes) -> Message:
    frame = bytes(frame)
    length = frame_length(frame)
    if len(frame) < 4 + length:
        raise WireError(ErrorCode.TRUNCATED, f"frame declares {length} bytes, has {len(frame) - 4}")
    if len(frame) > 4 + length:
        raise WireError(ErrorCode.MALFORMED, f"{len(frame) - 4 - length} bytes after frame end")
    version, tag = frame[4], frame[5]
    if version != WIRE_VERSION:
        raise WireError(ErrorCode.BAD_VERSION, f"unsupported wire version {version}")
    cls = BY_TAG.get(tag)
    if cls is None:
        raise WireError(ErrorCode.BAD_TAG, f"unknown variant tag 0x{tag:02x}")
    r = Reader(frame, HEADER_BYTES)
    try:
        msg = _decode_payload(cls, r)
        r.expect_end()
    except TruncatedError as exc:
        raise WireError(ErrorCode.TRUNCATED, str(exc)) from None
    except VersionError as exc:
        raise WireError(ErrorCode.BAD_VERSION, str(exc)) from None
    except (FormatError, DimensionError, ValueError, TypeError) as exc:
        raise WireError(ErrorCode.MALFORMED, str(exc)) from None
    return msg


def read_frame(stream) -> bytes | None:
    """Read one whole frame from a binary stream; None on clean EOF before a frame starts."""
    head = _read_exact(stream, 4)
    if head is None:
        return None
    length = frame_length(head)
    body = _read_exact(stream, length)
    if body is None:
        raise WireError(ErrorCode.TRUNCATED, "stream ended mid-frame")
    return head + body


def _read_exact(stream, n: int) -> bytes | None:
    chunks, got = [], 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            if got == 0:
                return None
            raise WireError(ErrorCode.TRUNCATED, "stream ended mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)
