"""Little-endian binary reading/writing shared by the file formats and the wire codec."""
from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    """Malformed binary payload. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class VersionError(FormatError):
    """Well-formed header carrying a format version this code does not read."""


class TruncatedError(FormatError):
    """Input ended before the structure being read was complete."""


class Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = memoryview(bytes(data))
        self.pos = offset

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedError(f"truncated: need {n} bytes, have {self.remaining()}", self.pos)
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def _unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))[0]

    def u8(self) -> int:
        return self._unpack("<B")

    def u16(self) -> int:
        return self._unpack("<H")

    def u32(self) -> int:
        return self._unpack("<I")

    def i32(self) -> int:
        return self._unpack("<i")

    def f64(self) -> float:
        return self._unpack("<d")

    def f64_array(self, n: int) -> np.ndarray:
        raw = self.take(8 * n)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def blob(self) -> bytes:
        return self.take(self.u32())

    def text(self) -> str:
        start = self.pos
        raw = self.blob()
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8: {exc.reason}", start) from None

    def magic(self, expected: bytes) -> None:
        start = self.pos
        try:
            got = self.take(len(expected))
        except FormatError:
            raise FormatError("bad magic", start) from None
        if got != expected:
            raise FormatError("bad magic", start)

    def expect_end(self) -> None:
        if self.remaining():
            raise FormatError(f"{self.remaining()} trailing bytes", self.pos)


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes) -> "Writer":
        self.parts.append(bytes(b))
        return self

    def u8(self, v: int) -> "Writer":
        return self.raw(struct.pack("<B", v))

    def u16(self, v: int) -> "Writer":
        return self.raw(struct.pack("<H", v))

    def u32(self, v: int) -> "Writer":
        return self.raw(struct.pack("<I", v))

    def i32(self, v: int) -> "Writer":
        return self.raw(struct.pack("<i", v))

    def f64(self, v: float) -> "Writer":
        return self.raw(struct.pack("<d", v))

    def f64_array(self, a) -> "Writer":
        return self.raw(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def blob(self, b: bytes) -> "Writer":
        return self.u32(len(b)).raw(b)

    def text(self, s: str) -> "Writer":
        return self.blob(s.encode("utf-8"))

    def getvalue(self) -> bytes:
        return b"".join(self.parts)
