"""Label vectors, queries, encrypted label matching and the encrypted photo store."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .aspe import (AspeKey, DimensionError, EncDataVector, EncQueryVector, _rng,
                   encrypt_data, encrypt_query, secure_inner)
from .binio import FormatError, Reader, TruncatedError, VersionError, Writer

INDEX_MAGIC = b"VIDX"
INDEX_VERSION = 1
NONCE_BYTES = 12
CONTENT_KEY_BYTES = 32
MATCH_TOL = 1e-3


class UnknownMemberError(KeyError):
    pass


class PhotoAuthError(ValueError):
    """Photo ciphertext failed authentication (tampering or wrong key)."""


class NonceReuseError(ValueError):
    pass


class DuplicatePhotoError(ValueError):
    pass


class IdentityRegistry:
    """Ordered group members; position j is coordinate j of every label vector."""

    def __init__(self, members: Iterable[str]):
        self.members = tuple(members)
        if not self.members:
            raise ValueError("registry needs at least one member")
        if any(not isinstance(m, str) or not m for m in self.members):
            raise ValueError("member identifiers must be non-empty strings")
        if len(set(self.members)) != len(self.members):
            raise ValueError("member identifiers must be unique")
        self._index = {m: j for j, m in enumerate(self.members)}

    def __len__(self):
        return len(self.members)

    def __repr__(self):
        return f"IdentityRegistry({list(self.members)!r})"

    def index(self, member: str) -> int:
        try:
            return self._index[member]
        except KeyError:
            raise UnknownMemberError(member) from None

    def bits(self, members: Iterable[str]) -> tuple[int, ...]:
        out = [0] * len(self)
        for m in members:
            out[self.index(m)] = 1
        return tuple(out)


@dataclass(frozen=True)
class LabelVector:
    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits or any(b not in (0, 1) for b in bits):
            raise ValueError("label bits must be a non-empty 0/1 sequence")
        object.__setattr__(self, "bits", bits)

    def __str__(self):
        return "".join(map(str, self.bits))


@dataclass(frozen=True)
class Query:
    bits: tuple[int, ...]
    lam: int

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits or any(b not in (0, 1) for b in bits):
            raise ValueError("query bits must be a non-empty 0/1 sequence")
        object.__setattr__(self, "bits", bits)
        if self.lam != sum(bits):
            raise ValueError("lambda must equal the number of target members")


@dataclass(frozen=True)
class PhotoRecord:
    photo_id: str
    nonce: bytes
    ciphertext: bytes
    enc_label: EncDataVector

    def __post_init__(self):
        if not isinstance(self.enc_label, EncDataVector):
            raise TypeError("enc_label must be a data-side ciphertext")
        if len(self.nonce) != NONCE_BYTES:
            raise ValueError(f"nonce must be {NONCE_BYTES} bytes")


def build_label_vector(reg: IdentityRegistry, present: Iterable[str]) -> LabelVector:
    return LabelVector(reg.bits(present))


def build_query(reg: IdentityRegistry, targets: Iterable[str]) -> Query:
    targets = set(targets)
    if not targets:
        raise ValueError("a query needs at least one target member")
    bits = reg.bits(targets)
    return Query(bits, sum(bits))


def encrypt_label(key: AspeKey, label: LabelVector, rng=None) -> EncDataVector:
    key.require("matching")
    if len(label.bits) != key.dim:
        raise DimensionError(f"label length {len(label.bits)} != key dim {key.dim}")
    return encrypt_data(key, np.array(label.bits, dtype=np.float64), rng)


def encrypt_query_label(key: AspeKey, query: Query, rng=None) -> EncQueryVector:
    key.require("matching")
    if len(query.bits) != key.dim:
        raise DimensionError(f"query length {len(query.bits)} != key dim {key.dim}")
    return encrypt_query(key, np.array(query.bits, dtype=np.float64), rng)


def match_scores(records: Sequence[PhotoRecord], eq: EncQueryVector) -> list[float]:
    """The recovered L·Q for every record, in store order."""
    return [secure_inner(r.enc_label, eq) for r in records]


def match(records: Sequence[PhotoRecord], eq: EncQueryVector, lam: int,
          tol: float = MATCH_TOL) -> list[str]:
    """Ids of records whose recovered L·Q equals lambda within ``tol``."""
    if not isinstance(eq, EncQueryVector):
        raise TypeError("match query must be an EncQueryVector")
    if not records:
        return []
    for r in records:
        if r.enc_label.dim != eq.dim:
            raise DimensionError(f"label dim {r.enc_label.dim} != query dim {eq.dim}")
    p1 = np.stack([r.enc_label.part1 for r in records])
    p2 = np.stack([r.enc_label.part2 for r in records])
    ret = p1 @ eq.part1 + p2 @ eq.part2
    return [r.photo_id for r, v in zip(records, ret) if abs(v - lam) <= tol]


# --- photo payloads -------------------------------------------------------------

def new_content_key(rng=None) -> bytes:
    return _rng(rng).bytes(CONTENT_KEY_BYTES)


def new_nonce(rng=None) -> bytes:
    return _rng(rng).bytes(NONCE_BYTES)


def encrypt_photo(photo: bytes, content_key: bytes, nonce: bytes) -> bytes:
    return AESGCM(content_key).encrypt(nonce, bytes(photo), None)


def decrypt_photo(ciphertext: bytes, content_key: bytes, nonce: bytes) -> bytes:
    try:
        return AESGCM(content_key).decrypt(nonce, bytes(ciphertext), None)
    except InvalidTag:
        raise PhotoAuthError("photo ciphertext failed authentication") from None


def seal_photo(photo_id: str, photo: bytes, members: Iterable[str], reg: IdentityRegistry,
               label_key: AspeKey, content_key: bytes, rng=None) -> PhotoRecord:
    """User-side packaging of one photo: encrypted bytes plus encrypted label vector."""
    rng = _rng(rng)
    label = build_label_vector(reg, members)
    nonce = new_nonce(rng)
    return PhotoRecord(photo_id, nonce, encrypt_photo(photo, content_key, nonce),
                       encrypt_label(label_key, label, rng))


class PhotoStore:
    """Append-only cloud store. Only ciphertext-typed records are held."""

    def __init__(self, t: int | None = None):
        self.t = t
        self._records: list[PhotoRecord] = []
        self._nonces: set[bytes] = set()
        self._ids: set[str] = set()
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._records)

    def records(self) -> tuple[PhotoRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def add(self, records: Iterable[PhotoRecord]) -> None:
        """Append all records or none."""
        records = list(records)
        with self._lock:
            t = self.t
            nonces, ids = set(), set()
            for r in records:
                if t is None:
                    t = r.enc_label.dim
                if r.enc_label.dim != t:
                    raise DimensionError(f"label dim {r.enc_label.dim} != store dim {t}")
                if r.nonce in self._nonces or r.nonce in nonces:
                    raise NonceReuseError(f"nonce reused by photo {r.photo_id!r}")
                if r.photo_id in self._ids or r.photo_id in ids:
                    raise DuplicatePhotoError(f"photo id {r.photo_id!r} already stored")
                nonces.add(r.nonce)
                ids.add(r.photo_id)
            self.t = t
            self._records.extend(records)
            self._nonces |= nonces
            self._ids |= ids

    def match(self, eq: EncQueryVector, lam: int, tol: float = MATCH_TOL) -> list[PhotoRecord]:
        records = self.records()
        if records and self.t != eq.dim:
            raise DimensionError(f"query dim {eq.dim} != store dim {self.t}")
        hits = set(match(records, eq, lam, tol))
        return [r for r in records if r.photo_id in hits]


# --- index file ---------------------------------------------------------------

def write_record(w: Writer, r: PhotoRecord) -> None:
    w.text(r.photo_id).raw(r.nonce).blob(r.ciphertext)
    w.f64_array(r.enc_label.part1).f64_array(r.enc_label.part2)


def read_record(rd: Reader, t: int) -> PhotoRecord:
    start = rd.pos
    pid = rd.text()
    nonce = rd.take(NONCE_BYTES)
    ct = rd.blob()
    if 16 * t > rd.remaining():
        raise TruncatedError("truncated label ciphertext", rd.pos)
    try:
        return PhotoRecord(pid, nonce, ct, EncDataVector(rd.f64_array(t), rd.f64_array(t)))
    except ValueError as exc:
        raise FormatError(str(exc), start) from None


def index_to_bytes(store: PhotoStore) -> bytes:
    records = store.records()
    t = store.t or 0
    w = Writer().raw(INDEX_MAGIC).u16(INDEX_VERSION).u16(t).u32(len(records))
    for r in records:
        write_record(w, r)
    return w.getvalue()


def index_from_bytes(data: bytes) -> PhotoStore:
    rd = Reader(data)
    rd.magic(INDEX_MAGIC)
    pos = rd.pos
    version = rd.u16()
    if version != INDEX_VERSION:
        raise VersionError(f"unsupported index version {version}", pos)
    t, count = rd.u16(), rd.u32()
    records = [read_record(rd, t) for _ in range(count)]
    rd.expect_end()
    store = PhotoStore(t or None)
    try:
        store.add(records)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    return store


def save_index(store: PhotoStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(index_to_bytes(store))


def load_index(path) -> PhotoStore:
    with open(path, "rb") as fh:
        return index_from_bytes(fh.read())
