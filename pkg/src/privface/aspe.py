"""Asymmetric scalar-product-preserving encryption (ASPE).

A key is two invertible matrices plus a bit vector that steers how each
plaintext vector is split in two before encryption. Database-side vectors
are split by one rule and multiplied by the transposed matrices; query-side
vectors are split by the dual rule and multiplied by the inverses. Only the
inner product of a data/query pair survives:

    (M1^T a')·(M1^-1 b') + (M2^T a'')·(M2^-1 b'') = a'·b' + a''·b'' = a·b

There is deliberately no decryption routine.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from .binio import FormatError, Reader, TruncatedError, VersionError, Writer

KEY_MAGIC = b"ASPE"
KEY_VERSION = 1

# condition number bound of generated matrices: orthogonal factor times diag in [0.5, 2]
COND_BOUND = 4.0
_DIAG_LOW, _DIAG_HIGH = 0.5, 2.0

PURPOSES = ("generic", "detector", "matching")


class DimensionError(ValueError):
    pass


class KeyPurposeError(ValueError):
    pass


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AspeKey:
    """Secret split key. Holds both matrices, their cached inverses and the split bits."""

    mat1: np.ndarray
    mat2: np.ndarray
    mat1_inv: np.ndarray
    mat2_inv: np.ndarray
    split: np.ndarray
    purpose: str = "generic"

    def __post_init__(self):
        dim = len(self.split)
        for name in ("mat1", "mat2", "mat1_inv", "mat2_inv"):
            m = _readonly(getattr(self, name))
            if m.shape != (dim, dim):
                raise DimensionError(f"{name} has shape {m.shape}, expected {(dim, dim)}")
            object.__setattr__(self, name, m)
        split = np.array(self.split, dtype=np.uint8, copy=True)
        if dim < 1 or np.any(split > 1):
            raise ValueError("split must be a non-empty bit vector")
        split.setflags(write=False)
        object.__setattr__(self, "split", split)
        if self.purpose not in PURPOSES:
            raise KeyPurposeError(f"unknown key purpose {self.purpose!r}")

    @property
    def dim(self) -> int:
        return len(self.split)

    @classmethod
    def from_matrices(cls, mat1, mat2, split, purpose: str = "generic") -> "AspeKey":
        mat1 = np.asarray(mat1, dtype=np.float64)
        mat2 = np.asarray(mat2, dtype=np.float64)
        return cls(mat1, mat2, np.linalg.inv(mat1), np.linalg.inv(mat2), split, purpose)

    def __eq__(self, other):
        if not isinstance(other, AspeKey):
            return NotImplemented
        return self.purpose == other.purpose and all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("split", "mat1", "mat2", "mat1_inv", "mat2_inv")
        )

    def __repr__(self):
        return f"AspeKey(dim={self.dim}, purpose={self.purpose!r})"

    def require(self, purpose: str) -> None:
        """Refuse use of a key tagged for a different role. Generic keys pass."""
        if self.purpose not in ("generic", purpose):
            raise KeyPurposeError(f"{self.purpose} key used where a {purpose} key is required")


def random_invertible(dim: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Return (M, M^-1) with M = Q·diag(d), Q Haar-orthogonal, d uniform in [0.5, 2]."""
    rng = _rng(rng)
    while True:
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
        d = rng.uniform(_DIAG_LOW, _DIAG_HIGH, size=dim)
        if d.max() / d.min() <= COND_BOUND:
            return q * d, (q / d).T


def keygen(dim: int, rng=None, purpose: str = "generic") -> AspeKey:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = _rng(rng)
    m1, m1_inv = random_invertible(dim, rng)
    m2, m2_inv = random_invertible(dim, rng)
    split = rng.integers(0, 2, size=dim, dtype=np.uint8)
    return AspeKey(m1, m2, m1_inv, m2_inv, split, purpose)


# --- splitting ---------------------------------------------------------------

def _as_vector(v) -> np.ndarray:
    a = np.asarray(v)
    if a.dtype == object:
        return a
    return a.astype(np.float64)


def _split(v, keep_mask: np.ndarray, rng, noise):
    v = _as_vector(v)
    if v.shape[-1] != keep_mask.shape[-1]:
        raise DimensionError(f"vector length {v.shape[-1]} != split length {keep_mask.shape[-1]}")
    if noise is None:
        scale = 1.0 + np.max(np.abs(v), axis=-1, keepdims=True)
        noise = _rng(rng).uniform(-1.0, 1.0, size=v.shape) * scale
    else:
        noise = np.asarray(noise, dtype=v.dtype)
        if noise.shape != v.shape:
            raise DimensionError("noise shape must match the vector")
    half = v / 2
    first = np.where(keep_mask, v, half - noise)
    second = np.where(keep_mask, v, half + noise)
    return first, second


def split_data(v, split, rng=None, noise=None):
    """Data-side split: duplicate where split is 1, randomize into halves where it is 0.

    ``noise`` overrides the per-component random values. Object arrays of
    ``fractions.Fraction`` are handled exactly.
    """
    return _split(v, np.asarray(split) == 1, rng, noise)


def split_query(v, split, rng=None, noise=None):
    """Query-side split: the dual of :func:`split_data` (duplicate where split is 0)."""
    return _split(v, np.asarray(split) == 0, rng, noise)


# --- ciphertexts ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _EncVector:
    part1: np.ndarray
    part2: np.ndarray

    KIND: ClassVar[int] = 0

    def __post_init__(self):
        p1, p2 = _readonly(self.part1), _readonly(self.part2)
        if p1.ndim != 1 or p1.shape != p2.shape:
            raise DimensionError("ciphertext parts must be equal-length vectors")
        object.__setattr__(self, "part1", p1)
        object.__setattr__(self, "part2", p2)

    @property
    def dim(self) -> int:
        return len(self.part1)

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return np.array_equal(self.part1, other.part1) and np.array_equal(self.part2, other.part2)

    def __hash__(self):
        return hash((self.KIND, self.part1.tobytes(), self.part2.tobytes()))

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"

    def write(self, w: Writer) -> None:
        w.u8(self.KIND).u32(self.dim).f64_array(self.part1).f64_array(self.part2)

    def to_bytes(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader, dim: int | None = None):
        start = r.pos
        kind = r.u8()
        if kind not in _KINDS:
            raise FormatError(f"unknown ciphertext kind 0x{kind:02x}", start)
        if kind != cls.KIND and cls is not _EncVector:
            raise FormatError(f"expected {cls.__name__}, got {_KINDS[kind].__name__}", start)
        n = r.u32()
        if dim is not None and n != dim:
            raise FormatError(f"ciphertext dim {n}, expected {dim}", start)
        if 16 * n > r.remaining():
            raise TruncatedError(f"truncated ciphertext of dim {n}", r.pos)
        return _KINDS[kind](r.f64_array(n), r.f64_array(n))

    @classmethod
    def from_bytes(cls, data: bytes):
        r = Reader(data)
        out = cls.read(r)
        r.expect_end()
        return out


class EncDataVector(_EncVector):
    """Database-side ciphertext (M1^T v', M2^T v'')."""

    KIND: ClassVar[int] = 0x01


class EncQueryVector(_EncVector):
    """Query-side ciphertext (M1^-1 v', M2^-1 v'')."""

    KIND: ClassVar[int] = 0x02


_KINDS = {EncDataVector.KIND: EncDataVector, EncQueryVector.KIND: EncQueryVector}


def read_ciphertext(r: Reader, dim: int | None = None):
    return _EncVector.read(r, dim)


def _check_dim(key: AspeKey, v: np.ndarray) -> None:
    if v.shape[-1] != key.dim:
        raise DimensionError(f"vector length {v.shape[-1]} != key dim {key.dim}")


def encrypt_data_many(key: AspeKey, rows, rng=None) -> list[EncDataVector]:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    _check_dim(key, rows)
    a, b = split_data(rows, key.split, rng)
    p1, p2 = a @ key.mat1, b @ key.mat2       # row form of M^T v
    return [EncDataVector(x, y) for x, y in zip(p1, p2)]


def encrypt_query_many(key: AspeKey, rows, rng=None) -> list[EncQueryVector]:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    _check_dim(key, rows)
    a, b = split_query(rows, key.split, rng)
    p1, p2 = a @ key.mat1_inv.T, b @ key.mat2_inv.T
    return [EncQueryVector(x, y) for x, y in zip(p1, p2)]


def encrypt_data(key: AspeKey, v, rng=None) -> EncDataVector:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError("expected a single vector")
    return encrypt_data_many(key, v[None, :], rng)[0]


def encrypt_query(key: AspeKey, v, rng=None) -> EncQueryVector:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError("expected a single vector")
    return encrypt_query_many(key, v[None, :], rng)[0]


def secure_inner(ed: EncDataVector, eq: EncQueryVector) -> float:
    if not isinstance(ed, EncDataVector) or not isinstance(eq, EncQueryVector):
        raise TypeError("secure_inner takes (EncDataVector, EncQueryVector)")
    if ed.dim != eq.dim:
        raise DimensionError(f"ciphertext dims differ: {ed.dim} vs {eq.dim}")
    return float(ed.part1 @ eq.part1 + ed.part2 @ eq.part2)


# --- key files ---------------------------------------------------------------

def key_to_bytes(key: AspeKey) -> bytes:
    w = Writer().raw(KEY_MAGIC).u16(KEY_VERSION).u32(key.dim)
    w.u8(PURPOSES.index(key.purpose))
    w.raw(np.packbits(key.split, bitorder="little").tobytes())
    for m in (key.mat1, key.mat2, key.mat1_inv, key.mat2_inv):
        w.f64_array(m.ravel())
    return w.getvalue()


def key_from_bytes(data: bytes) -> AspeKey:
    r = Reader(data)
    r.magic(KEY_MAGIC)
    pos = r.pos
    version = r.u16()
    if version != KEY_VERSION:
        raise VersionError(f"unsupported key file version {version}", pos)
    dim = r.u32()
    if dim < 1:
        raise FormatError("key dim must be >= 1", pos + 2)
    pos = r.pos
    purpose = r.u8()
    if purpose >= len(PURPOSES):
        raise FormatError(f"unknown key purpose {purpose}", pos)
    nbytes = (dim + 7) // 8
    if nbytes + 32 * dim * dim > r.remaining():
        raise TruncatedError(f"truncated key body for dim {dim}", r.pos)
    split = np.unpackbits(np.frombuffer(r.take(nbytes), dtype=np.uint8), bitorder="little")[:dim]
    mats = [r.f64_array(dim * dim).reshape(dim, dim) for _ in range(4)]
    r.expect_end()
    return AspeKey(*mats, split=split, purpose=PURPOSES[purpose])


def save_key(key: AspeKey, path) -> None:
    with open(path, "wb") as fh:
        fh.write(key_to_bytes(key))


def load_key(path) -> AspeKey:
    with open(path, "rb") as fh:
        return key_from_bytes(fh.read())
