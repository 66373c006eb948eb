"""Sign-domain primitives: packed sign vectors, sign quantization, seeded streams.

A :class:`SignVector` stores one bit per coordinate in little-endian 64-bit
words. Coordinate ``n`` lives in bit ``n % 64`` of word ``n // 64``; a clear
bit encodes ``+1`` and a set bit encodes ``-1``. Padding bits past ``length``
are always zero, so two vectors are equal iff their word arrays are equal.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass

import numpy as np

WORD_BITS = 64
_WORD_DTYPE = np.dtype("<u8")


def _num_words(length: int) -> int:
    return -(-length // WORD_BITS)


@dataclass(frozen=True, eq=False)
class SignVector:
    """Immutable packed vector of +/-1 signs."""

    length: int
    words: np.ndarray

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError(f"SignVector length must be positive, got {self.length}")
        words = np.ascontiguousarray(self.words, dtype=_WORD_DTYPE)
        if words.shape != (_num_words(self.length),):
            raise ValueError(
                f"expected {_num_words(self.length)} words for length {self.length}, "
                f"got shape {words.shape}"
            )
        tail = self.length % WORD_BITS
        if tail and int(words[-1]) >> tail:
            raise ValueError("padding bits past length must be zero")
        words = words.copy()
        words.flags.writeable = False
        object.__setattr__(self, "words", words)

    @classmethod
    def from_signs(cls, signs) -> "SignVector":
        return pack(signs)

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "SignVector":
        """Pack a boolean array where ``True`` means ``-1``."""
        bits = np.asarray(bits, dtype=bool).ravel()
        n = bits.size
        padded = np.zeros(_num_words(n) * WORD_BITS, dtype=bool)
        padded[:n] = bits
        words = np.packbits(padded, bitorder="little").view(_WORD_DTYPE)
        return cls(n, words)

    @classmethod
    def frombytes(cls, data: bytes, length: int) -> "SignVector":
        return cls(length, np.frombuffer(data, dtype=_WORD_DTYPE))

    def tobytes(self) -> bytes:
        return self.words.tobytes()

    @property
    def storage_bits(self) -> int:
        """Bits on the wire including padding to the word boundary."""
        return self.words.size * WORD_BITS

    def bits(self) -> np.ndarray:
        """Boolean array of length ``length``; ``True`` marks a ``-1`` coordinate."""
        raw = np.unpackbits(self.words.view(np.uint8), bitorder="little", count=self.length)
        return raw.astype(bool)

    def to_signs(self) -> np.ndarray:
        return unpack(self)

    def flip(self, mask) -> "SignVector":
        """Negate the coordinates where ``mask`` is true."""
        flip_words = SignVector.from_bits(mask)
        if flip_words.length != self.length:
            raise ValueError(f"mask length {flip_words.length} != vector length {self.length}")
        return SignVector(self.length, self.words ^ flip_words.words)

    def hamming(self, other: "SignVector") -> int:
        if other.length != self.length:
            raise ValueError(f"length mismatch: {self.length} vs {other.length}")
        return int(np.bitwise_count(self.words ^ other.words).sum())

    def __neg__(self) -> "SignVector":
        words = ~self.words
        tail = self.length % WORD_BITS
        if tail:
            words[-1] &= np.uint64((1 << tail) - 1)
        return SignVector(self.length, words)

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other) -> bool:
        if not isinstance(other, SignVector):
            return NotImplemented
        return self.length == other.length and np.array_equal(self.words, other.words)

    def __hash__(self) -> int:
        return hash((self.length, self.words.tobytes()))

    def __repr__(self) -> str:
        preview = "".join("+" if s > 0 else "-" for s in self.to_signs()[:16])
        more = "..." if self.length > 16 else ""
        return f"SignVector(length={self.length}, signs={preview}{more})"


def pack(signs) -> SignVector:
    """Pack a vector whose entries are all -1 or +1."""
    arr = np.asarray(signs).ravel()
    if arr.size == 0:
        raise ValueError("cannot pack an empty sign vector")
    bad = np.flatnonzero((arr != 1) & (arr != -1))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"element {i} is {arr[i]!r}, expected -1 or +1")
    return SignVector.from_bits(arr < 0)


def unpack(vector: SignVector) -> np.ndarray:
    """Return the signs as an ``int8`` array of -1/+1."""
    return (1 - 2 * vector.bits().astype(np.int8)).astype(np.int8)


def sign_quantize(gradient) -> SignVector:
    """One-bit quantization; exact zeros map to +1."""
    g = np.asarray(gradient, dtype=np.float64).ravel()
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"non-finite gradient coordinate at index {i}: {g[i]}")
    return SignVector.from_bits(g < 0)


def stack_signs(vectors) -> np.ndarray:
    """Unpack a list of equal-length sign vectors into an ``(M, N)`` int8 matrix.

    An ``(M, N)`` array of +/-1 is accepted as is.
    """
    if isinstance(vectors, np.ndarray):
        if vectors.ndim != 2 or vectors.shape[0] == 0 or vectors.shape[1] == 0:
            raise ValueError(f"expected a non-empty (M, N) sign matrix, got shape {vectors.shape}")
        if not np.all(np.abs(vectors) == 1):
            raise ValueError("sign matrix entries must be -1 or +1")
        return vectors.astype(np.int8, copy=False)
    vectors = list(vectors)
    if not vectors:
        raise ValueError("need at least one sign vector")
    n = vectors[0].length
    for m, v in enumerate(vectors):
        if v.length != n:
            raise ValueError(f"vector {m} has length {v.length}, expected {n}")
    return np.stack([unpack(v) for v in vectors])


def _purpose_key(purpose: str | int) -> int:
    if isinstance(purpose, int):
        return purpose
    return zlib.crc32(purpose.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream keyed by ``(seed, worker, iteration, purpose)``.

    Every call to :meth:`generator` returns a fresh generator in the same
    initial state, so deriving a stream never touches shared mutable state.
    """

    seed: int
    worker: int = 0
    iteration: int = 0
    purpose: str | int = "default"

    def __post_init__(self):
        if self.worker < 0 or self.iteration < 0:
            raise ValueError("worker and iteration indices must be non-negative")

    @property
    def stream_id(self) -> tuple:
        return (self.worker, self.iteration, self.purpose)

    def key(self) -> int:
        """128-bit Philox key derived by hashing the full stream identity."""
        raw = struct.pack(
            "<QQQQ",
            self.seed & (2**64 - 1),
            self.worker,
            self.iteration,
            _purpose_key(self.purpose) & (2**64 - 1),
        )
        return int.from_bytes(hashlib.blake2b(raw, digest_size=16).digest(), "little")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key()))

    def child(self, worker: int | None = None, iteration: int | None = None,
              purpose: str | int | None = None) -> "RngStream":
        return RngStream(
            self.seed,
            self.worker if worker is None else worker,
            self.iteration if iteration is None else iteration,
            self.purpose if purpose is None else purpose,
        )

    def random(self, size) -> np.ndarray:
        return self.generator().random(size)
