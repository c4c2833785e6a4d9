"""Slice-preserving substitution cipher over ASCII digits and letters.

Each character class (digits, upper case, lower case) is rotated by its own
keyed amount; everything else passes through.  The cipher is position
independent, so encrypting a slice equals slicing the ciphertext.

This is a classical substitution cipher and falls to frequency analysis.  It
keeps model-visible values unlinkable to their plaintext without a key; it
is not a replacement for a vetted format-preserving block cipher.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import secrets
from dataclasses import dataclass

CLASSES = ("0123456789", "ABCDEFGHIJKLMNOPQRSTUVWXYZ", "abcdefghijklmnopqrstuvwxyz")
_LOOKUP = {ch: (ci, idx) for ci, alphabet in enumerate(CLASSES) for idx, ch in enumerate(alphabet)}


class IndexOutOfRange(IndexError):
    pass


def char_class(ch: str) -> int | None:
    """Index of the class holding ``ch``, or None for pass-through characters."""
    hit = _LOOKUP.get(ch)
    return None if hit is None else hit[0]


def _prf(secret: bytes, label: bytes) -> int:
    return int.from_bytes(hmac.new(secret, label, hashlib.sha256).digest(), "big")


@dataclass(frozen=True)
class FpetsKey:
    rot_digit: int = 0
    rot_upper: int = 0
    rot_lower: int = 0

    def __post_init__(self) -> None:
        for rot, size in zip(self.rotations, (10, 26, 26)):
            if not 0 <= rot < size:
                raise ValueError(f"rotation {rot} out of range for class of size {size}")

    @property
    def rotations(self) -> tuple[int, int, int]:
        return (self.rot_digit, self.rot_upper, self.rot_lower)

    @classmethod
    def from_secret(cls, secret: bytes) -> "FpetsKey":
        """Derive rotations from a 128-bit secret with HMAC-SHA256.

        The all-zero secret is reserved for the identity key.
        """
        if len(secret) != 16:
            raise ValueError("secret must be 16 bytes")
        if not any(secret):
            return cls()
        return cls(
            _prf(secret, b"fpets/digit") % 10,
            _prf(secret, b"fpets/upper") % 26,
            _prf(secret, b"fpets/lower") % 26,
        )

    @classmethod
    def generate(cls, rng: random.Random | None = None) -> "FpetsKey":
        """Fresh random key with every rotation non-zero.

        A zero rotation leaves that class in the clear, which a shield key
        must never do.  ``rng`` is for reproducible test runs only.
        """
        while True:
            secret = rng.randbytes(16) if rng is not None else secrets.token_bytes(16)
            key = cls.from_secret(secret)
            if all(key.rotations):
                return key

    @classmethod
    def from_hex(cls, key_hex: str) -> "FpetsKey":
        key_hex = key_hex.strip().lower()
        if len(key_hex) != 32:
            raise ValueError("key must be 32 hex characters")
        return cls.from_secret(bytes.fromhex(key_hex))

    def forward(self, cls_idx: int, idx: int, pos: int | None = None) -> int:
        return (idx + self.rotations[cls_idx] + (pos or 0)) % len(CLASSES[cls_idx])

    def backward(self, cls_idx: int, idx: int, pos: int | None = None) -> int:
        return (idx - self.rotations[cls_idx] - (pos or 0)) % len(CLASSES[cls_idx])


@dataclass(frozen=True)
class FpetsPermutationKey:
    """Keyed arbitrary permutation per class; a stronger drop-in for rotations."""

    tables: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]

    @classmethod
    def from_secret(cls, secret: bytes) -> "FpetsPermutationKey":
        if len(secret) != 16:
            raise ValueError("secret must be 16 bytes")
        tables = []
        for ci, alphabet in enumerate(CLASSES):
            rng = random.Random(_prf(secret, b"fpets/perm/%d" % ci))
            perm = list(range(len(alphabet)))
            rng.shuffle(perm)
            tables.append(tuple(perm))
        return cls(tuple(tables))  # type: ignore[arg-type]

    def forward(self, cls_idx: int, idx: int, pos: int | None = None) -> int:
        n = len(CLASSES[cls_idx])
        return self.tables[cls_idx][(idx + (pos or 0)) % n]

    def backward(self, cls_idx: int, idx: int, pos: int | None = None) -> int:
        n = len(CLASSES[cls_idx])
        return (self.tables[cls_idx].index(idx) - (pos or 0)) % n


def _transform(key, text: str, offset: int | None, decrypt: bool) -> str:
    step = key.backward if decrypt else key.forward
    out = []
    for k, ch in enumerate(text):
        hit = _LOOKUP.get(ch)
        if hit is None:
            out.append(ch)
            continue
        ci, idx = hit
        pos = None if offset is None else offset + k
        out.append(CLASSES[ci][step(ci, idx, pos)])
    return "".join(out)


def encrypt(key: FpetsKey | FpetsPermutationKey, m: str, *, offset: int | None = None) -> str:
    """Encrypt ``m`` class-wise.

    With ``offset`` set, the tweaked mode also shifts each character by its
    absolute position ``offset + k``; a slice ``m[i:j]`` must then be
    encrypted with ``offset=i`` to match the full ciphertext.
    """
    return _transform(key, m, offset, decrypt=False)


def decrypt(key: FpetsKey | FpetsPermutationKey, c: str, *, offset: int | None = None) -> str:
    return _transform(key, c, offset, decrypt=True)


def slice_matches(key: FpetsKey | FpetsPermutationKey, m: str, i: int, j: int) -> bool:
    if not 0 <= i <= j <= len(m):
        raise IndexOutOfRange(f"slice [{i}, {j}) outside message of length {len(m)}")
    return encrypt(key, m[i:j]) == encrypt(key, m)[i:j]


def same_format(a: str, b: str) -> bool:
    """True when ``a`` and ``b`` agree in length and per-position class."""
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        cx, cy = char_class(x), char_class(y)
        if cx != cy or (cx is None and x != y):
            return False
    return True
