"""Somewhat-homomorphic symmetric encryption over the integers (DGHV style).

A ciphertext of ``m`` is ``c = m + t*r + p*q`` for a secret odd ``p``.
Additions and multiplications act on ``c`` directly; every ciphertext
carries a worst-case bound on ``|m + t*r|`` and decryption refuses once that
bound reaches ``p/2``.  There is no bootstrapping, so depth is bounded.
"""

from __future__ import annotations

import hashlib
import json
import random
import secrets
from dataclasses import dataclass
from fractions import Fraction

TOKEN_PREFIX = "she1:"
GUARANTEED_MULT_DEPTH = 2
GUARANTEED_ADD_LOG2 = 20


class SheError(Exception):
    pass


class InvalidParams(SheError):
    pass


class PlaintextOutOfRange(SheError, ValueError):
    pass


class NoiseBudgetExceeded(SheError):
    pass


class ParamsMismatch(SheError):
    pass


@dataclass(frozen=True)
class SheParams:
    t: int = 2**16
    eta: int = 512
    rho: int = 32
    gamma: int = 2048

    @property
    def fresh_noise(self) -> int:
        return self.t * 2**self.rho + self.t

    def digest(self) -> str:
        raw = f"t={self.t};eta={self.eta};rho={self.rho};gamma={self.gamma}".encode()
        return hashlib.sha256(raw).hexdigest()[:8]

    def validate(self) -> None:
        """Check that ``p`` leaves room for the guaranteed circuit size.

        Two inequalities are enforced: the sizing rule
        ``t * 2**(d*(rho + bits(t)) + 20) < 2**(eta - 2)`` and the bound
        actually reached by the noise tracker on the worst depth-``d``
        circuit, ``2**20 * fresh_noise**(2**d) < 2**(eta - 2)``.  The second
        implies the first.
        """
        if self.t < 2 or self.rho < 1 or self.eta < 2:
            raise InvalidParams(f"degenerate parameters {self}")
        if self.gamma <= self.eta:
            raise InvalidParams(f"gamma ({self.gamma}) must exceed eta ({self.eta})")
        d = GUARANTEED_MULT_DEPTH
        budget = 2 ** (self.eta - 2)
        sizing = self.t * 2 ** (d * (self.rho + self.t.bit_length()) + GUARANTEED_ADD_LOG2)
        if not sizing < budget:
            raise InvalidParams(
                f"t*2^({d}*(rho+bits(t))+{GUARANTEED_ADD_LOG2}) < 2^(eta-2) violated "
                f"for t={self.t}, rho={self.rho}, eta={self.eta}"
            )
        worst = 2**GUARANTEED_ADD_LOG2 * self.fresh_noise ** (2**d)
        if not worst < budget:
            raise InvalidParams(
                f"2^{GUARANTEED_ADD_LOG2}*(t*2^rho+t)^{2**d} < 2^(eta-2) violated "
                f"for t={self.t}, rho={self.rho}, eta={self.eta}"
            )


@dataclass(frozen=True)
class SheKey:
    p: int
    params: SheParams

    def __post_init__(self) -> None:
        if self.p % 2 == 0 or self.p.bit_length() != self.params.eta:
            raise InvalidParams("p must be odd with exactly eta bits")


@dataclass(frozen=True)
class SheCiphertext:
    c: int
    noise_bound: int
    params_digest: str = ""

    def serialize(self) -> str:
        return f"{TOKEN_PREFIX}{self.c:x}:{self.noise_bound:x}:{self.params_digest}"

    @classmethod
    def parse(cls, token: str) -> "SheCiphertext":
        if not token.startswith(TOKEN_PREFIX):
            raise ValueError(f"not a she1 token: {token[:16]!r}")
        parts = token[len(TOKEN_PREFIX):].split(":")
        if len(parts) != 3:
            raise ValueError("malformed she1 token")
        return cls(int(parts[0], 16), int(parts[1], 16), parts[2])


def _rng(seed) -> random.Random:
    return secrets.SystemRandom() if seed is None else random.Random(seed)


def keygen(params: SheParams = SheParams(), seed=None) -> SheKey:
    params.validate()
    rng = _rng(seed)
    p = rng.getrandbits(params.eta) | (1 << (params.eta - 1)) | 1
    return SheKey(p, params)


def encrypt(key: SheKey, m: int, rng: random.Random | None = None) -> SheCiphertext:
    params = key.params
    if not 0 <= m < params.t:
        raise PlaintextOutOfRange(f"plaintext {m} outside [0, {params.t})")
    rng = rng or secrets.SystemRandom()
    bound = 2**params.rho
    r = rng.randrange(-bound + 1, bound)
    q = rng.randrange(1, 2 ** (params.gamma - params.eta))
    return SheCiphertext(m + params.t * r + key.p * q, params.fresh_noise, params.digest())


def _check_params(key: SheKey, ct: SheCiphertext) -> None:
    if ct.params_digest and ct.params_digest != key.params.digest():
        raise ParamsMismatch("ciphertext was produced under different parameters")


def decrypt(key: SheKey, ct: SheCiphertext) -> int:
    _check_params(key, ct)
    if 2 * ct.noise_bound >= key.p:
        raise NoiseBudgetExceeded(
            f"noise bound has {ct.noise_bound.bit_length()} bits; p/2 has {key.p.bit_length() - 1}"
        )
    residue = ct.c % key.p
    if residue > key.p // 2:
        residue -= key.p
    return residue % key.params.t


def _combine_digest(a: SheCiphertext, b: SheCiphertext) -> str:
    if a.params_digest and b.params_digest and a.params_digest != b.params_digest:
        raise ParamsMismatch("operands were produced under different parameters")
    return a.params_digest or b.params_digest


def add(a: SheCiphertext, b: SheCiphertext) -> SheCiphertext:
    return SheCiphertext(a.c + b.c, a.noise_bound + b.noise_bound, _combine_digest(a, b))


def mul(a: SheCiphertext, b: SheCiphertext) -> SheCiphertext:
    return SheCiphertext(a.c * b.c, a.noise_bound * b.noise_bound, _combine_digest(a, b))


def noise_margin(ct: SheCiphertext, key: SheKey) -> Fraction:
    """Fraction of the noise budget spent; below 1 means decryptable."""
    return min(Fraction(1), Fraction(2 * ct.noise_bound, key.p))


def key_to_json(key: SheKey) -> str:
    p = key.params
    return json.dumps({"p": f"{key.p:x}", "t": p.t, "eta": p.eta, "rho": p.rho, "gamma": p.gamma})


def key_from_json(text: str) -> SheKey:
    obj = json.loads(text)
    params = SheParams(obj["t"], obj["eta"], obj["rho"], obj["gamma"])
    return SheKey(int(obj["p"], 16), params)
