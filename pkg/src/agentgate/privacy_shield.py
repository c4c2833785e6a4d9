"""Keep sensitive values out of model-bound text.

Detectors find SSNs, Luhn-valid card numbers and configurable patterns.
:func:`scrub` swaps each match for a whitewashed value, an FPETS ciphertext
or an SHE token and records the inverse in a per-session
:class:`ShieldLedger`; :func:`restore` maps model output back, including
slices of FPETS tokens.
"""

from __future__ import annotations

import logging
import random
import re
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from . import fpets, she

logger = logging.getLogger(__name__)

MODES = ("whitewash", "fpets", "she", "block")
MIN_SLICE = 3
# SHE tokens carry whole card numbers, so the shield uses a wide plaintext space.
SHIELD_SHE_PARAMS = she.SheParams(t=2**64)

_SSN_RE = re.compile(r"(?<![A-Za-z0-9])(?:\d{3}-\d{2}-\d{4}|\d{9})(?![A-Za-z0-9])")
_RUN_RE = re.compile(r"[A-Za-z0-9](?:[A-Za-z0-9-]*[A-Za-z0-9])?")


class BlockedContent(Exception):
    def __init__(self, detector: str):
        super().__init__(f"blocked by detector {detector!r}")
        self.detector = detector


class RuleFileError(ValueError):
    pass


def luhn_valid(digits: str) -> bool:
    total = 0
    for k, ch in enumerate(reversed(digits)):
        d = int(ch)
        if k % 2:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return total % 10 == 0


def _card_spans(text: str) -> list[tuple[int, int]]:
    """Luhn-valid runs of 13-19 digits, single space or dash separators allowed.

    Every boundary start is tried, so an invalid candidate never hides a
    valid number beginning inside it.  The longest valid run at a start wins.
    """
    spans = []
    n = len(text)
    i = 0
    while i < n:
        if not text[i].isdigit() or (i and text[i - 1].isalnum()) or not text[i].isascii():
            i += 1
            continue
        digits = []
        best = None
        k = i
        while k < n and len(digits) < 19:
            ch = text[k]
            if ch.isascii() and ch.isdigit():
                digits.append(ch)
                k += 1
                end_ok = k == n or not text[k].isalnum()
                if end_ok and len(digits) >= 13 and luhn_valid("".join(digits)):
                    best = k
            elif ch in " -" and digits and k + 1 < n and text[k + 1].isascii() and text[k + 1].isdigit():
                k += 1
            else:
                break
        if best is not None:
            spans.append((i, best))
            i = best
        else:
            i += 1
    return spans


@dataclass(frozen=True)
class Match:
    detector: str
    start: int
    end: int
    text: str


@dataclass(frozen=True)
class Detector:
    name: str
    kind: str  # ssn | luhn | pattern
    pattern: str = ""
    numeric: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ("ssn", "luhn", "pattern"):
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.kind == "pattern":
            re.compile(self.pattern)

    def find(self, text: str) -> list[Match]:
        if self.kind == "ssn":
            return [Match(self.name, m.start(), m.end(), m.group()) for m in _SSN_RE.finditer(text)]
        if self.kind == "luhn":
            return [Match(self.name, a, b, text[a:b]) for a, b in _card_spans(text)]
        return [Match(self.name, m.start(), m.end(), m.group())
                for m in re.finditer(self.pattern, text) if m.end() > m.start()]


DEFAULT_DETECTORS = (
    Detector("ssn", "ssn"),
    Detector("credit_card", "luhn"),
)


def load_rules(path: str | Path) -> list[Detector]:
    """Read ``name<TAB>kind<TAB>spec`` lines; ``#`` starts a comment."""
    detectors = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2 or len(parts) > 3:
            raise RuleFileError(f"{path}:{lineno}: expected name<TAB>kind<TAB>spec")
        name, kind = parts[0].strip(), parts[1].strip()
        spec = parts[2] if len(parts) == 3 else ""
        try:
            numeric = kind != "pattern" or bool(re.fullmatch(r"[\\d\[\]0-9{},\-\s?+*()|^$]*", spec))
            detectors.append(Detector(name, kind, spec, numeric))
        except (ValueError, re.error) as exc:
            raise RuleFileError(f"{path}:{lineno}: {exc}") from None
    return detectors


def find_all(detectors: Iterable[Detector], text: str) -> list[Match]:
    """Non-overlapping matches; earlier start wins, then the longer match."""
    found = [m for d in detectors for m in d.find(text)]
    found.sort(key=lambda m: (m.start, -(m.end - m.start)))
    out: list[Match] = []
    last_end = -1
    for m in found:
        if m.start >= last_end:
            out.append(m)
            last_end = m.end
    return out


@dataclass(frozen=True)
class ShieldPolicy:
    mode: str = "fpets"
    overrides: dict[str, str] = field(default_factory=dict)
    detectors: tuple[Detector, ...] = DEFAULT_DETECTORS

    def __post_init__(self) -> None:
        for mode in (self.mode, *self.overrides.values()):
            if mode not in MODES:
                raise ValueError(f"unknown shield mode {mode!r}")
        for det in self.detectors:
            if self.mode_for(det.name) == "she" and not det.numeric:
                raise ValueError(f"she mode needs a numeric detector, {det.name!r} is not")

    def mode_for(self, detector: str) -> str:
        return self.overrides.get(detector, self.mode)


@dataclass(frozen=True)
class LedgerEntry:
    token_id: str
    token: str
    detector: str
    plaintext: Optional[str]  # None for values derived under the SHE key
    mode: str


class AuditLog:
    """One line per scrub/restore, naming token ids only."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def write(self, op: str, session_id: str, token_ids: Iterable[str]) -> None:
        line = f"{time.time():.3f}\t{op}\tsession={session_id}\ttokens={','.join(token_ids) or '-'}\n"
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)


class ShieldLedger:
    """Session-scoped inverse mapping from model-visible tokens to plaintext.

    Holds the session's FPETS and SHE keys.  Never serialised into model
    requests; dropped with the session.
    """

    def __init__(
        self,
        session_id: str = "",
        fpets_key: fpets.FpetsKey | None = None,
        she_key: she.SheKey | None = None,
        seed: int | None = None,
        audit: AuditLog | None = None,
    ):
        self.session_id = session_id
        # A seed makes every key and nonce reproducible; only tests and the
        # evaluation harness pass one.
        self.seeded = seed is not None
        self.rng = random.Random(seed if seed is not None else secrets.randbits(64))
        self.fpets_key = fpets_key or fpets.FpetsKey.generate(self.rng if self.seeded else None)
        self._she_key = she_key
        self.audit = audit
        self._by_token: dict[str, LedgerEntry] = {}
        self._by_plain: dict[tuple[str, str], LedgerEntry] = {}
        self._lock = threading.Lock()
        self._slice_cache: tuple[int, set[str]] = (-1, set())

    @property
    def she_key(self) -> she.SheKey:
        if self._she_key is None:
            seed = self.rng.getrandbits(64) if self.seeded else None
            self._she_key = she.keygen(SHIELD_SHE_PARAMS, seed=seed)
        return self._she_key

    def __len__(self) -> int:
        return len(self._by_token)

    def __contains__(self, token: str) -> bool:
        return token in self._by_token

    def entries(self) -> list[LedgerEntry]:
        return list(self._by_token.values())

    def lookup(self, token: str) -> LedgerEntry | None:
        return self._by_token.get(token)

    def tokens(self) -> list[str]:
        return list(self._by_token)

    def fpets_slices(self) -> set[str]:
        n = len(self._by_token)
        if self._slice_cache[0] != n:
            out = set()
            for e in list(self._by_token.values()):
                if e.mode == "fpets":
                    t = e.token
                    for i in range(len(t)):
                        for j in range(i + MIN_SLICE, len(t) + 1):
                            out.add(t[i:j])
            self._slice_cache = (n, out)
        return self._slice_cache[1]

    def is_model_side(self, word: str) -> bool:
        """True for a ledger token or an FPETS-token slice of claimable length."""
        return word in self._by_token or (len(word) >= MIN_SLICE and word in self.fpets_slices())

    def _add(self, token: str, detector: str, plaintext: str | None, mode: str) -> LedgerEntry:
        entry = LedgerEntry(f"tok-{len(self._by_token) + 1:04d}", token, detector, plaintext, mode)
        self._by_token[token] = entry
        if plaintext is not None:
            self._by_plain[(mode, plaintext)] = entry
        return entry

    def _whitewash(self, plaintext: str) -> str:
        out = []
        for ch in plaintext:
            ci = fpets.char_class(ch)
            out.append(ch if ci is None else self.rng.choice(fpets.CLASSES[ci]))
        return "".join(out)

    def protect(self, plaintext: str, mode: str, detector: str = "vault", fresh: bool = False) -> LedgerEntry:
        """Return the ledger entry standing in for ``plaintext`` under ``mode``.

        A value seen before in this session reuses its token unless ``fresh``
        is set (SHE only: a new randomized encryption).
        """
        if mode not in ("whitewash", "fpets", "she"):
            raise ValueError(f"cannot protect under mode {mode!r}")
        with self._lock:
            known = self._by_plain.get((mode, plaintext))
            if known is not None and not (fresh and mode == "she"):
                return known
            if mode == "fpets":
                token = fpets.encrypt(self.fpets_key, plaintext)
            elif mode == "she":
                digits = re.sub(r"\D", "", plaintext)
                if not digits:
                    raise ValueError("she mode needs a numeric value")
                nonce_rng = self.rng if self.seeded else None
                token = she.encrypt(self.she_key, int(digits) % self.she_key.params.t, nonce_rng).serialize()
            else:
                token = self._whitewash(plaintext)
                while token in self._by_token or token == plaintext:
                    token = self._whitewash(plaintext)
            existing = self._by_token.get(token)
            if existing is not None and existing.plaintext != plaintext:
                raise RuntimeError("token collision in shield ledger")
            return self._add(token, detector, plaintext, mode)

    def register_derived(self, ct: she.SheCiphertext, detector: str = "she-derived") -> LedgerEntry:
        """Record a tool-computed SHE ciphertext, restorable by decryption."""
        token = ct.serialize()
        with self._lock:
            return self._by_token.get(token) or self._add(token, detector, None, "she")

    def reveal(self, entry: LedgerEntry) -> str:
        if entry.plaintext is not None:
            return entry.plaintext
        return str(she.decrypt(self.she_key, she.SheCiphertext.parse(entry.token)))

    def plaintexts(self) -> list[tuple[LedgerEntry, str]]:
        return [(e, e.plaintext) for e in self._by_token.values() if e.plaintext]

    def log(self, op: str, token_ids: Iterable[str]) -> None:
        if self.audit is not None:
            self.audit.write(op, self.session_id, token_ids)


def scrub(policy: ShieldPolicy, ledger: ShieldLedger, text: str) -> str:
    matches = find_all(policy.detectors, text)
    if not matches:
        return text
    pieces = []
    used = []
    pos = 0
    for m in matches:
        if m.text in ledger:
            continue  # already a model-side token
        mode = policy.mode_for(m.detector)
        if mode == "block":
            ledger.log("block", [m.detector])
            raise BlockedContent(m.detector)
        entry = ledger.protect(m.text, mode, m.detector)
        pieces.append(text[pos:m.start])
        pieces.append(entry.token)
        used.append(entry.token_id)
        pos = m.end
    pieces.append(text[pos:])
    if used:
        ledger.log("scrub", used)
    return "".join(pieces)


_WORD_OR_TOKEN_RE = re.compile(she.TOKEN_PREFIX + r"[0-9a-f]+:[0-9a-f]+:[0-9a-f]*|" + _RUN_RE.pattern)


def _scan_pattern(ledger: ShieldLedger) -> re.Pattern:
    """Word scanner; tokens that are not single words (spaced card numbers) go first."""
    odd = sorted((t for t in ledger.tokens() if not _WORD_OR_TOKEN_RE.fullmatch(t)), key=len, reverse=True)
    if not odd:
        return _WORD_OR_TOKEN_RE
    return re.compile("|".join(re.escape(t) for t in odd) + "|" + _WORD_OR_TOKEN_RE.pattern)


def restore(ledger: ShieldLedger, text: str) -> str:
    """Replace ledger tokens, and slices of FPETS tokens, with plaintext.

    Unknown text is left alone.  A slice must be at least ``MIN_SLICE``
    characters long to be claimed.
    """
    if not len(ledger):
        return text
    used: list[str] = []

    def repl(m: re.Match) -> str:
        piece = m.group()
        entry = ledger.lookup(piece)
        if entry is not None:
            used.append(entry.token_id)
            return ledger.reveal(entry)
        if len(piece) >= MIN_SLICE and piece in ledger.fpets_slices():
            owner = next(e for e in ledger.entries() if e.mode == "fpets" and piece in e.token)
            used.append(owner.token_id)
            return fpets.decrypt(ledger.fpets_key, piece)
        return piece

    out = _scan_pattern(ledger).sub(repl, text)
    if used:
        ledger.log("restore", used)
    return out


@dataclass(frozen=True)
class Finding:
    token_id: str
    detector: str
    offset: int


def _is_word_char(ch: str) -> bool:
    return ch.isascii() and ch.isalnum()


def audit_leak(ledger: ShieldLedger, outbound_model_request: str) -> list[Finding]:
    """Every occurrence of a ledger plaintext in a model-bound payload.

    Occurrences embedded in a longer alphanumeric run (a hex token, say) are
    not findings, and plaintexts shorter than ``MIN_SLICE`` are not scanned:
    a one- or two-digit number in a prompt is not evidence of a leak.
    Words that are ledger tokens, or slices of FPETS tokens that
    :func:`restore` would claim, are ciphertext and are blanked before
    scanning; a short plaintext that coincides with them is not reported.
    """
    def blank(m: re.Match) -> str:
        piece = m.group()
        return "\0" * len(piece) if ledger.is_model_side(piece) else piece

    masked = _scan_pattern(ledger).sub(blank, outbound_model_request)
    findings = []
    for entry, plain in ledger.plaintexts():
        if len(plain) < MIN_SLICE:
            continue
        at = masked.find(plain)
        while at != -1:
            end = at + len(plain)
            if not (at and _is_word_char(masked[at - 1])) and not (end < len(masked) and _is_word_char(masked[end])):
                findings.append(Finding(entry.token_id, entry.detector, at))
            at = masked.find(plain, at + 1)
    findings.sort(key=lambda f: f.offset)
    return findings
