"""First-match policy rules over parsed shell commands, and profile files.

A profile file is line oriented::

    rule <priority> <allow|deny> <category> <clause> [<clause> ...]
    limit <name> <value>
    net whitelist|blacklist <host-glob>[,<host-glob>...]
    net rate <capacity>/<refill-per-second>
    exec shell|argv
    root <directory>

Clauses within one rule must all hold:

``*``                       always
``prog=<glob>[,...]``       some segment's program basename matches
``arg=<glob>[,...]``        some argument matches
``path=<glob>[,...]``       some path-like argument (``~`` expanded) matches
``outside-root``            some path-like argument resolves outside fs_root
``shell``                   the command uses shell operators or expansions
``raw=<regex>``             regex search over the raw command text
"""

from __future__ import annotations

import fnmatch
import os
import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .network import NetworkPolicy

CATEGORIES = ("confidentiality", "integrity", "availability", "benign")
VERDICTS = ("allow", "deny")
LIMIT_NAMES = ("cpu_seconds", "memory_bytes", "wall_seconds", "max_output_bytes", "max_processes")

_OPERATORS = {";", "|", "||", "&", "&&", ">", ">>", "<", "<<", "(", ")", ">&", "<&", ";;", "|&"}
_SHELL_CHARS = re.compile(r"[;&|<>`$(){}\n]")


class ParseError(ValueError):
    pass


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class ParsedCommand:
    raw: str
    segments: tuple[tuple[str, ...], ...]
    operators: tuple[str, ...]

    @property
    def words(self) -> list[str]:
        return [w for seg in self.segments for w in seg]

    @property
    def programs(self) -> list[str]:
        return [os.path.basename(seg[0]) for seg in self.segments if seg]

    @property
    def arguments(self) -> list[str]:
        return [w for seg in self.segments for w in seg[1:]]


def parse_command(command: str) -> ParsedCommand:
    """Shell-word split with quote handling, cutting segments at operators."""
    if not command.strip():
        raise ParseError("empty command")
    lex = shlex.shlex(command, posix=True, punctuation_chars=";&|<>()")
    lex.whitespace_split = True
    lex.commenters = ""
    try:
        tokens = list(lex)
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    segments: list[tuple[str, ...]] = []
    operators: list[str] = []
    current: list[str] = []
    for tok in tokens:
        if tok in _OPERATORS or (tok and set(tok) <= set(";&|<>()")):
            operators.append(tok)
            if _is_redirect(tok):
                continue  # the target stays an argument of this segment
            if current:
                segments.append(tuple(current))
            current = []
        else:
            current.append(tok)
    if current:
        segments.append(tuple(current))
    return ParsedCommand(command, tuple(segments), tuple(operators))


def _is_redirect(op: str) -> bool:
    return bool(op) and set(op) <= set("<>&") and ("<" in op or ">" in op)


def _path_like(word: str) -> bool:
    return "/" in word or word in (".", "..") or word.startswith("~")


def _expand(word: str) -> str:
    # Assignment-style arguments such as ``of=/x`` and ``--file=/x`` carry a path after '='.
    if "=" in word and not word.startswith(("/", "~", ".")):
        word = word.split("=", 1)[1]
    return os.path.expanduser(word)


def resolves_outside(word: str, fs_root: Path) -> bool:
    root = os.path.realpath(fs_root)
    target = _expand(word)
    if not os.path.isabs(target):
        target = os.path.join(root, target)
    real = os.path.realpath(target)
    return not (real == root or real.startswith(root + os.sep))


def _path_args(cmd: ParsedCommand) -> list[str]:
    return [_expand(w) for w in cmd.arguments if _path_like(_expand(w)) or _path_like(w)]


@dataclass(frozen=True)
class PolicyRule:
    id: str
    priority: int
    verdict: str
    category: str
    pattern: str

    def __post_init__(self) -> None:
        if self.verdict not in VERDICTS:
            raise ProfileError(f"rule {self.id}: bad verdict {self.verdict!r}")
        if self.category not in CATEGORIES:
            raise ProfileError(f"rule {self.id}: bad category {self.category!r}")
        for clause in self.pattern.split():
            key = clause.split("=", 1)[0]
            if clause not in ("*", "outside-root", "shell") and key not in ("prog", "arg", "path", "raw"):
                raise ProfileError(f"rule {self.id}: unknown clause {clause!r}")
            if key == "raw":
                re.compile(clause.split("=", 1)[1])

    @property
    def catch_all(self) -> bool:
        return self.pattern.split() == ["*"]

    def matches(self, cmd: ParsedCommand, fs_root: Path) -> bool:
        for clause in self.pattern.split():
            if not _clause_holds(clause, cmd, fs_root):
                return False
        return True


def _clause_holds(clause: str, cmd: ParsedCommand, fs_root: Path) -> bool:
    if clause == "*":
        return True
    if clause == "shell":
        return bool(cmd.operators) or bool(_SHELL_CHARS.search(cmd.raw))
    if clause == "outside-root":
        words = [
            w for w in cmd.arguments
            if _path_like(_expand(w)) or os.path.lexists(os.path.join(fs_root, _expand(w)))
        ]
        return any(resolves_outside(w, fs_root) for w in words)
    key, _, value = clause.partition("=")
    if key == "raw":
        return re.search(value, cmd.raw) is not None
    globs = value.split(",")
    if key == "prog":
        return any(fnmatch.fnmatchcase(p, g) for p in cmd.programs for g in globs)
    if key == "arg":
        return any(fnmatch.fnmatchcase(a, g) for a in cmd.arguments for g in globs)
    if key == "path":
        expanded = [os.path.expanduser(g) for g in globs]
        return any(fnmatch.fnmatchcase(os.path.normpath(p), g) for p in _path_args(cmd) for g in expanded)
    return False


@dataclass(frozen=True)
class Limits:
    cpu_seconds: Optional[float] = None
    memory_bytes: Optional[int] = None
    wall_seconds: Optional[float] = None
    max_output_bytes: Optional[int] = None
    max_processes: Optional[int] = None


@dataclass(frozen=True)
class PolicyVerdict:
    verdict: str
    rule_id: str
    category: str

    @property
    def allowed(self) -> bool:
        return self.verdict == "allow"


@dataclass
class SandboxProfile:
    name: str
    rules: list[PolicyRule]
    fs_root: Path
    limits: Limits = field(default_factory=Limits)
    network: NetworkPolicy = field(default_factory=NetworkPolicy)
    shell: bool = False

    def __post_init__(self) -> None:
        self.fs_root = Path(self.fs_root)
        self.rules = sorted(self.rules, key=lambda r: r.priority)
        if not self.rules or not self.rules[-1].catch_all:
            raise ProfileError(f"profile {self.name!r} lacks a final catch-all rule")
        if self.name == "secure":
            bad = [r.id for r in self.rules if r.category != "benign" and r.verdict != "deny"]
            if bad:
                raise ProfileError(f"secure profile allows non-benign rules {bad}")


def evaluate(profile: SandboxProfile, command: str) -> PolicyVerdict:
    """Verdict of the first rule (by priority) matching ``command``."""
    cmd = parse_command(command)
    for rule in profile.rules:
        if rule.matches(cmd, profile.fs_root):
            return PolicyVerdict(rule.verdict, rule.id, rule.category)
    raise AssertionError("unreachable: catch-all rule missing")


_SUFFIX = {"k": 1024, "m": 1024**2, "g": 1024**3}


def _limit_value(name: str, raw: str) -> float | int | None:
    if raw in ("none", "unlimited"):
        return None
    if name in ("memory_bytes", "max_output_bytes") and raw[-1].lower() in _SUFFIX:
        return int(raw[:-1]) * _SUFFIX[raw[-1].lower()]
    if name in ("cpu_seconds", "wall_seconds"):
        return float(raw)
    return int(raw)


def parse_profile(text: str, name: str, fs_root: str | os.PathLike | None = None, source: str = "<profile>") -> SandboxProfile:
    rules: list[PolicyRule] = []
    limits: dict[str, object] = {}
    whitelist: list[str] = []
    blacklist: list[str] = []
    rate = None
    shell = False
    root = fs_root
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        parts = line.split()
        try:
            if parts[0] == "rule":
                if len(parts) < 5:
                    raise ProfileError("expected: rule <priority> <verdict> <category> <pattern>")
                rules.append(PolicyRule(f"{name}:{lineno}", int(parts[1]), parts[2], parts[3], " ".join(parts[4:])))
            elif parts[0] == "limit":
                if len(parts) != 3 or parts[1] not in LIMIT_NAMES:
                    raise ProfileError(f"expected: limit <{'|'.join(LIMIT_NAMES)}> <value>")
                limits[parts[1]] = _limit_value(parts[1], parts[2])
            elif parts[0] == "net":
                if len(parts) != 3:
                    raise ProfileError("expected: net <whitelist|blacklist|rate> <spec>")
                if parts[1] == "whitelist":
                    whitelist.extend(parts[2].split(","))
                elif parts[1] == "blacklist":
                    blacklist.extend(parts[2].split(","))
                elif parts[1] == "rate":
                    cap, _, refill = parts[2].partition("/")
                    rate = (float(cap), float(refill))
                else:
                    raise ProfileError(f"unknown net directive {parts[1]!r}")
            elif parts[0] == "exec":
                if len(parts) != 2 or parts[1] not in ("shell", "argv"):
                    raise ProfileError("expected: exec shell|argv")
                shell = parts[1] == "shell"
            elif parts[0] == "root":
                if root is None:
                    root = " ".join(parts[1:])
            else:
                raise ProfileError(f"unknown directive {parts[0]!r}")
        except (ProfileError, ValueError, re.error) as exc:
            raise ProfileError(f"{where}: {exc}") from None
    if root is None:
        raise ProfileError(f"{source}: no fs_root given")
    network = NetworkPolicy(tuple(whitelist), tuple(blacklist), *(rate or ()))
    return SandboxProfile(name, rules, Path(root), Limits(**limits), network, shell)


BUILTIN_PROFILES = ("plain", "secure")


def _data_file(name: str) -> str:
    return (Path(__file__).resolve().parent.parent / "data" / name).read_text(encoding="utf-8")


def load_profile(name_or_path: str, fs_root: str | os.PathLike | None = None) -> SandboxProfile:
    """Load a builtin profile (``plain``/``secure``) or a profile file."""
    if name_or_path in BUILTIN_PROFILES:
        return parse_profile(_data_file(f"{name_or_path}.profile"), name_or_path, fs_root, name_or_path)
    path = Path(name_or_path)
    name = path.stem if path.stem in BUILTIN_PROFILES else "custom"
    return parse_profile(path.read_text(encoding="utf-8"), name, fs_root, str(path))
