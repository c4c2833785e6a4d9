"""Single-line action grammar shared by the model backends and the agent loop.

Two line shapes are recognised::

    ACTION <tool>(<name>=<value>, ...)
    FINAL <free text>

Values are integers, double-quoted JSON strings, or bare words (read as
strings).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Union

ArgValue = Union[int, str]

_ACTION_RE = re.compile(r"^ACTION\s+([A-Za-z_][A-Za-z0-9_]*)\s*\((.*)\)\s*$")
_ARG_RE = re.compile(
    r'\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*("(?:[^"\\]|\\.)*"|[^,\s)"]+)\s*(,|$)'
)
_INT_RE = re.compile(r"^-?\d+$")


class MalformedAction(ValueError):
    def __init__(self, line: str, reason: str = "not an ACTION or FINAL line"):
        super().__init__(f"{reason}: {line!r}")
        self.line = line
        self.reason = reason


@dataclass(frozen=True)
class ActionRequest:
    tool: str
    arguments: dict[str, ArgValue]
    raw: str = field(default="", compare=False)

    def __hash__(self) -> int:
        return hash((self.tool, tuple(sorted(self.arguments.items()))))


@dataclass(frozen=True)
class FinalAnswer:
    text: str


def _parse_args(body: str, line: str) -> dict[str, ArgValue]:
    args: dict[str, ArgValue] = {}
    pos = 0
    body = body.strip()
    while pos < len(body):
        m = _ARG_RE.match(body, pos)
        if m is None:
            raise MalformedAction(line, "bad argument list")
        name, raw_value, sep = m.group(1), m.group(2), m.group(3)
        if name in args:
            raise MalformedAction(line, f"duplicate argument {name}")
        if raw_value.startswith('"'):
            try:
                value: ArgValue = json.loads(raw_value)
            except json.JSONDecodeError:
                raise MalformedAction(line, "bad string literal") from None
        elif _INT_RE.match(raw_value):
            value = int(raw_value)
        else:
            value = raw_value
        args[name] = value
        pos = m.end()
        if sep == "" and pos < len(body):
            raise MalformedAction(line, "bad argument list")
    return args


def parse_action(raw: str) -> ActionRequest | FinalAnswer:
    """Parse one model response into an action or a final answer."""
    text = raw.strip()
    if not text:
        raise MalformedAction(raw, "empty response")
    first, _, rest = text.partition("\n")
    first = first.strip()
    if first == "FINAL" or first.startswith("FINAL "):
        body = first[len("FINAL"):].strip()
        if rest:
            body = f"{body}\n{rest}" if body else rest
        return FinalAnswer(body.strip())
    if first.startswith("ACTION"):
        if rest.strip():
            raise MalformedAction(rest.strip().splitlines()[0], "trailing text after ACTION")
        m = _ACTION_RE.match(first)
        if m is None:
            raise MalformedAction(first, "bad ACTION syntax")
        return ActionRequest(m.group(1), _parse_args(m.group(2), first), raw=raw)
    raise MalformedAction(first)


def _render_value(value: ArgValue) -> str:
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise TypeError(f"unsupported argument value {value!r}")
    if isinstance(value, int):
        return str(value)
    return json.dumps(value)


def unparse_action(action: ActionRequest | FinalAnswer) -> str:
    if isinstance(action, FinalAnswer):
        return f"FINAL {action.text}"
    args = ", ".join(f"{k}={_render_value(v)}" for k, v in action.arguments.items())
    return f"ACTION {action.tool}({args})"
