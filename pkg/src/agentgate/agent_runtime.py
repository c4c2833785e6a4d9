"""The agent loop: prompt assembly, model calls, action dispatch, shielding."""

from __future__ import annotations

import logging
import re
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from . import she
from .actions import ActionRequest, FinalAnswer, MalformedAction, parse_action
from .llm_client import ModelRequest
from .privacy_shield import (
    Finding,
    ShieldLedger,
    ShieldPolicy,
    audit_leak,
    restore,
    scrub,
)
from .sandbox import DeniedByPolicy, SandboxProfile, SpawnFailure, execute
from .sandbox.policy import ParseError
from .session import SessionManager
from .state_core import AgentState, Output, StateStep, answer, tell

logger = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 8
_PLACEHOLDER_RE = re.compile(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}")

SYSTEM_TEMPLATE = """\
You are a careful assistant operating tools on behalf of a user.
Some values are opaque ciphertext tokens; handle them verbatim and never guess their contents.
Respond with exactly one line in one of these forms:
  ACTION <tool>(<name>=<value>, ...)
  FINAL <answer>
Available tools:
{tools}
[session:{session}]"""


class StepBudgetExhausted(RuntimeError):
    def __init__(self, steps: int):
        super().__init__(f"no final answer within {steps} steps")
        self.steps = steps


class PlaintextLeak(AssertionError):
    def __init__(self, findings: list[Finding]):
        super().__init__(f"{len(findings)} ledger plaintext(s) in a model-bound payload")
        self.findings = findings


class ToolError(Exception):
    pass


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters: tuple[tuple[str, str], ...]  # (name, "int" | "str")
    handler: Callable[["ToolContext", dict[str, Any]], str]

    def doc(self) -> str:
        params = ", ".join(f"{n}: {t}" for n, t in self.parameters)
        return f"- {self.name}({params}): {self.description}"

    def check(self, args: dict[str, Any]) -> dict[str, Any]:
        expected = dict(self.parameters)
        if set(args) != set(expected):
            raise ToolError(f"{self.name} takes ({', '.join(expected)}), got ({', '.join(args)})")
        for name, kind in self.parameters:
            if kind == "int" and not isinstance(args[name], int):
                raise ToolError(f"{self.name}: {name} must be an integer")
        return args


class ToolRegistry:
    """Immutable, ordered set of tools."""

    def __init__(self, tools: Iterable[ToolSpec] = ()):
        specs = list(tools)
        names = [t.name for t in specs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate tool names in {names}")
        self._tools = {t.name: t for t in specs}

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def __iter__(self):
        return iter(self._tools.values())

    def __len__(self) -> int:
        return len(self._tools)

    def get(self, name: str) -> ToolSpec:
        try:
            return self._tools[name]
        except KeyError:
            raise ToolError(f"unknown tool {name!r}") from None


@dataclass
class VaultItem:
    value: Any
    protect: str  # fpets | she | whitewash
    tokens: Optional[list[str]] = None


class Vault:
    """Session-held private values the model may only see in protected form."""

    def __init__(self) -> None:
        self.items: dict[str, VaultItem] = {}

    def put(self, name: str, value: Any, protect: str = "fpets") -> None:
        if protect not in ("fpets", "she", "whitewash"):
            raise ValueError(f"unknown protection {protect!r}")
        self.items[name] = VaultItem(value, protect)

    def get(self, name: str) -> VaultItem:
        try:
            return self.items[name]
        except KeyError:
            raise ToolError(f"no vault entry {name!r}") from None


@dataclass
class ToolContext:
    session_id: str
    vault: Vault
    ledger: Optional[ShieldLedger]  # None when the shield is bypassed
    profile: Optional[SandboxProfile] = None
    sessions: Optional[SessionManager] = None

    @property
    def shielded(self) -> bool:
        return self.ledger is not None

    def protect(self, value: str, how: str) -> str:
        if self.ledger is None:
            return value
        return self.ledger.protect(value, how).token

    def render(self, name: str) -> str:
        item = self.vault.get(name)
        if isinstance(item.value, (list, tuple)):
            return "[" + ", ".join(self.element(name, k) for k in range(len(item.value))) + "]"
        return self.protect(str(item.value), item.protect)

    def element(self, name: str, index: int) -> str:
        item = self.vault.get(name)
        values = item.value
        if not isinstance(values, (list, tuple)) or not 0 <= index < len(values):
            raise ToolError(f"{name} has no element {index}")
        if self.ledger is None:
            return str(values[index])
        if item.tokens is None:
            if item.protect == "she":
                # Fresh randomness per element so equal values get distinct tokens.
                item.tokens = [self.ledger.protect(str(v), "she", fresh=True).token for v in values]
            else:
                item.tokens = [self.ledger.protect(str(v), item.protect).token for v in values]
        return item.tokens[index]


# -- builtin tools ------------------------------------------------------------


def _fetch_ssn(ctx: ToolContext, args: dict[str, Any]) -> str:
    ssns = ctx.vault.get("ssns").value
    user = args["user"]
    if not 1 <= user <= len(ssns):
        raise ToolError(f"no user {user}; valid ids are 1..{len(ssns)}")
    return ctx.protect(ssns[user - 1], "fpets")


def _arith(op: str) -> Callable[[ToolContext, dict[str, Any]], str]:
    def handler(ctx: ToolContext, args: dict[str, Any]) -> str:
        i, j = args["i"], args["j"]
        a, b = ctx.element("numbers", i), ctx.element("numbers", j)
        if not ctx.shielded:
            x, y = int(a), int(b)
            return str(x + y if op == "add" else x * y)
        ca, cb = she.SheCiphertext.parse(a), she.SheCiphertext.parse(b)
        result = she.add(ca, cb) if op == "add" else she.mul(ca, cb)
        return ctx.ledger.register_derived(result).token

    return handler


def _bash(ctx: ToolContext, args: dict[str, Any]) -> str:
    if ctx.profile is None:
        raise ToolError("no sandbox profile configured")
    cmd = args["cmd"]
    try:
        result = execute(ctx.profile, cmd)
    except DeniedByPolicy as exc:
        return f"DENIED by policy rule {exc.rule_id} ({exc.category})"
    except (ParseError, SpawnFailure) as exc:
        raise ToolError(str(exc)) from None
    out = f"exit={result.exit_status}\n{result.stdout}"
    if result.stderr:
        out += f"\n[stderr]\n{result.stderr}"
    if result.limit_breached:
        out += f"\n[terminated: {result.limit_breached} limit]"
    return out


def _recall(ctx: ToolContext, args: dict[str, Any]) -> str:
    if ctx.sessions is None:
        raise ToolError("no episodic memory available")
    snippets = ctx.sessions.recall(ctx.session_id, args["query"], 3)
    return "\n".join(f"- {s}" for s in snippets) or "(no memories)"


FETCH_SSN = ToolSpec("fetch_ssn", "return the stored SSN of a user id (1-based) as a token", (("user", "int"),), _fetch_ssn)
ADD = ToolSpec("add", "add the numbers at indices i and j of the number array; returns a token", (("i", "int"), ("j", "int")), _arith("add"))
MUL = ToolSpec("mul", "multiply the numbers at indices i and j of the number array; returns a token", (("i", "int"), ("j", "int")), _arith("mul"))
BASH = ToolSpec("bash", "run a shell command in the sandbox and return its output", (("cmd", "str"),), _bash)
RECALL = ToolSpec("recall", "search this session's episodic memory for snippets", (("query", "str"),), _recall)


def default_registry(with_bash: bool = True) -> ToolRegistry:
    tools = [FETCH_SSN, ADD, MUL, RECALL]
    if with_bash:
        tools.append(BASH)
    return ToolRegistry(tools)


@dataclass
class AgentAnswer:
    text: str
    steps_used: int
    tools_invoked: list[str] = field(default_factory=list)


class Agent:
    """Runs user turns for sessions held by a :class:`SessionManager`.

    With ``shield`` off, prompts and tool feedback reach the model in
    plaintext; the evaluation harness uses this for its baseline.
    """

    def __init__(
        self,
        sessions: SessionManager,
        backend,
        registry: ToolRegistry | None = None,
        policy: ShieldPolicy | None = None,
        *,
        shield: bool = True,
        profile: SandboxProfile | None = None,
        max_steps: int = DEFAULT_MAX_STEPS,
        seed: int | None = None,
        audit_log=None,
        on_model_request: Callable[[ModelRequest, list[Finding]], None] | None = None,
    ):
        self.sessions = sessions
        self.backend = backend
        self.registry = registry if registry is not None else default_registry(profile is not None)
        self.policy = policy or ShieldPolicy()
        self.shield = shield
        self.profile = profile
        self.max_steps = max_steps
        self.seed = seed
        self.audit_log = audit_log
        self.on_model_request = on_model_request
        self._ledgers_made = 0
        self._seed_lock = threading.Lock()

    # -- per-session resources

    def ledger(self, sid: str) -> ShieldLedger:
        res = self.sessions.record(sid).resources
        if "ledger" not in res:
            seed = None
            if self.seed is not None:
                # distinct but reproducible keys per session
                with self._seed_lock:
                    self._ledgers_made += 1
                    seed = self.seed * 1_000_003 + self._ledgers_made
            res["ledger"] = ShieldLedger(sid, seed=seed, audit=self.audit_log)
        return res["ledger"]

    def vault(self, sid: str) -> Vault:
        return self.sessions.record(sid).resources.setdefault("vault", Vault())

    def context(self, sid: str) -> ToolContext:
        return ToolContext(sid, self.vault(sid), self.ledger(sid) if self.shield else None, self.profile, self.sessions)

    def _guard(self, ctx: ToolContext, text: str) -> str:
        return scrub(self.policy, ctx.ledger, text) if ctx.shielded else text

    def system_directive(self, sid: str, ctx: ToolContext) -> str:
        docs = "\n".join(self._guard(ctx, t.doc()) for t in self.registry)
        return SYSTEM_TEMPLATE.format(tools=docs or "(none)", session=sid)

    # -- steps

    def _model_step(self, sid: str, ctx: ToolContext) -> StateStep:
        def apply(s: AgentState) -> tuple[Output, AgentState]:
            messages = (("system", self.system_directive(sid, ctx)),) + s.transcript
            request = ModelRequest(messages, session_tag=sid, credential_slot=self.sessions.record(sid).credential_slot)
            findings = audit_leak(ctx.ledger, request.payload_text()) if ctx.shielded else []
            if self.on_model_request is not None:
                self.on_model_request(request, findings)
            if findings:
                raise PlaintextLeak(findings)
            reply = self.backend.complete(request)
            try:
                kind = "action" if isinstance(parse_action(reply), ActionRequest) else "answer"
            except MalformedAction:
                kind = "answer"
            return Output(kind, reply), s.append("assistant", reply)

        return StateStep("model", True, apply)

    def _dispatch(self, ctx: ToolContext, action: ActionRequest) -> str:
        try:
            spec = self.registry.get(action.tool)
            return spec.handler(ctx, spec.check(dict(action.arguments)))
        except ToolError as exc:
            return f"ERROR: {exc}"
        except (she.SheError, ValueError) as exc:
            return f"ERROR: {type(exc).__name__}: {exc}"

    def _tool_step(self, ctx: ToolContext, action: ActionRequest) -> StateStep:
        def apply(s: AgentState) -> tuple[Output, AgentState]:
            feedback = self._guard(ctx, self._dispatch(ctx, action))
            return answer(feedback), s.append("tool", feedback)

        return StateStep(f"tool:{action.tool}", True, apply)

    def expand(self, ctx: ToolContext, prompt: str) -> str:
        return _PLACEHOLDER_RE.sub(lambda m: ctx.render(m.group(1)), prompt)

    def run_turn(self, sid: str, user_prompt: str, max_steps: int | None = None) -> AgentAnswer:
        budget = self.max_steps if max_steps is None else max_steps
        rec = self.sessions.record(sid)
        with rec.turn_lock:
            ctx = self.context(sid)
            text = self._guard(ctx, self.expand(ctx, user_prompt))
            self.sessions.with_session(sid, tell("user", text))
            tools: list[str] = []
            for step in range(1, budget + 1):
                out = self.sessions.with_session(sid, self._model_step(sid, ctx))
                parsed = parse_action(out.payload)
                if isinstance(parsed, FinalAnswer):
                    final = restore(ctx.ledger, parsed.text) if ctx.shielded else parsed.text
                    return AgentAnswer(final, step, tools)
                self.sessions.with_session(sid, self._tool_step(ctx, parsed))
                tools.append(parsed.tool)
            raise StepBudgetExhausted(budget)
