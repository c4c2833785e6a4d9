"""State transformers over agent state.

A :class:`StateStep` maps an :class:`AgentState` to ``(Output, AgentState)``.
Steps compose with :func:`pure` and :func:`bind` and are executed with
:func:`run`.  Composition itself is uncounted: ``run`` advances
``step_count`` by one per executed step, which keeps the unit and
associativity laws exact under observational equality.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

from .actions import ActionRequest, MalformedAction, parse_action

ROLES = ("user", "assistant", "tool")
OUTPUT_KINDS = ("answer", "action", "memory_write")


class StepFailed(Exception):
    """Raised by :func:`run` when a step's body signals failure."""

    def __init__(self, name: str, cause: BaseException):
        super().__init__(f"step {name!r} failed: {cause}")
        self.name = name
        self.cause = cause


@dataclass(frozen=True)
class AgentState:
    transcript: tuple[tuple[str, str], ...] = ()
    memory_refs: tuple[str, ...] = ()
    step_count: int = 0

    def __post_init__(self) -> None:
        if self.step_count < 0:
            raise ValueError("step_count must be non-negative")
        for entry in self.transcript:
            if len(entry) != 2 or entry[0] not in ROLES:
                raise ValueError(f"bad transcript entry {entry!r}")

    def append(self, role: str, text: str) -> "AgentState":
        return replace(self, transcript=self.transcript + ((role, text),))

    def with_ref(self, ref: str) -> "AgentState":
        return replace(self, memory_refs=self.memory_refs + (ref,))

    def observed(self) -> tuple:
        """The fields that define state equality."""
        return (self.transcript, self.memory_refs, self.step_count)


@dataclass(frozen=True)
class Output:
    kind: str
    payload: str

    def __post_init__(self) -> None:
        if self.kind not in OUTPUT_KINDS:
            raise ValueError(f"unknown output kind {self.kind!r}")
        if self.kind == "action" and not isinstance(parse_action(self.payload), ActionRequest):
            raise MalformedAction(self.payload, "action output is not an ACTION line")


def answer(text: str) -> Output:
    return Output("answer", text)


@dataclass(frozen=True)
class StateStep:
    name: str
    effectful: bool
    apply: Callable[[AgentState], tuple[Output, AgentState]] = field(compare=False)


def pure(value: str | Output) -> StateStep:
    """Unit: return ``value`` without touching state.

    An :class:`Output` passes through unchanged, so ``bind(m, pure)`` is ``m``.
    """
    out = value if isinstance(value, Output) else answer(value)
    return StateStep("pure", False, lambda s: (out, s))


def bind(step: StateStep, continuation: Callable[[Output], StateStep]) -> StateStep:
    """Sequence ``step`` then the step chosen by ``continuation`` from its output.

    The composite is effectful when either side is.  Since the continuation's
    step is only known at run time, its flag is sampled lazily; callers that
    need the static flag of a bound program should pass ``effectful``-honest
    continuations (see :func:`then`).
    """

    def apply(s0: AgentState) -> tuple[Output, AgentState]:
        out, s1 = step.apply(s0)
        return continuation(out).apply(s1)

    effectful = step.effectful or bool(getattr(continuation, "effectful", False))
    return StateStep(f"{step.name}>>=", effectful, apply)


def then(step: StateStep, nxt: StateStep) -> StateStep:
    """Sequence two steps, discarding the first output."""
    cont = lambda _out: nxt  # noqa: E731
    cont.effectful = nxt.effectful  # type: ignore[attr-defined]
    return bind(step, cont)


def run(step: StateStep, initial: AgentState) -> tuple[Output, AgentState]:
    try:
        out, nxt = step.apply(initial)
    except StepFailed:
        raise
    except Exception as exc:
        raise StepFailed(step.name, exc) from exc
    n = len(initial.transcript)
    if nxt.transcript[:n] != initial.transcript:
        raise StepFailed(step.name, RuntimeError("step rewrote transcript history"))
    return out, replace(nxt, step_count=initial.step_count + 1)


def same(a: tuple[Output, AgentState], b: tuple[Output, AgentState]) -> bool:
    """Observational equality of two run results."""
    return a[0] == b[0] and a[1].observed() == b[1].observed()


# -- primitive steps -------------------------------------------------------


def tell(role: str, text: str) -> StateStep:
    """Append one transcript entry; returns the text as an answer."""

    def apply(s: AgentState) -> tuple[Output, AgentState]:
        return answer(text), s.append(role, text)

    return StateStep(f"tell:{role}", False, apply)


def fail(reason: str) -> StateStep:
    def apply(s: AgentState) -> tuple[Output, AgentState]:
        raise RuntimeError(reason)

    return StateStep("fail", False, apply)


class Model(Protocol):
    def __call__(self, messages: Sequence[tuple[str, str]]) -> str: ...


def ask(model: Model, question: str) -> StateStep:
    """Append a user question, query ``model`` on the full transcript, append its reply.

    Deterministic models make this a pure step in the observational sense.
    """

    def apply(s: AgentState) -> tuple[Output, AgentState]:
        s = s.append("user", question)
        reply = model(s.transcript)
        return answer(reply), s.append("assistant", reply)

    return StateStep("ask", False, apply)


def critique(model: Model, template: str = "Critique and improve: {answer}") -> Callable[[Output], StateStep]:
    """Continuation asking the model to revise the previous answer."""

    def cont(prev: Output) -> StateStep:
        return ask(model, template.format(answer=prev.payload))

    cont.effectful = False  # type: ignore[attr-defined]
    return cont


class MemorySink(Protocol):
    def write_memory(self, session_id: str, text: str) -> str: ...


def memory_write(sink: MemorySink, session_id: str, text: str) -> StateStep:
    """Persist ``text`` to episodic memory and remember the returned reference."""

    def apply(s: AgentState) -> tuple[Output, AgentState]:
        ref = sink.write_memory(session_id, text)
        return Output("memory_write", text), s.with_ref(ref)

    return StateStep("memory_write", True, apply)


def chain(steps: Sequence[StateStep]) -> StateStep:
    """Left fold of :func:`then`; the empty chain is ``pure("")``."""
    if not steps:
        return pure("")
    acc = steps[0]
    for nxt in steps[1:]:
        acc = then(acc, nxt)
    return acc
