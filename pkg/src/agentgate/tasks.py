"""Evaluation task records and the newline-delimited task/corpus file format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Optional

FAMILIES = ("slicing", "ssn", "fhe", "attack")


@dataclass(frozen=True)
class EvalTask:
    id: str
    family: str
    payload: dict[str, Any]
    expected: str
    mode: str = "ciphertext"
    category: Optional[str] = None
    effect_predicate: Optional[str] = None

    def to_json(self) -> str:
        obj = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalTask":
        return cls(
            id=str(obj["id"]),
            family=obj["family"],
            payload=obj.get("payload", {}),
            expected=obj.get("expected", ""),
            mode=obj.get("mode", "ciphertext"),
            category=obj.get("category"),
            effect_predicate=obj.get("effect_predicate"),
        )


def load_tasks(path: str | Path) -> list[EvalTask]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(EvalTask.from_dict(json.loads(line)))
        except (KeyError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad task record ({exc})") from None
    return out


def dump_tasks(tasks: Iterable[EvalTask], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(t.to_json() + "\n")


def builtin_corpus() -> list[EvalTask]:
    return load_tasks(Path(__file__).resolve().parent / "data" / "attack_corpus.jsonl")
