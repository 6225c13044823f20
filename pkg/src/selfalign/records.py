"""Schema-versioned JSONL records for prompts, questions, scores and preference pairs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

from .core import PromptSpec, Question

RECORD_VERSION = 1


def write_jsonl(path, records: Iterable[dict], kind: str) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"schema_version": RECORD_VERSION, "type": kind, **rec}, sort_keys=True) + "\n")
            n += 1
    return n


def read_jsonl(path, kind: str) -> Iterator[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing input file: {path}")
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("schema_version") != RECORD_VERSION:
                raise ValueError(f"{path}:{lineno}: unsupported schema_version {rec.get('schema_version')!r}")
            if rec.get("type") != kind:
                raise ValueError(f"{path}:{lineno}: expected a {kind!r} record, got {rec.get('type')!r}")
            rec.pop("schema_version")
            rec.pop("type")
            yield rec


def write_prompts(path, prompts: Iterable[PromptSpec]) -> int:
    return write_jsonl(path, (p.to_json() for p in prompts), "prompt")


def read_prompts(path) -> list[PromptSpec]:
    return [PromptSpec.from_json(r) for r in read_jsonl(path, "prompt")]


def write_questions(path, items: Iterable[tuple[str, Question]]) -> int:
    return write_jsonl(path, ({"prompt_id": pid, **q.to_json()} for pid, q in items), "question")


def read_questions(path) -> dict[str, list[Question]]:
    out: dict[str, list[Question]] = {}
    for rec in read_jsonl(path, "question"):
        out.setdefault(rec.pop("prompt_id"), []).append(Question.from_json(rec))
    return out
