"""Sample m continuations x t turns per question and write score records.

The output is the core artifact's line-delimited score record format
(input_id, sample_id, turn, role, token_logprobs, text); this file format
is the only coupling to the core. No scores or p-values are computed here.

Block continuation is sequential within one (question, sample): turn t+1
sends the prompt plus all prior block text as the prefix. Different
samples run concurrently in a bounded pool; a single writer emits the
records in (question, sample, turn) order so reruns are deterministic
given deterministic server output.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import requests

from .client import CompletionError, EndpointSpec, fetch_block
from .prompts import COMPLETION, MULTIPLE_CHOICE, render_prompt


@dataclass(frozen=True)
class Question:
    id: str
    question: str
    choices: tuple[str, ...] | None = None

    @property
    def template_kind(self) -> str:
        return MULTIPLE_CHOICE if self.choices else COMPLETION


def load_questions(path) -> list[Question]:
    """Line-delimited {id, question, optional choices} objects."""
    questions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                questions.append(Question(
                    id=str(obj["id"]),
                    question=str(obj["question"]),
                    choices=tuple(obj["choices"]) if obj.get("choices") else None,
                ))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"questions file line {lineno}: {exc}") from None
    return questions


@dataclass
class ExportReport:
    records_written: int = 0
    gaps: list[tuple[str, int, int]] = field(default_factory=list)  # (id, sample, turn)

    @property
    def ok(self) -> bool:
        return not self.gaps


def _sample_turns(endpoint: EndpointSpec, question: Question, sample_id: int,
                  turns: int, retries: int, backoff: float):
    """All turns of one sample; a failed turn leaves a gap and stops the chain."""
    prompt = render_prompt(question.template_kind, question.question,
                           list(question.choices) if question.choices else None)
    prefix = ""
    rows, gaps = [], []
    with requests.Session() as session:
        for turn in range(turns):
            try:
                block = fetch_block(endpoint, prompt + prefix, session=session,
                                    retries=retries, backoff=backoff)
            except CompletionError:
                gaps.extend((question.id, sample_id, t) for t in range(turn, turns))
                break
            rows.append({
                "input_id": question.id,
                "sample_id": sample_id,
                "turn": turn,
                "role": endpoint.role,
                "token_logprobs": list(block.token_logprobs),
                "text": block.text,
            })
            prefix += block.text
    return rows, gaps


def export_samples(endpoint: EndpointSpec, questions: list[Question], m: int,
                   turns: int, out_path, *, concurrency: int = 4,
                   retries: int = 3, backoff: float = 0.5) -> ExportReport:
    """m samples x `turns` blocks per question, written as score records."""
    if m < 1:
        raise ValueError("m must be positive")
    if turns < 1:
        raise ValueError("turns must be positive")
    if not questions:
        raise ValueError("no questions to export")

    report = ExportReport()
    tasks = [(q, k) for q in questions for k in range(m)]
    results: dict[tuple[str, int], list[dict]] = {}
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        futures = {pool.submit(_sample_turns, endpoint, q, k, turns,
                               retries, backoff): (q.id, k)
                   for q, k in tasks}
        for future, key in futures.items():
            rows, gaps = future.result()
            results[key] = rows
            report.gaps.extend(gaps)

    with open(out_path, "w", encoding="utf-8") as fh:
        for q, k in tasks:
            for row in results[(q.id, k)]:
                fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")))
                fh.write("\n")
                report.records_written += 1
    return report
