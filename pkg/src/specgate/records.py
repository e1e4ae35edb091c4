"""Line-delimited score record format and pool (de)serialization.

One JSON object per line, UTF-8. A score record carries the per-token
log-probabilities of one sampled block:

    {"input_id": str, "sample_id": int, "turn": int,
     "role": "draft"|"target", "token_logprobs": [float <= 0, ...],
     "text": str (optional)}

Pool files use the same record lines preceded by a single header line:

    {"kind": "pool", "n": int, "m": int, "hash": str}

Each pool record stores a calibration score s as the one-element block
[-s], which round-trips exactly through the mean-NLL scorer.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

ROLES = ("draft", "target")

_RECORD_KEYS = {"input_id", "sample_id", "turn", "role", "token_logprobs", "text"}


class RecordFormatError(ValueError):
    """Malformed record line; carries the 1-based line number when known."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


@dataclass(frozen=True)
class ScoreRecord:
    input_id: str
    sample_id: int
    turn: int
    role: str
    token_logprobs: tuple[float, ...]
    text: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise RecordFormatError(f"unknown role {self.role!r}")
        if not self.token_logprobs:
            raise RecordFormatError("empty token_logprobs")
        for lp in self.token_logprobs:
            if not math.isfinite(lp) or lp > 0.0:
                raise RecordFormatError(f"invalid logprob {lp!r}")

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.input_id, self.sample_id, self.turn)

    def to_json(self) -> str:
        obj = {
            "input_id": self.input_id,
            "sample_id": self.sample_id,
            "turn": self.turn,
            "role": self.role,
            "token_logprobs": list(self.token_logprobs),
        }
        if self.text is not None:
            obj["text"] = self.text
        return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def parse_record(obj: dict, line_number: int | None = None) -> ScoreRecord:
    if not isinstance(obj, dict):
        raise RecordFormatError("record is not an object", line_number)
    unknown = set(obj) - _RECORD_KEYS
    if unknown:
        raise RecordFormatError(f"unknown fields {sorted(unknown)}", line_number)
    try:
        input_id = obj["input_id"]
        sample_id = obj["sample_id"]
        turn = obj["turn"]
        role = obj["role"]
        logprobs = obj["token_logprobs"]
    except KeyError as exc:
        raise RecordFormatError(f"missing field {exc.args[0]!r}", line_number) from None
    if not isinstance(input_id, str):
        raise RecordFormatError("input_id must be a string", line_number)
    if not isinstance(sample_id, int) or isinstance(sample_id, bool):
        raise RecordFormatError("sample_id must be an integer", line_number)
    if not isinstance(turn, int) or isinstance(turn, bool):
        raise RecordFormatError("turn must be an integer", line_number)
    if not isinstance(logprobs, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in logprobs
    ):
        raise RecordFormatError("token_logprobs must be an array of reals", line_number)
    try:
        return ScoreRecord(
            input_id=input_id,
            sample_id=sample_id,
            turn=turn,
            role=role,
            token_logprobs=tuple(float(v) for v in logprobs),
            text=obj.get("text"),
        )
    except RecordFormatError as exc:
        raise RecordFormatError(str(exc), line_number) from None


def iter_records(path) -> Iterator[ScoreRecord]:
    """Yield records from a line-delimited file, reporting bad lines by number."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordFormatError(f"invalid JSON ({exc.msg})", lineno) from None
            yield parse_record(obj, lineno)


def read_records(path) -> list[ScoreRecord]:
    return list(iter_records(path))


def write_records(path, records: Iterable[ScoreRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def pool_content_hash(input_ids: Iterable[str], scores_by_input: dict[str, list[float]]) -> str:
    """Content hash of a pool: sha256 over the canonical (id, scores) listing.

    Input order is part of the identity; recalibration with the same draws
    reproduces the same hash bit-for-bit.
    """
    h = hashlib.sha256()
    for input_id in input_ids:
        h.update(input_id.encode("utf-8"))
        h.update(b"\x00")
        for s in scores_by_input[input_id]:
            h.update(repr(float(s)).encode("ascii"))
            h.update(b";")
        h.update(b"\n")
    return h.hexdigest()


def write_pool_file(path, pool) -> None:
    """Serialize a CalibrationPool: header line + one record per score cell."""
    lines = [json.dumps({"kind": "pool", "n": pool.n, "m": pool.m, "hash": pool.content_hash},
                        separators=(",", ":"))]
    for i, input_id in enumerate(pool.input_ids):
        for j in range(pool.m):
            s = float(pool.scores[i, j])
            if s < 0:
                raise RecordFormatError(
                    f"score {s!r} for ({input_id!r}, {j}) is negative and cannot be "
                    "stored as a logprob record"
                )
            rec = ScoreRecord(input_id=input_id, sample_id=j, turn=0,
                              role="draft", token_logprobs=(-s,))
            lines.append(rec.to_json())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def read_pool_file(path):
    """Parse a pool file back into a CalibrationPool, verifying the header."""
    from .conformal import CalibrationPool

    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline().strip()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError:
        raise RecordFormatError("missing pool header", 1) from None
    if not isinstance(header, dict) or header.get("kind") != "pool":
        raise RecordFormatError("missing pool header", 1)

    scores_by_input: dict[str, dict[int, float]] = {}
    order: list[str] = []
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            rec = parse_record(obj, lineno)
            if rec.input_id not in scores_by_input:
                scores_by_input[rec.input_id] = {}
                order.append(rec.input_id)
            cells = scores_by_input[rec.input_id]
            if rec.sample_id in cells:
                raise RecordFormatError(
                    f"duplicate pool cell ({rec.input_id!r}, {rec.sample_id})", lineno)
            cells[rec.sample_id] = -sum(rec.token_logprobs) / len(rec.token_logprobs)

    n, m = header.get("n"), header.get("m")
    if len(order) != n:
        raise RecordFormatError(f"header n={n} but file has {len(order)} inputs")
    rows = []
    for input_id in order:
        cells = scores_by_input[input_id]
        if len(cells) != m or set(cells) != set(range(m)):
            raise RecordFormatError(f"input {input_id!r} does not have samples 0..{m - 1}")
        rows.append([cells[j] for j in range(m)])
    pool = CalibrationPool.from_scores(order, rows)
    if pool.content_hash != header.get("hash"):
        raise RecordFormatError("pool content hash mismatch")
    return pool


@dataclass
class RecordScoreSource:
    """Replays recorded blocks as conformity scores, keyed by (input, sample, turn)."""

    scores: dict[tuple[str, int, int], float] = field(default_factory=dict)

    @classmethod
    def from_path(cls, path) -> "RecordScoreSource":
        from .conformal import nll_score

        scores: dict[tuple[str, int, int], float] = {}
        for rec in iter_records(path):
            if rec.key in scores:
                raise RecordFormatError(f"duplicate record {rec.key!r}")
            scores[rec.key] = nll_score(rec.token_logprobs)
        return cls(scores)

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def input_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for input_id, _, _ in self.scores:
            seen.setdefault(input_id)
        return list(seen)

    def __call__(self, input_id: str, sample_id: int, turn: int = 0) -> float:
        try:
            return self.scores[(input_id, sample_id, turn)]
        except KeyError:
            raise KeyError(
                f"no record for input {input_id!r}, sample {sample_id}, turn {turn}"
            ) from None
