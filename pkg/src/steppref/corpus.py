"""Domain types and line-delimited dataset I/O.

A dataset file is UTF-8 JSON lines: the first line is a header record
(kind, config fingerprint, upstream content hash), every following line is
one body record. Record schemas by kind:

  D                problems: id, question, gold_answer, style
  D_GEN / D_RFT    rationales: id (problem id) + steps, conclusion,
                   producer, label, extracted_answer
  D_PAIR / D_GPAIR preference pairs: id, input, chosen, rejected,
                   granularity, pit_index (chosen/rejected are nested
                   rationale objects)

Serialization is deterministic (sorted keys, compact separators, explicit
nulls) so identical records always produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .extraction import canonicalize

KIND_D = "D"
KIND_GEN = "D_GEN"
KIND_RFT = "D_RFT"
KIND_PAIR = "D_PAIR"
KIND_GPAIR = "D_GPAIR"
KINDS = (KIND_D, KIND_GEN, KIND_RFT, KIND_PAIR, KIND_GPAIR)

STYLES = ("answer-line", "boxed")
PRODUCERS = ("SFT", "RFT", "EXPLORER", "HUMAN", "SYNTH")
LABELS = ("correct", "incorrect", "ungraded")

GRAN_OUTCOME = "outcome"
GRAN_FULL = "granular-full"
GRAN_FIRST_STEP = "granular-first-step"
GRAN_REJECT_ALL = "granular-reject-all"
GRANULARITIES = (GRAN_OUTCOME, GRAN_FULL, GRAN_FIRST_STEP, GRAN_REJECT_ALL)


class DatasetParseError(ValueError):
    """A malformed dataset line; carries the 1-based line number."""

    def __init__(self, line_no: int, detail: str):
        super().__init__(f"line {line_no}: {detail}")
        self.line_no = line_no


class DatasetSchemaError(ValueError):
    """Header kind does not match the kind requested by the reader."""


@dataclass(frozen=True)
class Problem:
    id: str
    question: str
    gold_answer: str
    style: str = "answer-line"

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("problem id must be non-empty")
        if self.style not in STYLES:
            raise ValueError(f"unknown style: {self.style!r}")
        if not self.gold_answer:
            raise ValueError("gold_answer must be non-empty")
        if canonicalize(self.gold_answer) != self.gold_answer:
            raise ValueError(f"gold_answer not canonical: {self.gold_answer!r}")


@dataclass(frozen=True)
class Rationale:
    """An ordered chain of reasoning steps plus an optional conclusion line."""

    steps: tuple[str, ...]
    conclusion: str | None = None
    producer: str = "SYNTH"
    label: str = "ungraded"
    extracted_answer: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if self.producer not in PRODUCERS:
            raise ValueError(f"unknown producer: {self.producer!r}")
        if self.label not in LABELS:
            raise ValueError(f"unknown label: {self.label!r}")
        if any(not s for s in self.steps):
            raise ValueError("steps must be non-empty lines")
        if self.label != "ungraded" and not self.steps:
            raise ValueError("graded rationale must have at least one step")
        if self.label == "correct" and not self.extracted_answer:
            raise ValueError("correct rationale must carry its extracted answer")

    def text(self) -> str:
        parts = list(self.steps)
        if self.conclusion is not None:
            parts.append(self.conclusion)
        return "\n".join(parts)


@dataclass(frozen=True)
class RationaleRecord:
    """A rationale tied to its problem id (D_GEN / D_RFT body record)."""

    problem_id: str
    rationale: Rationale

    def __post_init__(self) -> None:
        if not self.problem_id:
            raise ValueError("problem_id must be non-empty")


@dataclass(frozen=True)
class PairRecord:
    """One preference pair: shared input, chosen and rejected payloads."""

    problem_id: str
    input: str
    chosen: Rationale
    rejected: Rationale
    granularity: str = GRAN_OUTCOME
    pit_index: int | None = None

    def __post_init__(self) -> None:
        if not self.problem_id:
            raise ValueError("problem_id must be non-empty")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity: {self.granularity!r}")
        if self.rejected.conclusion is not None:
            raise ValueError("rejected payload must not carry a conclusion")
        if self.granularity == GRAN_OUTCOME:
            if self.pit_index is not None:
                raise ValueError("outcome pair must not carry pit_index")
            if self.chosen.label != "correct":
                raise ValueError("outcome chosen must be labeled correct")
            if self.rejected.label != "incorrect":
                raise ValueError("outcome rejected must be labeled incorrect")
        else:
            if self.pit_index is None or self.pit_index < 1:
                raise ValueError("granular pair needs a 1-based pit_index")


@dataclass(frozen=True)
class DatasetHeader:
    kind: str
    created_with: dict[str, Any] = field(default_factory=dict)
    source_hash: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind: {self.kind!r}")


Record = Problem | RationaleRecord | PairRecord

_RECORD_TYPES: dict[str, type] = {
    KIND_D: Problem,
    KIND_GEN: RationaleRecord,
    KIND_RFT: RationaleRecord,
    KIND_PAIR: PairRecord,
    KIND_GPAIR: PairRecord,
}


def _dumps(obj: dict[str, Any]) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def _rationale_to_dict(r: Rationale) -> dict[str, Any]:
    return {
        "steps": list(r.steps),
        "conclusion": r.conclusion,
        "producer": r.producer,
        "label": r.label,
        "extracted_answer": r.extracted_answer,
    }


def _rationale_from_dict(d: dict[str, Any]) -> Rationale:
    return Rationale(
        steps=tuple(d["steps"]),
        conclusion=d.get("conclusion"),
        producer=d["producer"],
        label=d["label"],
        extracted_answer=d.get("extracted_answer"),
    )


def record_to_dict(rec: Record) -> dict[str, Any]:
    if isinstance(rec, Problem):
        return {
            "id": rec.id,
            "question": rec.question,
            "gold_answer": rec.gold_answer,
            "style": rec.style,
        }
    if isinstance(rec, RationaleRecord):
        return {"id": rec.problem_id, **_rationale_to_dict(rec.rationale)}
    if isinstance(rec, PairRecord):
        return {
            "id": rec.problem_id,
            "input": rec.input,
            "chosen": _rationale_to_dict(rec.chosen),
            "rejected": _rationale_to_dict(rec.rejected),
            "granularity": rec.granularity,
            "pit_index": rec.pit_index,
        }
    raise TypeError(f"not a dataset record: {type(rec).__name__}")


def record_from_dict(d: dict[str, Any], kind: str) -> Record:
    if kind == KIND_D:
        return Problem(
            id=d["id"],
            question=d["question"],
            gold_answer=d["gold_answer"],
            style=d["style"],
        )
    if kind in (KIND_GEN, KIND_RFT):
        return RationaleRecord(problem_id=d["id"], rationale=_rationale_from_dict(d))
    if kind in (KIND_PAIR, KIND_GPAIR):
        return PairRecord(
            problem_id=d["id"],
            input=d["input"],
            chosen=_rationale_from_dict(d["chosen"]),
            rejected=_rationale_from_dict(d["rejected"]),
            granularity=d["granularity"],
            pit_index=d.get("pit_index"),
        )
    raise ValueError(f"unknown dataset kind: {kind!r}")


def read_dataset(path: str | Path, kind: str) -> tuple[list[Record], DatasetHeader]:
    """Parse a dataset file, checking its header against `kind`."""
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind: {kind!r}")
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetParseError(1, "missing header record")
    try:
        head = json.loads(lines[0])
        header = DatasetHeader(
            kind=head["kind"],
            created_with=head.get("created_with", {}),
            source_hash=head.get("source_hash", ""),
        )
    except DatasetSchemaError:
        raise
    except Exception as e:
        raise DatasetParseError(1, f"bad header: {e}") from e
    if header.kind != kind:
        raise DatasetSchemaError(
            f"requested kind {kind} but file header declares {header.kind}"
        )
    records: list[Record] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(record_from_dict(json.loads(line), kind))
        except Exception as e:
            raise DatasetParseError(line_no, str(e)) from e
    return records, header


def write_dataset(records: list[Record], header: DatasetHeader, path: str | Path) -> None:
    """Write header + records; rejects mixed/mismatched records before writing.

    header.source_hash is advisory and is not checked against anything here.
    """
    want = _RECORD_TYPES[header.kind]
    for rec in records:
        if not isinstance(rec, want):
            raise ValueError(
                f"record of type {type(rec).__name__} does not belong in a "
                f"{header.kind} dataset"
            )
    out = [_dumps({"kind": header.kind, "created_with": header.created_with,
                   "source_hash": header.source_hash})]
    out.extend(_dumps(record_to_dict(r)) for r in records)
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
