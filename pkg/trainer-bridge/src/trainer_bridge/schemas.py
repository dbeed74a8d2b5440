"""Wire formats the bridge speaks.

The bridge is coupled to the pipeline only through three line formats:
``instr/1`` instruction records in, ``entry/1`` dataset entries for
evaluation, and ``pred/1`` prediction records out.  The readers here are
deliberately independent of the pipeline's own code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

INSTRUCTION_SCHEMA = "instr/1"
ENTRY_SCHEMA = "entry/1"
PREDICTION_SCHEMA = "pred/1"


class SchemaValidationError(ValueError):
    """A dataset file does not match its declared schema."""

    def __init__(self, message: str, path: str | Path | None = None,
                 line: int | None = None):
        self.path = str(path) if path is not None else None
        self.line = line
        where = ""
        if path is not None and line is not None:
            where = f" ({path}, line {line})"
        elif path is not None:
            where = f" ({path})"
        super().__init__(message + where)


def validate_instruction_file(path: str | Path) -> int:
    """Validate an instr/1 JSONL file; returns the record count."""
    path = Path(path)
    count = 0
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").split("\n"), 1):
        if not raw.strip():
            continue
        try:
            payload = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaValidationError(f"invalid JSON: {exc}", path, line_no) from exc
        if not isinstance(payload, dict) or payload.get("schema") != INSTRUCTION_SCHEMA:
            raise SchemaValidationError(
                f"expected schema {INSTRUCTION_SCHEMA!r}", path, line_no)
        for key in ("instruction", "input", "output"):
            value = payload.get(key)
            if not isinstance(value, str) or not value:
                raise SchemaValidationError(
                    f"field {key!r} must be a non-empty string", path, line_no)
        count += 1
    return count


@dataclass(frozen=True)
class EvalEntry:
    """The slice of an entry/1 record the bridge needs for inference."""

    entry_id: str
    polarity: str
    label_id: str  # first annotation's label, or "secure"
    source_text: str


def read_eval_entries(path: str | Path) -> list[EvalEntry]:
    """Read an entry/1 JSONL evaluation set (header line optional)."""
    path = Path(path)
    entries = []
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").split("\n"), 1):
        if not raw.strip():
            continue
        try:
            payload = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaValidationError(f"invalid JSON: {exc}", path, line_no) from exc
        if not isinstance(payload, dict):
            raise SchemaValidationError("expected a JSON object", path, line_no)
        if "entry_id" not in payload:
            # header line
            if payload.get("schema") not in (None, ENTRY_SCHEMA):
                raise SchemaValidationError(
                    f"expected schema {ENTRY_SCHEMA!r}", path, line_no)
            continue
        annotations = payload.get("annotations") or []
        label = "secure"
        if annotations and isinstance(annotations[0], dict):
            label = annotations[0].get("label_id", "secure")
        try:
            entries.append(EvalEntry(
                entry_id=payload["entry_id"],
                polarity=payload.get("polarity", "vulnerable"),
                label_id=label,
                source_text=payload.get("contract", {}).get("text", ""),
            ))
        except (KeyError, TypeError) as exc:
            raise SchemaValidationError(str(exc), path, line_no) from exc
    return entries


def prediction_line(model_id: str, entry_id: str, label_probability: float,
                    predicted_label: str, rationale_presence: float,
                    rationale_correct: bool, raw_report: str = "") -> str:
    """Serialize one pred/1 record."""
    return json.dumps({
        "schema": PREDICTION_SCHEMA,
        "model_id": model_id,
        "entry_id": entry_id,
        "label_probability": label_probability,
        "predicted_labels": [
            {"label_id": predicted_label, "probability": label_probability},
        ],
        "rationale_presence": rationale_presence,
        "rationale_correct": rationale_correct,
        "raw_report": raw_report,
    }, ensure_ascii=False, separators=(",", ":"))
