"""Canonical data model and persistence for contract datasets.

The unit of work everywhere in the pipeline is the :class:`DatasetEntry`:
one contract together with its vulnerability annotations (or a
secure-contract rationale), a polarity, and provenance.  Entries are
persisted as JSONL with an explicit schema-version header line so that
multi-round dataset chains stay self-describing.

In-memory values are treated as immutable after construction and are safe
to share across threads; writers always go through an atomic
write-temp-then-rename.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .ioutil import atomic_write_text

ENTRY_SCHEMA = "entry/1"
INSTRUCTION_SCHEMA = "instr/1"

POLARITIES = ("vulnerable", "secure")
PROVENANCES = ("seed", "distilled-vulnerable", "distilled-secure", "manual")

UNCATEGORIZED = "uncategorized"
CATEGORY_CODES = ("V1", "V2", "V3", "V4", "V5", "V6", "V7", "V8", "V9")
CATEGORY_NAMES = {
    "V1": "bad-randomness",
    "V2": "reentrancy",
    "V3": "unchecked-low-level-calls",
    "V4": "other",
    "V5": "denial-of-service",
    "V6": "front-running",
    "V7": "access-control",
    "V8": "arithmetic",
    "V9": "time-manipulation",
}

# Free-form label names map onto categories through this alias table.  The
# label vocabulary in the wild is open-ended, so the table is extensible via
# `register_label_alias`.
DEFAULT_LABEL_ALIASES: dict[str, str] = {
    "bad-randomness": "V1",
    "weak-randomness": "V1",
    "predictable-randomness": "V1",
    "randomness": "V1",
    "reentrancy": "V2",
    "re-entrancy": "V2",
    "reentrance": "V2",
    "cross-function-reentrancy": "V2",
    "unchecked-low-level-calls": "V3",
    "unchecked-low-level-call": "V3",
    "unchecked-call": "V3",
    "unchecked-send": "V3",
    "unchecked-return-value": "V3",
    "unchecked-return-values": "V3",
    "unchecked-return-calls": "V3",
    "low-level-calls": "V3",
    "other": "V4",
    "short-address": "V4",
    "short-addresses": "V4",
    "denial-of-service": "V5",
    "dos": "V5",
    "gas-limit-dos": "V5",
    "unbounded-loop": "V5",
    "front-running": "V6",
    "frontrunning": "V6",
    "transaction-ordering-dependence": "V6",
    "tod": "V6",
    "race-condition": "V6",
    "access-control": "V7",
    "unprotected-function": "V7",
    "unprotected-selfdestruct": "V7",
    "suicidal": "V7",
    "authorization": "V7",
    "tx-origin": "V7",
    "default-visibility": "V7",
    "arithmetic": "V8",
    "arithmetic-bugs": "V8",
    "integer-overflow": "V8",
    "integer-underflow": "V8",
    "overflow": "V8",
    "underflow": "V8",
    "time-manipulation": "V9",
    "timestamp-dependence": "V9",
    "timestamp-dependency": "V9",
    "block-timestamp": "V9",
    "time-dependency": "V9",
}

_LABEL_ALIASES = dict(DEFAULT_LABEL_ALIASES)

_FORBIDDEN_CONTROL = re.compile(r"[\x00-\x08\x0b-\x1f\x7f]")
_LABEL_ID_RE = re.compile(r"^[a-z0-9]+(-[a-z0-9]+)*$")
_ORIGIN_RE = re.compile(r"^(synthetic|on-chain|manual-labeled(:[\w.-]+)?)$")


class CorpusFormatError(ValueError):
    """A dataset file or record does not match the expected schema."""

    def __init__(self, message: str, *, path: str | Path | None = None,
                 line: int | None = None, field_name: str | None = None):
        self.path = str(path) if path is not None else None
        self.line = line
        self.field_name = field_name
        where = []
        if self.path is not None:
            where.append(f"file {self.path}")
        if line is not None:
            where.append(f"line {line}")
        if field_name is not None:
            where.append(f"field {field_name!r}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)


class DuplicateEntryError(ValueError):
    """Two dataset entries share an entry_id."""


def register_label_alias(label: str, category: str) -> None:
    """Extend the label-to-category alias table at runtime."""
    if category not in CATEGORY_CODES and category != UNCATEGORIZED:
        raise ValueError(f"unknown category {category!r}")
    _LABEL_ALIASES[normalize_label_id(label)] = category


def normalize_label_id(text: str) -> str:
    """Normalize a free-form label name to lower-case hyphen-separated form."""
    slug = re.sub(r"[^a-z0-9]+", "-", text.strip().lower()).strip("-")
    return slug


def categorize_label(label: str) -> str:
    """Map a label name onto its category code, or 'uncategorized'."""
    return _LABEL_ALIASES.get(normalize_label_id(label), UNCATEGORIZED)


def normalize_source_text(text: str) -> str:
    """Normalize line endings and drop control characters other than \\n and \\t."""
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    return _FORBIDDEN_CONTROL.sub("", text)


@dataclass
class ContractDocument:
    """One contract source text with its origin.  line_count is derived."""

    id: str
    source_text: str
    origin: str
    line_count: int = field(init=False)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("contract id must be non-empty")
        if _FORBIDDEN_CONTROL.search(self.source_text):
            raise ValueError(
                f"contract {self.id}: source_text contains control characters "
                "other than newline/tab"
            )
        if not _ORIGIN_RE.match(self.origin):
            raise ValueError(f"contract {self.id}: invalid origin {self.origin!r}")
        self.line_count = self.source_text.count("\n") + 1 if self.source_text else 0


@dataclass
class VulnerabilityAnnotation:
    """One tagged vulnerability: canonical label, category, optional location."""

    label_id: str
    label_name: str = ""
    category: str = ""
    span: tuple[int, int] | None = None
    function: str | None = None
    rationale: str = ""

    def __post_init__(self) -> None:
        if not self.label_id or not _LABEL_ID_RE.match(self.label_id):
            raise ValueError(
                f"label_id {self.label_id!r} must be non-empty, lower-case and "
                "hyphen-separated"
            )
        if not self.label_name:
            self.label_name = self.label_id
        if not self.category:
            self.category = categorize_label(self.label_id)
        if self.category not in CATEGORY_CODES and self.category != UNCATEGORIZED:
            raise ValueError(f"unknown category {self.category!r}")
        if self.span is not None:
            start, end = self.span
            if not (1 <= start <= end):
                raise ValueError(f"invalid span {self.span!r}: need 1 <= start <= end")
            self.span = (int(start), int(end))


@dataclass
class DatasetEntry:
    """One (contract, labels, rationale) triple with polarity and provenance."""

    entry_id: str
    contract: ContractDocument
    annotations: list[VulnerabilityAnnotation]
    polarity: str
    provenance: str
    dataset_version: int = 0
    secure_rationale: str | None = None
    source_entry_id: str | None = None

    def __post_init__(self) -> None:
        if not self.entry_id:
            raise ValueError("entry_id must be non-empty")
        if self.polarity not in POLARITIES:
            raise ValueError(f"entry {self.entry_id}: invalid polarity {self.polarity!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(
                f"entry {self.entry_id}: invalid provenance {self.provenance!r}"
            )
        if self.dataset_version < 0:
            raise ValueError(f"entry {self.entry_id}: dataset_version must be >= 0")
        if self.polarity == "vulnerable" and not self.annotations:
            raise ValueError(
                f"entry {self.entry_id}: vulnerable entries need at least one annotation"
            )
        if self.polarity == "secure":
            if self.annotations:
                raise ValueError(
                    f"entry {self.entry_id}: secure entries must have no annotations"
                )
            if not self.secure_rationale:
                raise ValueError(
                    f"entry {self.entry_id}: secure entries need a secure_rationale"
                )
        for annotation in self.annotations:
            if annotation.span is not None and annotation.span[1] > self.contract.line_count:
                raise ValueError(
                    f"entry {self.entry_id}: annotation span {annotation.span} exceeds "
                    f"document length {self.contract.line_count}"
                )


@dataclass
class InstructionRecord:
    """The (instruction, input, output) training triple."""

    instruction: str
    input: str
    output: str

    def __post_init__(self) -> None:
        for name in ("instruction", "input", "output"):
            if not getattr(self, name):
                raise ValueError(f"instruction record field {name!r} must be non-empty")


def _annotation_to_json(annotation: VulnerabilityAnnotation) -> dict:
    payload: dict = {
        "label_id": annotation.label_id,
        "label_name": annotation.label_name,
        "category": annotation.category,
    }
    if annotation.span is not None:
        payload["span"] = list(annotation.span)
    if annotation.function is not None:
        payload["function"] = annotation.function
    payload["rationale"] = annotation.rationale
    return payload


def entry_to_json(entry: DatasetEntry) -> dict:
    """Serialize an entry into its canonical JSON object (fixed key order)."""
    payload: dict = {
        "schema": ENTRY_SCHEMA,
        "entry_id": entry.entry_id,
        "polarity": entry.polarity,
        "provenance": entry.provenance,
        "dataset_version": entry.dataset_version,
        "contract": {
            "id": entry.contract.id,
            "origin": entry.contract.origin,
            "text": entry.contract.source_text,
        },
        "annotations": [_annotation_to_json(a) for a in entry.annotations],
    }
    if entry.secure_rationale is not None:
        payload["secure_rationale"] = entry.secure_rationale
    if entry.source_entry_id is not None:
        payload["source_entry_id"] = entry.source_entry_id
    return payload


def _require(payload: dict, key: str, kind, *, path, line) -> object:
    if key not in payload:
        raise CorpusFormatError(f"missing key {key!r}", path=path, line=line, field_name=key)
    value = payload[key]
    if not isinstance(value, kind):
        raise CorpusFormatError(
            f"key {key!r} has wrong type {type(value).__name__}",
            path=path, line=line, field_name=key,
        )
    return value


def _parse_span(raw, *, path, line) -> tuple[int, int] | None:
    if raw is None:
        return None
    if (not isinstance(raw, list) or len(raw) != 2
            or not all(isinstance(v, int) for v in raw)):
        raise CorpusFormatError(
            f"span must be a [start, end] pair, got {raw!r}",
            path=path, line=line, field_name="span",
        )
    return (raw[0], raw[1])


def entry_from_json(payload: dict, *, path=None, line: int | None = None) -> DatasetEntry:
    """Rebuild an entry from its JSON object, validating the type invariants."""
    if payload.get("schema", ENTRY_SCHEMA) != ENTRY_SCHEMA:
        raise CorpusFormatError(
            f"unsupported entry schema {payload.get('schema')!r}",
            path=path, line=line, field_name="schema",
        )
    contract_payload = _require(payload, "contract", dict, path=path, line=line)
    try:
        contract = ContractDocument(
            id=_require(contract_payload, "id", str, path=path, line=line),
            source_text=_require(contract_payload, "text", str, path=path, line=line),
            origin=_require(contract_payload, "origin", str, path=path, line=line),
        )
        annotations = []
        for raw in _require(payload, "annotations", list, path=path, line=line):
            if not isinstance(raw, dict):
                raise CorpusFormatError(
                    "annotation must be an object",
                    path=path, line=line, field_name="annotations",
                )
            annotations.append(VulnerabilityAnnotation(
                label_id=_require(raw, "label_id", str, path=path, line=line),
                label_name=raw.get("label_name", ""),
                category=raw.get("category", ""),
                span=_parse_span(raw.get("span"), path=path, line=line),
                function=raw.get("function"),
                rationale=raw.get("rationale", ""),
            ))
        return DatasetEntry(
            entry_id=_require(payload, "entry_id", str, path=path, line=line),
            contract=contract,
            annotations=annotations,
            polarity=_require(payload, "polarity", str, path=path, line=line),
            provenance=_require(payload, "provenance", str, path=path, line=line),
            dataset_version=_require(payload, "dataset_version", int, path=path, line=line),
            secure_rationale=payload.get("secure_rationale"),
            source_entry_id=payload.get("source_entry_id"),
        )
    except CorpusFormatError:
        raise
    except ValueError as exc:
        raise CorpusFormatError(str(exc), path=path, line=line) from exc


def _dump(payload: dict) -> str:
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


def write_entries(entries: list[DatasetEntry], path: str | Path) -> None:
    """Write entries as canonical JSONL: one header line, then one entry per line."""
    seen: set[str] = set()
    for entry in entries:
        if entry.entry_id in seen:
            raise DuplicateEntryError(f"duplicate entry_id {entry.entry_id!r}")
        seen.add(entry.entry_id)
    lines = [_dump({"schema": ENTRY_SCHEMA, "count": len(entries)})]
    lines.extend(_dump(entry_to_json(entry)) for entry in entries)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_entries(path: str | Path) -> list[DatasetEntry]:
    """Read a file produced by :func:`write_entries`."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusFormatError(f"cannot read dataset: {exc}", path=path) from exc
    lines = text.split("\n")
    if not lines[0].strip():
        raise CorpusFormatError("missing schema header line", path=path, line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"invalid header: {exc}", path=path, line=1) from exc
    if not isinstance(header, dict) or header.get("schema") != ENTRY_SCHEMA:
        raise CorpusFormatError(
            f"schema version mismatch: expected {ENTRY_SCHEMA!r}, "
            f"got {header.get('schema') if isinstance(header, dict) else header!r}",
            path=path, line=1, field_name="schema",
        )
    return _parse_entry_lines(lines[1:], path=path, first_line=2)


def _parse_entry_lines(lines: list[str], *, path, first_line: int) -> list[DatasetEntry]:
    entries = []
    for offset, raw in enumerate(lines):
        line_no = first_line + offset
        if not raw.strip():
            continue
        try:
            payload = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"invalid JSON: {exc}", path=path, line=line_no) from exc
        if not isinstance(payload, dict):
            raise CorpusFormatError("entry line must be a JSON object", path=path, line=line_no)
        entries.append(entry_from_json(payload, path=path, line=line_no))
    return entries


def load_annotated_corpus(path: str | Path, format: str) -> list[DatasetEntry]:
    """Load an annotated benchmark corpus into dataset entries.

    Two formats are supported: ``entries-jsonl`` (our own JSONL, header line
    optional, empty file allowed) and ``annotated-json`` (one JSON document
    listing contracts with tagged vulnerabilities, the shape used by curated
    benchmark corpora).  Order follows the file.
    """
    path = Path(path)
    if format == "entries-jsonl":
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise CorpusFormatError(f"cannot read corpus: {exc}", path=path) from exc
        lines = text.split("\n")
        if not any(line.strip() for line in lines):
            return []
        first = json.loads(lines[0]) if _is_json_object(lines[0]) else None
        if isinstance(first, dict) and "entry_id" not in first:
            # header line
            if first.get("schema") not in (None, ENTRY_SCHEMA):
                raise CorpusFormatError(
                    f"schema version mismatch: {first.get('schema')!r}",
                    path=path, line=1, field_name="schema",
                )
            return _parse_entry_lines(lines[1:], path=path, first_line=2)
        return _parse_entry_lines(lines, path=path, first_line=1)
    if format == "annotated-json":
        return _load_annotated_json(path)
    raise ValueError(f"unknown corpus format {format!r}")


def _is_json_object(line: str) -> bool:
    try:
        return isinstance(json.loads(line), dict)
    except json.JSONDecodeError:
        return False


def _load_annotated_json(path: Path) -> list[DatasetEntry]:
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CorpusFormatError(f"cannot read corpus: {exc}", path=path) from exc
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"invalid JSON: {exc}", path=path) from exc
    if isinstance(document, dict):
        source_name = document.get("source_name")
        records = document.get("contracts")
        if not isinstance(records, list):
            raise CorpusFormatError(
                "expected a 'contracts' list", path=path, field_name="contracts"
            )
    elif isinstance(document, list):
        source_name, records = None, document
    else:
        raise CorpusFormatError("expected a JSON object or array", path=path)
    origin = f"manual-labeled:{source_name}" if source_name else "manual-labeled"

    entries = []
    for index, record in enumerate(records, start=1):
        if not isinstance(record, dict):
            raise CorpusFormatError(f"record {index} must be an object", path=path, line=index)
        contract_id = record.get("id") or record.get("name")
        if not contract_id:
            raise CorpusFormatError(
                f"record {index} has no id", path=path, line=index, field_name="id"
            )
        source = record.get("source") or record.get("source_text") or record.get("code")
        if not isinstance(source, str) or not source:
            raise CorpusFormatError(
                f"record {index} ({contract_id}) has no source text",
                path=path, line=index, field_name="source",
            )
        try:
            contract = ContractDocument(
                id=str(contract_id),
                source_text=normalize_source_text(source),
                origin=origin,
            )
            annotations = [
                _annotation_from_tag(tag, index=index, path=path)
                for tag in record.get("vulnerabilities", [])
            ]
            polarity = "vulnerable" if annotations else "secure"
            entries.append(DatasetEntry(
                entry_id=str(contract_id),
                contract=contract,
                annotations=annotations,
                polarity=polarity,
                provenance="manual",
                dataset_version=0,
                secure_rationale=record.get("secure_rationale") if polarity == "secure" else None,
            ))
        except CorpusFormatError:
            raise
        except ValueError as exc:
            raise CorpusFormatError(str(exc), path=path, line=index) from exc
    return entries


def _annotation_from_tag(tag: dict, *, index: int, path) -> VulnerabilityAnnotation:
    if not isinstance(tag, dict):
        raise CorpusFormatError(
            f"record {index}: vulnerability tag must be an object",
            path=path, line=index, field_name="vulnerabilities",
        )
    label = tag.get("label") or tag.get("label_id") or tag.get("category") or tag.get("name")
    if not label:
        raise CorpusFormatError(
            f"record {index}: vulnerability tag has no label",
            path=path, line=index, field_name="label",
        )
    span = None
    if isinstance(tag.get("span"), list) and len(tag["span"]) == 2:
        span = (int(tag["span"][0]), int(tag["span"][1]))
    elif isinstance(tag.get("lines"), list) and tag["lines"]:
        lines = [int(v) for v in tag["lines"]]
        span = (min(lines), max(lines))
    explicit = tag.get("category") if tag.get("category") in CATEGORY_CODES else ""
    return VulnerabilityAnnotation(
        label_id=normalize_label_id(str(label)),
        label_name=str(tag.get("label_name") or tag.get("name") or label),
        category=explicit,
        span=span,
        function=tag.get("function"),
        rationale=str(tag.get("rationale", "")),
    )


def merge_datasets(vulnerable: list[DatasetEntry],
                   secure: list[DatasetEntry]) -> list[DatasetEntry]:
    """Concatenate a vulnerable and a secure block into one dataset.

    Ordering is stable (vulnerable block then secure block); duplicate
    entry_ids across the inputs are rejected.
    """
    for entry in vulnerable:
        if entry.polarity != "vulnerable":
            raise ValueError(f"entry {entry.entry_id} in vulnerable input has "
                             f"polarity {entry.polarity!r}")
    for entry in secure:
        if entry.polarity != "secure":
            raise ValueError(f"entry {entry.entry_id} in secure input has "
                             f"polarity {entry.polarity!r}")
    seen: set[str] = set()
    for entry in list(vulnerable) + list(secure):
        if entry.entry_id in seen:
            raise DuplicateEntryError(f"duplicate entry_id {entry.entry_id!r}")
        seen.add(entry.entry_id)
    return list(vulnerable) + list(secure)


def write_instruction_records(records: list[InstructionRecord], path: str | Path) -> None:
    """Write instruction records as JSONL, one instr/1 object per line."""
    lines = [
        _dump({
            "schema": INSTRUCTION_SCHEMA,
            "instruction": record.instruction,
            "input": record.input,
            "output": record.output,
        })
        for record in records
    ]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_instruction_records(path: str | Path) -> list[InstructionRecord]:
    path = Path(path)
    records = []
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").split("\n"), start=1):
        if not raw.strip():
            continue
        try:
            payload = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"invalid JSON: {exc}", path=path, line=line_no) from exc
        if not isinstance(payload, dict) or payload.get("schema") != INSTRUCTION_SCHEMA:
            raise CorpusFormatError(
                f"schema version mismatch: {payload.get('schema') if isinstance(payload, dict) else payload!r}",
                path=path, line=line_no, field_name="schema",
            )
        try:
            records.append(InstructionRecord(
                instruction=_require(payload, "instruction", str, path=path, line=line_no),
                input=_require(payload, "input", str, path=path, line=line_no),
                output=_require(payload, "output", str, path=path, line=line_no),
            ))
        except ValueError as exc:
            if isinstance(exc, CorpusFormatError):
                raise
            raise CorpusFormatError(str(exc), path=path, line=line_no) from exc
    return records
