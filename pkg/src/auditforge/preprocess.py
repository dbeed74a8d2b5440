"""Turns raw dataset entries into a training-ready instruction dataset.

Cleaning is a total, idempotent text normalization.  Instruction records
follow the (instruction, input, output) triple; records whose total token
count exceeds the context limit are dropped.  Near-duplicate removal uses
a deterministic hashed character-n-gram embedding with cosine similarity,
so the whole stage runs offline; a sentence-embedding model can be plugged
in behind the same interface.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .corpus import DatasetEntry, InstructionRecord

EMBEDDING_DIM = 256
_NGRAM_SIZE = 5

DEFAULT_MAX_TOKENS = 4096
DEFAULT_DEDUP_THRESHOLD = 0.9

DEFAULT_INSTRUCTION = (
    "Review the following Solidity smart contract and report every security "
    "vulnerability you find, with its location and the reasoning behind each "
    "finding; if the contract is secure, say so."
)
NO_VULNERABILITY_STATEMENT = "No vulnerabilities detected."

# TextVector values are L2-normalized numpy arrays (or the zero vector for
# empty text).
TextVector = np.ndarray


@dataclass(frozen=True)
class CleaningConfig:
    strip_comments: bool = False
    collapse_blank_lines: bool = True
    normalize_line_endings: bool = True


@dataclass(frozen=True)
class DedupDecision:
    entry_id: str
    kept: bool
    nearest_kept_id: str | None
    similarity: float

    def __post_init__(self) -> None:
        if not self.kept and self.nearest_kept_id is None:
            raise ValueError("removed entries must name the nearest kept entry")


_CONTROL_RE = re.compile(r"[\x00-\x08\x0b-\x1f\x7f]")


def _strip_solidity_comments(text: str) -> str:
    """Remove // and /*...*/ comments outside string literals.

    Block comments are replaced by a single space (newlines inside them are
    preserved) so that token boundaries and line numbering survive and the
    operation stays idempotent.
    """
    out: list[str] = []
    i = 0
    n = len(text)
    state = "code"  # code | line-comment | block-comment | dquote | squote
    while i < n:
        char = text[i]
        nxt = text[i + 1] if i + 1 < n else ""
        if state == "code":
            if char == "/" and nxt == "/":
                state = "line-comment"
                i += 2
                continue
            if char == "/" and nxt == "*":
                state = "block-comment"
                out.append(" ")
                i += 2
                continue
            if char == '"':
                state = "dquote"
            elif char == "'":
                state = "squote"
            out.append(char)
            i += 1
        elif state == "line-comment":
            if char == "\n":
                out.append(char)
                state = "code"
            i += 1
        elif state == "block-comment":
            if char == "*" and nxt == "/":
                state = "code"
                i += 2
                continue
            if char == "\n":
                out.append(char)
            i += 1
        else:  # inside a string literal
            out.append(char)
            if char == "\\" and nxt:
                out.append(nxt)
                i += 2
                continue
            if (state == "dquote" and char == '"') or (state == "squote" and char == "'"):
                state = "code"
            i += 1
    return "".join(out)


def clean(text: str, config: CleaningConfig = CleaningConfig()) -> str:
    """Normalize text: line endings, control characters, trailing whitespace,
    oversized blank runs, and (optionally) code comments.  Total and idempotent."""
    if config.normalize_line_endings:
        text = text.replace("\r\n", "\n").replace("\r", "\n")
    text = _CONTROL_RE.sub("", text)
    if config.strip_comments:
        text = _strip_solidity_comments(text)
    lines = [line.rstrip(" \t") for line in text.split("\n")]
    if config.collapse_blank_lines:
        collapsed: list[str] = []
        blank_run = 0
        for line in lines:
            if line == "":
                blank_run += 1
                continue
            if blank_run:
                # runs of more than two blank lines collapse to one
                collapsed.extend([""] * (1 if blank_run > 2 else blank_run))
                blank_run = 0
            collapsed.append(line)
        if blank_run:
            collapsed.extend([""] * (1 if blank_run > 2 else blank_run))
        lines = collapsed
    return "\n".join(lines)


def _serialize_output(entry: DatasetEntry) -> str:
    if entry.polarity == "secure":
        return f"{NO_VULNERABILITY_STATEMENT} {entry.secure_rationale}"
    findings = []
    for annotation in entry.annotations:
        finding: dict = {
            "label_id": annotation.label_id,
            "label_name": annotation.label_name,
        }
        if annotation.span is not None:
            finding["span"] = list(annotation.span)
        if annotation.function is not None:
            finding["function"] = annotation.function
        finding["rationale"] = annotation.rationale
        findings.append(finding)
    return json.dumps({"findings": findings}, ensure_ascii=False, separators=(",", ":"))


def to_instruction(entry: DatasetEntry, instruction_text: str = DEFAULT_INSTRUCTION,
                   cleaning: CleaningConfig = CleaningConfig()) -> InstructionRecord:
    """Build the (instruction, input, output) triple for one entry.

    The output is the canonical serialization of the entry's labels and
    rationales, or the no-vulnerability statement plus the secure rationale.
    Deterministic: identical entries yield byte-identical records.
    """
    return InstructionRecord(
        instruction=instruction_text,
        input=clean(entry.contract.source_text, cleaning),
        output=_serialize_output(entry),
    )


_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

_TOKENIZERS: dict[str, Callable[[str], int]] = {}


def register_tokenizer(name: str, counter: Callable[[str], int]) -> None:
    """Register an external tokenizer adapter under *name*."""
    _TOKENIZERS[name] = counter


def count_tokens(text: str, tokenizer: str = "default-regex") -> int:
    """Count tokens: maximal word-character runs plus each other
    non-whitespace character count as one token each."""
    if tokenizer == "default-regex":
        return len(_TOKEN_RE.findall(text))
    if tokenizer in _TOKENIZERS:
        return _TOKENIZERS[tokenizer](text)
    raise ValueError(f"unknown tokenizer {tokenizer!r}")


def record_token_count(record: InstructionRecord, tokenizer: str = "default-regex") -> int:
    return (count_tokens(record.instruction, tokenizer)
            + count_tokens(record.input, tokenizer)
            + count_tokens(record.output, tokenizer))


def filter_by_length(
    records: list[InstructionRecord],
    max_tokens: int = DEFAULT_MAX_TOKENS,
    tokenizer: str = "default-regex",
) -> tuple[list[InstructionRecord], list[InstructionRecord]]:
    """Split records into (kept, removed); a record is removed iff its total
    token count strictly exceeds *max_tokens*.  Order is preserved."""
    if max_tokens <= 0:
        raise ValueError("max_tokens must be positive")
    kept, removed = [], []
    for record in records:
        if record_token_count(record, tokenizer) > max_tokens:
            removed.append(record)
        else:
            kept.append(record)
    return kept, removed


def _hashed_ngram_vector(text: str) -> TextVector:
    cleaned = clean(text).lower()
    vector = np.zeros(EMBEDDING_DIM, dtype=np.float64)
    if len(cleaned) >= _NGRAM_SIZE:
        for i in range(len(cleaned) - _NGRAM_SIZE + 1):
            gram = cleaned[i:i + _NGRAM_SIZE]
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
            vector[int.from_bytes(digest, "big") % EMBEDDING_DIM] += 1.0
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        return vector
    return vector / norm


_EMBED_BACKENDS: dict[str, Callable[[str], TextVector]] = {
    "hashed-ngram": _hashed_ngram_vector,
}


def register_embedding_backend(name: str, embedder: Callable[[str], TextVector]) -> None:
    """Plug in an external embedding model behind the same interface."""
    _EMBED_BACKENDS[name] = embedder


def embed(text: str, backend: str = "hashed-ngram") -> TextVector:
    """Embed text as a unit vector (zero vector for empty text).  Deterministic."""
    if backend not in _EMBED_BACKENDS:
        raise ValueError(f"unknown embedding backend {backend!r}")
    return _EMBED_BACKENDS[backend](text)


def cosine(a: TextVector, b: TextVector) -> float:
    """Cosine similarity with the zero-vector convention cos(0, x) = 0."""
    value = float(np.dot(a, b))
    return max(-1.0, min(1.0, value))


_PROVENANCE_PRIORITY = {
    "manual": 0,
    "seed": 1,
    "distilled-vulnerable": 2,
    "distilled-secure": 2,
}


def dedup(
    entries: list[DatasetEntry],
    threshold: float = DEFAULT_DEDUP_THRESHOLD,
    backend: str = "hashed-ngram",
) -> tuple[list[DatasetEntry], list[DedupDecision]]:
    """Greedy keep-first near-duplicate removal over contract texts.

    Entries are scanned in priority order (manual before seed before
    distilled, insertion order within a tier); an entry is kept iff its
    maximum cosine similarity against everything already kept is below the
    threshold.  The kept set is therefore pairwise below the threshold, and
    every removal names a kept entry at or above it.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    ordered = sorted(
        range(len(entries)),
        key=lambda i: (_PROVENANCE_PRIORITY.get(entries[i].provenance, 3), i),
    )
    kept: list[DatasetEntry] = []
    kept_vectors: list[TextVector] = []
    log: list[DedupDecision] = []
    for index in ordered:
        entry = entries[index]
        vector = embed(entry.contract.source_text, backend=backend)
        nearest_id: str | None = None
        nearest_sim = -math.inf
        if kept_vectors:
            sims = np.array(kept_vectors) @ vector
            best = int(np.argmax(sims))
            nearest_id = kept[best].entry_id
            nearest_sim = max(-1.0, min(1.0, float(sims[best])))
        if nearest_id is not None and nearest_sim >= threshold:
            log.append(DedupDecision(
                entry_id=entry.entry_id, kept=False,
                nearest_kept_id=nearest_id, similarity=nearest_sim,
            ))
            continue
        log.append(DedupDecision(
            entry_id=entry.entry_id, kept=True,
            nearest_kept_id=nearest_id,
            similarity=nearest_sim if nearest_id is not None else 0.0,
        ))
        kept.append(entry)
        kept_vectors.append(vector)
    return kept, log


@dataclass
class RemovalRecord:
    entry_id: str
    reason: str  # near-duplicate | over-token-limit
    detail: dict


@dataclass
class PreprocessResult:
    instructions: list[InstructionRecord]
    kept_entries: list[DatasetEntry]
    removals: list[RemovalRecord]


def preprocess_entries(
    entries: list[DatasetEntry],
    instruction_text: str = DEFAULT_INSTRUCTION,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    dedup_threshold: float = DEFAULT_DEDUP_THRESHOLD,
    cleaning: CleaningConfig = CleaningConfig(),
    embed_backend: str = "hashed-ngram",
    tokenizer: str = "default-regex",
) -> PreprocessResult:
    """Full curation pass: dedup entries, build instruction records, drop
    over-length records.  Removals are reported with entry ids and reasons."""
    deduped, decisions = dedup(entries, threshold=dedup_threshold, backend=embed_backend)
    removals = [
        RemovalRecord(
            entry_id=decision.entry_id,
            reason="near-duplicate",
            detail={
                "nearest_kept_id": decision.nearest_kept_id,
                "similarity": round(decision.similarity, 6),
            },
        )
        for decision in decisions if not decision.kept
    ]
    instructions: list[InstructionRecord] = []
    kept_entries: list[DatasetEntry] = []
    for entry in deduped:
        record = to_instruction(entry, instruction_text, cleaning)
        total = record_token_count(record, tokenizer)
        if total > max_tokens:
            removals.append(RemovalRecord(
                entry_id=entry.entry_id,
                reason="over-token-limit",
                detail={"token_count": total, "max_tokens": max_tokens},
            ))
            continue
        instructions.append(record)
        kept_entries.append(entry)
    return PreprocessResult(instructions=instructions, kept_entries=kept_entries,
                            removals=removals)
