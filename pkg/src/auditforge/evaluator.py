"""Scores model audit reports against annotated corpora.

A reported finding counts as a true positive only when it locates the
vulnerability's position: its span must cover at least half of the
annotated span (or, when spans are absent on either side, the function
names must agree).  Label agreement is NOT required by default; a strict
mode adds it for sensitivity studies.  Matching is one-to-one and chosen
to maximize the number of matches and then total overlap, so it always
agrees with a brute-force optimal assignment.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .corpus import DatasetEntry, VulnerabilityAnnotation, normalize_label_id
from .lenient_json import extract_first_json_object

logger = logging.getLogger(__name__)

OVERLAP_THRESHOLD = 0.5
# eligible pairs get this bonus so the assignment maximizes match count
# before total overlap; individual overlaps are <= 1
_ELIGIBLE_BONUS = 1000.0


@dataclass(frozen=True)
class Finding:
    """One vulnerability reported by a model."""

    label_id: str
    label_name: str = ""
    span: tuple[int, int] | None = None
    function: str | None = None
    rationale: str = ""
    document_id: str | None = None

    @property
    def location_free(self) -> bool:
        return self.span is None and self.function is None


@dataclass(frozen=True)
class MatchResult:
    outcome: str  # TP | FP
    finding_index: int
    matched_annotation: VulnerabilityAnnotation | None = None
    overlap: float = 0.0

    def __post_init__(self) -> None:
        if self.outcome == "TP" and self.matched_annotation is None:
            raise ValueError("TP results must reference the matched annotation")


@dataclass(frozen=True)
class SecureScanCounts:
    """Aggregated results over secure contracts: findings there are false
    positives, clean scans are true negatives."""

    false_flags: int = 0
    clean: int = 0


@dataclass
class ScoreCard:
    model_id: str
    corpus_id: str
    tp: int
    fp: int
    fn: int
    tn: int
    recall: float | None = field(init=False)
    accuracy: float = field(init=False)
    per_category: dict[str, dict[str, int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("counts must be non-negative")
        positives = self.tp + self.fn
        self.recall = self.tp / positives if positives else None
        denom = self.tp + self.tn + self.fp + self.fn
        self.accuracy = (self.tp + self.tn) / denom if denom else 0.0


def parse_audit_report(raw: str) -> list[Finding]:
    """Parse a model's audit output into findings.

    Accepts a strict JSON document or JSON embedded in prose; an output with
    no parsable findings yields an empty list (a silent model simply scores
    all false negatives), never an error.
    """
    payload = extract_first_json_object(raw)
    if payload is None:
        if raw.strip():
            logger.warning("audit report contains no JSON object; scoring as empty")
        return []
    items = None
    for key in ("findings", "labels", "vulnerabilities"):
        if isinstance(payload.get(key), list):
            items = payload[key]
            break
    if items is None:
        logger.warning("audit report JSON has no findings list; scoring as empty")
        return []
    findings = []
    for item in items:
        if not isinstance(item, dict):
            logger.warning("skipping non-object finding entry: %r", item)
            continue
        label = item.get("label_id") or item.get("label") or item.get("label_name")
        if not label:
            logger.warning("skipping finding without a label: %r", item)
            continue
        span = None
        raw_span = item.get("span") if isinstance(item.get("span"), list) else item.get("lines")
        if isinstance(raw_span, list) and raw_span:
            try:
                numbers = [int(v) for v in raw_span]
                span = (min(numbers), max(numbers))
            except (TypeError, ValueError):
                span = None
        finding = Finding(
            label_id=normalize_label_id(str(label)),
            label_name=str(item.get("label_name") or label),
            span=span,
            function=item.get("function") or item.get("function_name"),
            rationale=str(item.get("rationale") or item.get("reason")
                          or item.get("description") or ""),
            document_id=item.get("contract_id") or item.get("document_id"),
        )
        if finding.location_free:
            logger.warning("finding %s carries no location", finding.label_id)
        findings.append(finding)
    return findings


def span_overlap_fraction(finding_span: tuple[int, int],
                          annotation_span: tuple[int, int]) -> float:
    """Overlap as a fraction of the annotation span (inclusive line spans)."""
    lo = max(finding_span[0], annotation_span[0])
    hi = min(finding_span[1], annotation_span[1])
    if hi < lo:
        return 0.0
    return (hi - lo + 1) / (annotation_span[1] - annotation_span[0] + 1)


def _pair_score(finding: Finding, annotation: VulnerabilityAnnotation,
                strict_labels: bool) -> float | None:
    """Match quality for an eligible (finding, annotation) pair, else None."""
    if strict_labels and finding.label_id != annotation.label_id:
        return None
    if finding.span is not None and annotation.span is not None:
        overlap = span_overlap_fraction(finding.span, annotation.span)
        return overlap if overlap >= OVERLAP_THRESHOLD else None
    # spans absent on either side: fall back to function-name agreement
    if finding.function and annotation.function:
        if finding.function.casefold() == annotation.function.casefold():
            return 1.0
    return None


def match_findings(
    findings: Sequence[Finding],
    annotations: Sequence[VulnerabilityAnnotation],
    strict_labels: bool = False,
    document_id: str | None = None,
) -> tuple[list[MatchResult], list[VulnerabilityAnnotation]]:
    """One-to-one position matching of findings against ground truth.

    Returns one MatchResult per finding (TP when matched, FP otherwise) plus
    the list of unmatched annotations (the false negatives).  The assignment
    maximizes the number of matches and, among those, total span overlap.
    """
    if document_id is not None:
        for finding in findings:
            if finding.document_id is not None and finding.document_id != document_id:
                raise ValueError(
                    f"finding references document {finding.document_id!r}, "
                    f"expected {document_id!r}"
                )
    assigned: dict[int, tuple[int, float]] = {}
    if findings and annotations:
        weights = np.zeros((len(findings), len(annotations)))
        eligible = np.zeros((len(findings), len(annotations)), dtype=bool)
        for i, finding in enumerate(findings):
            for j, annotation in enumerate(annotations):
                score = _pair_score(finding, annotation, strict_labels)
                if score is not None:
                    weights[i, j] = _ELIGIBLE_BONUS + score
                    eligible[i, j] = True
        rows, cols = linear_sum_assignment(weights, maximize=True)
        for i, j in zip(rows, cols):
            if eligible[i, j]:
                assigned[i] = (j, weights[i, j] - _ELIGIBLE_BONUS)

    matches: list[MatchResult] = []
    for i in range(len(findings)):
        if i in assigned:
            j, overlap = assigned[i]
            matches.append(MatchResult(
                outcome="TP", finding_index=i,
                matched_annotation=annotations[j], overlap=overlap,
            ))
        else:
            matches.append(MatchResult(outcome="FP", finding_index=i))
    matched_annotation_indices = {j for j, _ in assigned.values()}
    unmatched = [annotation for j, annotation in enumerate(annotations)
                 if j not in matched_annotation_indices]
    return matches, unmatched


def score(
    matches: Sequence[MatchResult],
    unmatched_annotations: Sequence[VulnerabilityAnnotation],
    secure_results: SecureScanCounts = SecureScanCounts(),
    model_id: str = "",
    corpus_id: str = "",
) -> ScoreCard:
    """Total the four outcomes into a score card with recall and accuracy."""
    tp = sum(1 for match in matches if match.outcome == "TP")
    fp = sum(1 for match in matches if match.outcome == "FP") + secure_results.false_flags
    fn = len(unmatched_annotations)
    tn = secure_results.clean
    per_category: dict[str, dict[str, int]] = {}
    for match in matches:
        if match.outcome == "TP":
            bucket = per_category.setdefault(match.matched_annotation.category,
                                             {"TP": 0, "FN": 0})
            bucket["TP"] += 1
    for annotation in unmatched_annotations:
        bucket = per_category.setdefault(annotation.category, {"TP": 0, "FN": 0})
        bucket["FN"] += 1
    card = ScoreCard(model_id=model_id, corpus_id=corpus_id,
                     tp=tp, fp=fp, fn=fn, tn=tn)
    card.per_category = per_category
    return card


def _format_percent(value: float | None) -> str:
    if value is None:
        return "n/a"
    return f"{value * 100:.2f}%"


def emit_comparison(cards: Sequence[ScoreCard], format: str = "markdown-table") -> str:
    """Render score cards side by side, ordered by model id."""
    corpora = {card.corpus_id for card in cards}
    if len(corpora) > 1:
        raise ValueError(f"cards must share one corpus, got {sorted(corpora)}")
    categories = sorted({cat for card in cards for cat in card.per_category})
    header = ["model"] + categories + ["TP", "FP", "FN", "TN", "recall", "accuracy"]
    rows = []
    for card in sorted(cards, key=lambda c: c.model_id):
        row = [card.model_id]
        row.extend(str(card.per_category.get(cat, {}).get("TP", 0)) for cat in categories)
        row.extend([str(card.tp), str(card.fp), str(card.fn), str(card.tn),
                    _format_percent(card.recall), _format_percent(card.accuracy)])
        rows.append(row)
    if format == "csv":
        lines = [",".join(header)] + [",".join(row) for row in rows]
        return "\n".join(lines) + "\n"
    if format == "markdown-table":
        lines = ["| " + " | ".join(header) + " |",
                 "| " + " | ".join("---" for _ in header) + " |"]
        lines.extend("| " + " | ".join(row) + " |" for row in rows)
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown comparison format {format!r}")


def _report_files(reports_dir: Path) -> dict[tuple[str, str], Path]:
    files: dict[tuple[str, str], Path] = {}
    for path in sorted(reports_dir.iterdir()):
        if not path.is_file() or path.suffix not in (".txt", ".json"):
            continue
        stem = path.stem
        if "__" not in stem:
            logger.warning("skipping report file with unrecognized name: %s", path.name)
            continue
        model_id, entry_id = stem.split("__", 1)
        files[(model_id, entry_id)] = path
    return files


def evaluate_reports(
    entries: Sequence[DatasetEntry],
    reports_dir: str | Path,
    corpus_id: str = "",
    strict_labels: bool = False,
    models: Iterable[str] | None = None,
) -> list[ScoreCard]:
    """Score every model found in a directory of per-contract audit reports.

    Layout: one file per (model, entry) named ``<model_id>__<entry_id>.txt``
    or ``.json``.  A missing or unparsable report counts as a silent scan.
    """
    reports_dir = Path(reports_dir)
    files = _report_files(reports_dir)
    model_ids = sorted(models) if models is not None else sorted({m for m, _ in files})
    cards = []
    for model_id in model_ids:
        all_matches: list[MatchResult] = []
        all_unmatched: list[VulnerabilityAnnotation] = []
        false_flags = 0
        clean = 0
        for entry in entries:
            path = files.get((model_id, entry.entry_id))
            findings = parse_audit_report(path.read_text(encoding="utf-8")) if path else []
            if entry.polarity == "secure":
                if findings:
                    false_flags += len(findings)
                else:
                    clean += 1
                continue
            matches, unmatched = match_findings(
                findings, entry.annotations,
                strict_labels=strict_labels, document_id=entry.entry_id,
            )
            all_matches.extend(matches)
            all_unmatched.extend(unmatched)
        cards.append(score(
            all_matches, all_unmatched,
            SecureScanCounts(false_flags=false_flags, clean=clean),
            model_id=model_id, corpus_id=corpus_id,
        ))
    return cards
