"""Loss computation and the dual-threshold continuous-learning gate.

The gate tracks a roster of models across dataset versions.  After each
fine-tuning round an external training backend produces one prediction log
per model (pred/1 JSONL); the combined loss per model decides its fate:
above the removal threshold the model is dropped, between the thresholds
the dataset is flagged for human revision, and at or below the finish
threshold the run completes with the current dataset version as the
training set.

All logarithms are natural.  Closed-form "assumed" variants replace
per-record probabilities with a uniform probability for correct and
incorrect predictions, which gives cheap baselines for threshold
calibration and an independent cross-check of the exact path.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import DatasetEntry, entry_to_json, read_entries, write_entries
from .ioutil import atomic_write_text

GATE_STATE_SCHEMA = "gate/1"
PREDICTION_SCHEMA = "pred/1"
REVISION_EVIDENCE_KEY = "revision_evidence"

_G_CLAMP = 1e-9

WELL_OPTIMIZED = "well-optimized"
ACCEPTABLE = "acceptable"
UNSUITABLE = "unsuitable"

STATUS_CANDIDATE = "candidate"
STATUS_SELECTED = "selected"
STATUS_FINE_TUNED = "fine-tuned"
STATUS_REMOVED = "removed"
_STATUSES = (STATUS_CANDIDATE, STATUS_SELECTED, STATUS_FINE_TUNED, STATUS_REMOVED)

OUTCOME_RUNNING = "running"
OUTCOME_FINISHED = "finished"
OUTCOME_EXHAUSTED = "exhausted"

WEIGHTING_NONE = "none"
WEIGHTING_BY_LABEL = "by-label-count"
WEIGHTING_BY_RATIONALE = "by-valid-rationale-count"


class GateStateError(ValueError):
    """The gate state machine was driven with inconsistent inputs."""


class PredictionLogError(ValueError):
    """A prediction log file or record is malformed."""


@dataclass(frozen=True)
class PredictedLabel:
    label_id: str
    probability: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(
                f"predicted label {self.label_id!r}: probability must be in [0, 1]"
            )


@dataclass(frozen=True)
class PredictionRecord:
    """One model's output for one dataset entry."""

    model_id: str
    entry_id: str
    label_probability: float
    predicted_labels: tuple[PredictedLabel, ...] = ()
    rationale_presence: float = 0.0
    rationale_correct: bool = False
    raw_report: str = ""

    def __post_init__(self) -> None:
        if not 0.0 < self.label_probability <= 1.0:
            raise ValueError(
                f"record {self.entry_id}: label_probability must be in (0, 1], "
                f"got {self.label_probability}"
            )
        if not 0.0 <= self.rationale_presence <= 1.0:
            raise ValueError(
                f"record {self.entry_id}: rationale_presence must be in [0, 1]"
            )


@dataclass(frozen=True)
class LossReport:
    """Label, rationale, and combined loss for one model on one dataset version."""

    model_id: str
    dataset_version: int
    total: int
    correct_count: int
    incorrect_count: int
    label_loss: float
    rationale_loss: float
    rationale_weight: float
    combined: float
    weighting: str = WEIGHTING_NONE

    def __post_init__(self) -> None:
        if self.total != self.correct_count + self.incorrect_count:
            raise ValueError("total must equal correct_count + incorrect_count")
        if self.weighting not in (WEIGHTING_NONE, WEIGHTING_BY_LABEL, WEIGHTING_BY_RATIONALE):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        expected = self.label_loss + self.rationale_weight * self.rationale_loss
        if abs(self.combined - expected) > 1e-12:
            raise ValueError(
                f"combined loss {self.combined} does not equal "
                f"label + weight * rationale = {expected}"
            )


@dataclass(frozen=True)
class GateConfig:
    """Thresholds and assumptions driving the gate."""

    baseline_label_loss: float = 1.12
    finish_threshold: float = 0.84
    removal_threshold: float = 1.74
    rationale_weight: float = 0.7
    assumed_correct_probability: float = 0.7
    assumed_rationale_confidence: float = 0.8
    max_iterations: int = 10
    revision_fraction: float = 0.1

    def __post_init__(self) -> None:
        if not 0 < self.finish_threshold < self.removal_threshold:
            raise ValueError("need 0 < finish_threshold < removal_threshold")
        if not 0 < self.assumed_correct_probability < 1:
            raise ValueError("assumed_correct_probability must be in (0, 1)")
        if not 0 < self.assumed_rationale_confidence < 1:
            raise ValueError("assumed_rationale_confidence must be in (0, 1)")
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if not 0 < self.revision_fraction <= 1:
            raise ValueError("revision_fraction must be in (0, 1]")


@dataclass
class ModelSlot:
    model_id: str
    status: str = STATUS_SELECTED
    last_report: LossReport | None = None

    def __post_init__(self) -> None:
        if self.status not in _STATUSES:
            raise ValueError(f"invalid model status {self.status!r}")


@dataclass
class GateAction:
    kind: str  # remove | request-revision | finish
    model_id: str


@dataclass
class GateState:
    """Resumable state of one enhancement run."""

    iteration: int
    roster: list[ModelSlot]
    dataset_chain: list[str]
    revision_queue: list[str] = field(default_factory=list)
    outcome: str = OUTCOME_RUNNING
    final_dataset: str | None = None
    config: GateConfig = GateConfig()

    def __post_init__(self) -> None:
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")
        if len(self.dataset_chain) != self.iteration + 1:
            raise ValueError(
                f"dataset_chain length {len(self.dataset_chain)} must equal "
                f"iteration + 1 = {self.iteration + 1}"
            )
        if self.outcome == OUTCOME_FINISHED and not self.final_dataset:
            raise ValueError("finished runs must carry the final dataset ref")

    def active_models(self) -> list[ModelSlot]:
        return [slot for slot in self.roster if slot.status != STATUS_REMOVED]

    def current_dataset(self) -> str:
        return self.dataset_chain[self.iteration]


# --- loss functions -------------------------------------------------------

def label_loss(records: Sequence[PredictionRecord]) -> float:
    """Mean negative log-probability of the true label."""
    if not records:
        raise ValueError("label_loss needs at least one record")
    total = 0.0
    for record in records:
        if record.label_probability <= 0.0:
            raise ValueError(
                f"record {record.entry_id}: zero label probability signals a "
                "degenerate prediction log"
            )
        total += math.log(record.label_probability)
    return -total / len(records)


def weighted_label_loss(
    records: Sequence[PredictionRecord],
    scheme: str,
    true_labels: Mapping[str, str] | None = None,
) -> float:
    """Inverse-frequency weighted label loss.

    Record weights are N / (C * N_class) where C is the number of distinct
    classes and N_class the size of the record's class: its true label under
    ``by-label-count`` (requires *true_labels*: entry_id -> label) or its
    rationale-validity class under ``by-valid-rationale-count``.  Reduces to
    :func:`label_loss` when all classes are equally sized.
    """
    if not records:
        raise ValueError("weighted_label_loss needs at least one record")
    if scheme == WEIGHTING_BY_LABEL:
        if true_labels is None:
            raise ValueError("by-label-count weighting needs the true-label mapping")
        try:
            classes = [true_labels[record.entry_id] for record in records]
        except KeyError as exc:
            raise ValueError(f"no true label for entry {exc.args[0]!r}") from exc
    elif scheme == WEIGHTING_BY_RATIONALE:
        classes = [record.rationale_correct for record in records]
    else:
        raise ValueError(f"unknown weighting scheme {scheme!r}")
    counts: dict = {}
    for cls in classes:
        counts[cls] = counts.get(cls, 0) + 1
    n = len(records)
    c = len(counts)
    total = 0.0
    for record, cls in zip(records, classes):
        if record.label_probability <= 0.0:
            raise ValueError(f"record {record.entry_id}: zero label probability")
        weight = n / (c * counts[cls])
        total += weight * math.log(record.label_probability)
    return -total / n


def rationale_loss(records: Sequence[PredictionRecord]) -> float:
    """Binary cross-entropy between rationale correctness and the model's
    rationale-presence score, clamped away from hard 0/1."""
    if not records:
        raise ValueError("rationale_loss needs at least one record")
    total = 0.0
    for record in records:
        presence = min(max(record.rationale_presence, _G_CLAMP), 1.0 - _G_CLAMP)
        target = 1.0 if record.rationale_correct else 0.0
        total += target * math.log(presence) + (1.0 - target) * math.log(1.0 - presence)
    return -total / len(records)


def combined_loss(label: float, rationale: float, weight: float) -> float:
    """Affine combination: label loss plus weighted rationale loss."""
    if label < 0 or rationale < 0 or weight < 0:
        raise ValueError("loss terms and weight must be non-negative")
    return label + weight * rationale


def assumed_label_loss(total: int, correct_count: int, correct_probability: float) -> float:
    """Closed-form label loss under a uniform probability assumption:
    correct predictions score p, incorrect ones 1 - p."""
    _check_assumed_bounds(total, correct_count, correct_probability, "correct_probability")
    incorrect = total - correct_count
    return -(correct_count * math.log(correct_probability)
             + incorrect * math.log(1.0 - correct_probability)) / total


def assumed_rationale_loss(total: int, correct_count: int, confidence: float) -> float:
    """Closed-form rationale loss under a uniform presence-confidence
    assumption: correct outputs score g, incorrect ones 1 - g."""
    _check_assumed_bounds(total, correct_count, confidence, "confidence")
    incorrect = total - correct_count
    return -(correct_count * math.log(confidence)
             + incorrect * math.log(1.0 - confidence)) / total


def _check_assumed_bounds(total: int, correct_count: int, probability: float,
                          name: str) -> None:
    if total <= 0:
        raise ValueError("total must be positive")
    if not 0 <= correct_count <= total:
        raise ValueError("correct_count must be within [0, total]")
    if not 0.0 < probability < 1.0:
        raise ValueError(f"{name} must be strictly inside (0, 1)")


def classify_model(loss: float, config: GateConfig) -> str:
    """Place a combined loss into exactly one band.

    At or below the finish threshold the model is well-optimized; above the
    removal threshold it is unsuitable; in between it is acceptable.
    """
    if loss < 0:
        raise ValueError("loss must be non-negative")
    if loss <= config.finish_threshold:
        return WELL_OPTIMIZED
    if loss <= config.removal_threshold:
        return ACCEPTABLE
    return UNSUITABLE


def initial_filter(candidates: Sequence[tuple[str, float]],
                   baseline_label_loss: float) -> list[str]:
    """Keep candidate models whose label loss falls strictly below the
    baseline; order is preserved."""
    if not candidates:
        raise ValueError("initial_filter needs at least one candidate")
    return [model_id for model_id, loss in candidates if loss < baseline_label_loss]


def loss_report_from_records(
    model_id: str,
    dataset_version: int,
    records: Sequence[PredictionRecord],
    config: GateConfig = GateConfig(),
    weighting: str = WEIGHTING_NONE,
    true_labels: Mapping[str, str] | None = None,
) -> LossReport:
    """Compute the exact LossReport for one model's prediction log."""
    if weighting == WEIGHTING_NONE:
        label = label_loss(records)
    else:
        label = weighted_label_loss(records, weighting, true_labels)
    rationale = rationale_loss(records)
    correct = sum(1 for record in records if record.rationale_correct)
    return LossReport(
        model_id=model_id,
        dataset_version=dataset_version,
        total=len(records),
        correct_count=correct,
        incorrect_count=len(records) - correct,
        label_loss=label,
        rationale_loss=rationale,
        rationale_weight=config.rationale_weight,
        combined=combined_loss(label, rationale, config.rationale_weight),
        weighting=weighting,
    )


# --- gate state machine ---------------------------------------------------

def init_gate_state(model_ids: Sequence[str], dataset_ref: str,
                    config: GateConfig = GateConfig(),
                    status: str = STATUS_SELECTED) -> GateState:
    if not model_ids:
        raise ValueError("gate needs at least one model")
    if len(set(model_ids)) != len(model_ids):
        raise ValueError("model ids must be unique")
    return GateState(
        iteration=0,
        roster=[ModelSlot(model_id=m, status=status) for m in model_ids],
        dataset_chain=[dataset_ref],
        config=config,
    )


def gate_step(
    state: GateState,
    reports: Sequence[LossReport],
    config: GateConfig | None = None,
    records_by_model: Mapping[str, Sequence[PredictionRecord]] | None = None,
) -> tuple[GateState, list[GateAction]]:
    """Apply one round of loss evaluation to the roster.

    Per model, in roster order: a loss above the removal threshold removes
    the model; a loss between the thresholds requests a dataset revision
    (the revision queue is filled with the hardest entries when prediction
    records are supplied); a loss at or below the finish threshold finishes
    the run with the current dataset version and stops processing further
    models.  Surviving fine-tuned models become the next round's selected
    set; the run is exhausted when no round remains or no model survives.
    """
    if state.outcome != OUTCOME_RUNNING:
        raise GateStateError(f"gate is not running (outcome={state.outcome})")
    config = config or state.config
    by_model = {}
    for report in reports:
        if report.model_id in by_model:
            raise GateStateError(f"duplicate report for model {report.model_id!r}")
        by_model[report.model_id] = report
    active_ids = [slot.model_id for slot in state.active_models()]
    unknown = set(by_model) - set(active_ids)
    if unknown:
        raise GateStateError(f"report for unknown or removed model {sorted(unknown)[0]!r}")
    missing = set(active_ids) - set(by_model)
    if missing:
        raise GateStateError(f"missing report for active model {sorted(missing)[0]!r}")
    for report in reports:
        if report.dataset_version != state.iteration:
            raise GateStateError(
                f"report for model {report.model_id!r} is for dataset version "
                f"{report.dataset_version}, gate is at {state.iteration}"
            )

    next_state = copy.deepcopy(state)
    actions: list[GateAction] = []
    revision_requested = False
    finished = False
    for slot in next_state.roster:
        if slot.status == STATUS_REMOVED:
            continue
        report = by_model[slot.model_id]
        slot.last_report = report
        slot.status = STATUS_FINE_TUNED
        verdict = classify_model(report.combined, config)
        if verdict == UNSUITABLE:
            slot.status = STATUS_REMOVED
            actions.append(GateAction("remove", slot.model_id))
        elif verdict == ACCEPTABLE:
            revision_requested = True
            actions.append(GateAction("request-revision", slot.model_id))
        else:
            finished = True
            actions.append(GateAction("finish", slot.model_id))
            break  # first satisfier ends the round

    if finished:
        next_state.outcome = OUTCOME_FINISHED
        next_state.final_dataset = next_state.current_dataset()
        return next_state, actions

    survivors = [slot for slot in next_state.roster if slot.status == STATUS_FINE_TUNED]
    for slot in survivors:
        slot.status = STATUS_SELECTED
    if not survivors:
        next_state.outcome = OUTCOME_EXHAUSTED
    elif next_state.iteration + 1 >= config.max_iterations:
        next_state.outcome = OUTCOME_EXHAUSTED
    elif revision_requested and records_by_model:
        requesters = [a.model_id for a in actions if a.kind == "request-revision"]
        next_state.revision_queue = _hardest_entries(
            records_by_model, requesters, config.revision_fraction
        )
    return next_state, actions


def _hardest_entries(records_by_model, requesters, fraction: float) -> list[str]:
    worst: dict[str, float] = {}
    for model_id in requesters:
        for record in records_by_model.get(model_id, ()):
            current = worst.get(record.entry_id)
            if current is None or record.label_probability < current:
                worst[record.entry_id] = record.label_probability
    if not worst:
        return []
    count = max(1, math.ceil(len(worst) * fraction))
    ranked = sorted(worst.items(), key=lambda item: (item[1], item[0]))
    return [entry_id for entry_id, _ in ranked[:count]]


def advance_dataset_version(state: GateState, new_dataset_ref: str) -> GateState:
    """Append the next dataset version to the chain and bump the iteration."""
    if state.outcome != OUTCOME_RUNNING:
        raise GateStateError(f"gate is not running (outcome={state.outcome})")
    next_state = copy.deepcopy(state)
    next_state.iteration += 1
    next_state.dataset_chain.append(new_dataset_ref)
    next_state.revision_queue = []
    return next_state


# --- revision export / import ---------------------------------------------

def export_revision_queue(
    state: GateState,
    path: str | Path,
    entries: Sequence[DatasetEntry],
    records_by_model: Mapping[str, Sequence[PredictionRecord]] | None = None,
) -> int:
    """Write the flagged entries for human revision.

    The export is a valid entry/1 file; each line additionally carries the
    worst prediction records observed for that entry so the reviewer sees
    why it was flagged.  Returns the number of exported entries.
    """
    if not state.revision_queue:
        raise GateStateError("revision queue is empty")
    by_id = {entry.entry_id: entry for entry in entries}
    missing = [eid for eid in state.revision_queue if eid not in by_id]
    if missing:
        raise GateStateError(f"flagged entry {missing[0]!r} not in current dataset")
    lines = [json.dumps({"schema": "entry/1", "count": len(state.revision_queue)},
                        separators=(",", ":"))]
    for entry_id in state.revision_queue:
        payload = entry_to_json(by_id[entry_id])
        evidence = []
        for model_id, records in (records_by_model or {}).items():
            for record in records:
                if record.entry_id == entry_id:
                    evidence.append({
                        "model_id": model_id,
                        "label_probability": record.label_probability,
                        "rationale_correct": record.rationale_correct,
                    })
        evidence.sort(key=lambda item: (item["label_probability"], item["model_id"]))
        if evidence:
            payload[REVISION_EVIDENCE_KEY] = evidence
        lines.append(json.dumps(payload, ensure_ascii=False, separators=(",", ":")))
    atomic_write_text(path, "\n".join(lines) + "\n")
    return len(state.revision_queue)


@dataclass
class ImportDiff:
    changed: list[str]
    added: list[str]
    unchanged: list[str]


def import_revised_dataset(
    state: GateState,
    revised_path: str | Path,
    dataset_out_path: str | Path,
) -> tuple[GateState, ImportDiff]:
    """Fold human-revised entries back in and advance the dataset version.

    The revised file must be entry/1-valid; its entries replace same-id
    entries of the current dataset, ids outside the flagged set are accepted
    as additions with a warning.  The new version is written to
    *dataset_out_path* with dataset_version bumped to k+1.
    """
    if state.outcome != OUTCOME_RUNNING:
        raise GateStateError(f"gate is not running (outcome={state.outcome})")
    current = read_entries(state.current_dataset())
    revised = read_entries(revised_path)
    flagged = set(state.revision_queue)
    current_by_id = {entry.entry_id: entry for entry in current}

    diff = ImportDiff(changed=[], added=[], unchanged=[])
    revised_by_id = {}
    for entry in revised:
        revised_by_id[entry.entry_id] = entry
        if entry.entry_id not in current_by_id:
            diff.added.append(entry.entry_id)
        elif entry_to_json(entry) != entry_to_json(current_by_id[entry.entry_id]):
            diff.changed.append(entry.entry_id)
        else:
            diff.unchanged.append(entry.entry_id)
    strays = [eid for eid in revised_by_id if eid not in flagged]
    if strays:
        logging.getLogger(__name__).warning(
            "imported entries not in the flagged set (accepted as additions/edits): %s",
            sorted(strays),
        )

    next_version = state.iteration + 1
    merged = [revised_by_id.get(entry.entry_id, entry) for entry in current]
    merged.extend(entry for eid, entry in revised_by_id.items()
                  if eid not in current_by_id)
    merged = [replace(entry, dataset_version=next_version) for entry in merged]
    write_entries(merged, dataset_out_path)
    return advance_dataset_version(state, str(dataset_out_path)), diff


# --- persistence -----------------------------------------------------------

def _report_to_json(report: LossReport) -> dict:
    return {
        "model_id": report.model_id,
        "dataset_version": report.dataset_version,
        "total": report.total,
        "correct_count": report.correct_count,
        "incorrect_count": report.incorrect_count,
        "label_loss": report.label_loss,
        "rationale_loss": report.rationale_loss,
        "rationale_weight": report.rationale_weight,
        "combined": report.combined,
        "weighting": report.weighting,
    }


def _report_from_json(payload: dict) -> LossReport:
    return LossReport(**payload)


def _config_to_json(config: GateConfig) -> dict:
    return {
        "baseline_label_loss": config.baseline_label_loss,
        "finish_threshold": config.finish_threshold,
        "removal_threshold": config.removal_threshold,
        "rationale_weight": config.rationale_weight,
        "assumed_correct_probability": config.assumed_correct_probability,
        "assumed_rationale_confidence": config.assumed_rationale_confidence,
        "max_iterations": config.max_iterations,
        "revision_fraction": config.revision_fraction,
    }


def save_gate_state(state: GateState, path: str | Path) -> None:
    payload = {
        "schema": GATE_STATE_SCHEMA,
        "k": state.iteration,
        "roster": [
            {
                "model_id": slot.model_id,
                "status": slot.status,
                **({"last_report": _report_to_json(slot.last_report)}
                   if slot.last_report else {}),
            }
            for slot in state.roster
        ],
        "dataset_chain": list(state.dataset_chain),
        "revision_queue": list(state.revision_queue),
        "outcome": state.outcome,
        "config": _config_to_json(state.config),
    }
    if state.final_dataset is not None:
        payload["final_dataset"] = state.final_dataset
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=False) + "\n")


def load_gate_state(path: str | Path) -> GateState:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("schema") != GATE_STATE_SCHEMA:
        raise GateStateError(
            f"state schema mismatch: expected {GATE_STATE_SCHEMA!r}, "
            f"got {payload.get('schema')!r}"
        )
    return GateState(
        iteration=payload["k"],
        roster=[
            ModelSlot(
                model_id=slot["model_id"],
                status=slot["status"],
                last_report=_report_from_json(slot["last_report"])
                if "last_report" in slot else None,
            )
            for slot in payload["roster"]
        ],
        dataset_chain=list(payload["dataset_chain"]),
        revision_queue=list(payload.get("revision_queue", [])),
        outcome=payload.get("outcome", OUTCOME_RUNNING),
        final_dataset=payload.get("final_dataset"),
        config=GateConfig(**payload["config"]),
    )


# --- prediction log I/O -----------------------------------------------------

def read_prediction_log(path: str | Path) -> list[PredictionRecord]:
    """Read a pred/1 JSONL prediction log."""
    path = Path(path)
    records = []
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").split("\n"), 1):
        if not raw.strip():
            continue
        try:
            payload = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise PredictionLogError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
        if payload.get("schema") != PREDICTION_SCHEMA:
            raise PredictionLogError(
                f"{path}:{line_no}: schema mismatch, expected {PREDICTION_SCHEMA!r}"
            )
        try:
            records.append(PredictionRecord(
                model_id=payload["model_id"],
                entry_id=payload["entry_id"],
                label_probability=float(payload["label_probability"]),
                predicted_labels=tuple(
                    PredictedLabel(item["label_id"], float(item["probability"]))
                    for item in payload.get("predicted_labels", [])
                ),
                rationale_presence=float(payload.get("rationale_presence", 0.0)),
                rationale_correct=bool(payload.get("rationale_correct", False)),
                raw_report=payload.get("raw_report", ""),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise PredictionLogError(f"{path}:{line_no}: {exc}") from exc
    return records


def group_records_by_model(records: Iterable[PredictionRecord]) -> dict[str, list[PredictionRecord]]:
    grouped: dict[str, list[PredictionRecord]] = {}
    for record in records:
        grouped.setdefault(record.model_id, []).append(record)
    return grouped
