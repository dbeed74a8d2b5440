"""Inference over an evaluation set, emitting pred/1 prediction logs.

The mock assigns configurable fixed probabilities: the first
``correct_count`` entries (file order) are scored as correct with the
correct-class probability p, the rest as incorrect with 1 - p (clamped
away from zero so downstream loss computation stays finite); every record
carries the fixed rationale-presence confidence g.  This makes the exact
loss over a mock log match the closed-form assumed losses, which is the
cross-check contract with the gate.

Real inference derives the label probability from normalized first-token
scores over the label vocabulary; rationale correctness is left for the
evaluation side to judge, so the field is emitted as false.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .schemas import EvalEntry, prediction_line, read_eval_entries
from .training import MODEL_REF_SCHEMA, TrainingEnvironmentError

logger = logging.getLogger(__name__)

_PROBABILITY_FLOOR = 1e-9


@dataclass(frozen=True)
class MockAssumptions:
    correct_probability: float = 0.7
    rationale_confidence: float = 0.8
    correct_count: int | None = None  # None: every entry is scored correct

    def __post_init__(self) -> None:
        if not 0.0 < self.correct_probability <= 1.0:
            raise ValueError("correct_probability must be in (0, 1]")
        if not 0.0 < self.rationale_confidence < 1.0:
            raise ValueError("rationale_confidence must be in (0, 1)")


def resolve_model_id(model_ref: str) -> str:
    """A model ref is either a model.json path or a bare model id."""
    path = Path(model_ref)
    if path.is_file():
        payload = json.loads(path.read_text(encoding="utf-8"))
        if payload.get("schema") != MODEL_REF_SCHEMA:
            raise ValueError(f"{model_ref}: not a model reference file")
        return payload["model_id"]
    return model_ref


def predict(model_ref: str, eval_path: str | Path, out_path: str | Path,
            mock: bool = True,
            assumptions: MockAssumptions = MockAssumptions()) -> int:
    """Write one pred/1 record per evaluation entry; returns the count."""
    entries = read_eval_entries(eval_path)
    model_id = resolve_model_id(model_ref)
    if mock:
        lines = _mock_predictions(model_id, entries, assumptions)
    else:
        lines = _real_predictions(model_ref, model_id, entries)
    Path(out_path).write_text("\n".join(lines) + ("\n" if lines else ""),
                              encoding="utf-8")
    return len(lines)


def _mock_predictions(model_id: str, entries: list[EvalEntry],
                      assumptions: MockAssumptions) -> list[str]:
    correct_count = (len(entries) if assumptions.correct_count is None
                     else assumptions.correct_count)
    if correct_count > len(entries):
        raise ValueError(
            f"correct_count {correct_count} exceeds entry count {len(entries)}")
    probability = assumptions.correct_probability
    wrong_probability = max(1.0 - probability, _PROBABILITY_FLOOR)
    lines = []
    for index, entry in enumerate(entries):
        correct = index < correct_count
        lines.append(prediction_line(
            model_id=model_id,
            entry_id=entry.entry_id,
            label_probability=probability if correct else wrong_probability,
            predicted_label=entry.label_id if correct else "misidentified",
            rationale_presence=assumptions.rationale_confidence,
            rationale_correct=correct,
        ))
    return lines


def _real_predictions(model_ref: str, model_id: str,
                      entries: list[EvalEntry]) -> list[str]:
    try:
        import torch
        from transformers import AutoModelForCausalLM, AutoTokenizer
    except ImportError as exc:
        raise TrainingEnvironmentError(
            f"non-mock inference needs torch/transformers installed: {exc}"
        ) from exc
    adapter_dir = Path(model_ref).parent / "adapter"
    tokenizer = AutoTokenizer.from_pretrained(str(adapter_dir))
    model = AutoModelForCausalLM.from_pretrained(str(adapter_dir),
                                                 device_map="auto")
    model.eval()
    labels = sorted({entry.label_id for entry in entries})
    label_first_tokens = {
        label: tokenizer(label, add_special_tokens=False)["input_ids"][0]
        for label in labels
    }
    lines = []
    for entry in entries:
        try:
            prompt = (f"Audit the following contract and name the weakness "
                      f"label:\n{entry.source_text}\nLabel:")
            inputs = tokenizer(prompt, return_tensors="pt",
                               truncation=True, max_length=4096)
            with torch.no_grad():
                logits = model(**inputs.to(model.device)).logits[0, -1]
            scores = torch.tensor([logits[token] for token
                                   in label_first_tokens.values()])
            probabilities = torch.softmax(scores, dim=0)
            by_label = dict(zip(label_first_tokens, probabilities.tolist()))
            true_probability = max(by_label.get(entry.label_id, _PROBABILITY_FLOOR),
                                   _PROBABILITY_FLOOR)
            predicted = max(by_label, key=by_label.get)
            lines.append(prediction_line(
                model_id=model_id,
                entry_id=entry.entry_id,
                label_probability=true_probability,
                predicted_label=predicted,
                rationale_presence=by_label[predicted],
                rationale_correct=False,  # judged downstream by the evaluator
            ))
        except Exception as exc:  # per-entry failures never abort the run
            logger.warning("inference failed for %s: %s", entry.entry_id, exc)
    return lines
