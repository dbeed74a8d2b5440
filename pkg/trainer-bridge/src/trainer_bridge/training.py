"""SFT training jobs: QLoRA fine-tuning on a GPU, or a deterministic mock.

The mock emits a synthetic but realistically shaped loss curve (exponential
decay with small seeded jitter) plus a stub model reference, byte-identical
for identical (seed, inputs).  Real training requires the optional GPU
stack; without it the job fails with a clear environment error.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

from .schemas import SchemaValidationError, validate_instruction_file

MODEL_REF_SCHEMA = "model-ref/1"


class TrainingEnvironmentError(RuntimeError):
    """The GPU training stack is not available."""


@dataclass(frozen=True)
class TrainJob:
    base_model_name: str
    dataset_path: str
    output_dir: str
    steps: int = 1000
    learning_rate: float = 5e-4
    adapter: str = "qlora"  # qlora | none
    mock: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.adapter not in ("qlora", "none"):
            raise ValueError(f"unknown adapter {self.adapter!r}")


@dataclass(frozen=True)
class TrainOutcome:
    model_ref_path: str
    metrics_path: str
    final_loss: float


def _dataset_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def train(job: TrainJob) -> TrainOutcome:
    """Run (or mock) one fine-tuning job.

    Emits ``metrics.jsonl`` with one {step, training_loss, grad_norm} row per
    step and a ``model.json`` reference for the predict command.
    """
    record_count = validate_instruction_file(job.dataset_path)
    if record_count == 0:
        raise SchemaValidationError("dataset has no records", job.dataset_path)
    output_dir = Path(job.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    if job.mock:
        final_loss = _mock_training_curve(job, output_dir)
    else:
        final_loss = _real_training_run(job, output_dir)
    ref_path = output_dir / "model.json"
    ref_path.write_text(json.dumps({
        "schema": MODEL_REF_SCHEMA,
        "model_id": f"{job.base_model_name}-ft",
        "base_model": job.base_model_name,
        "adapter": job.adapter,
        "steps": job.steps,
        "learning_rate": job.learning_rate,
        "mock": job.mock,
        "seed": job.seed,
        "dataset_sha256": _dataset_sha256(job.dataset_path),
        "final_loss": final_loss,
    }, indent=2) + "\n", encoding="utf-8")
    return TrainOutcome(model_ref_path=str(ref_path),
                        metrics_path=str(output_dir / "metrics.jsonl"),
                        final_loss=final_loss)


def _mock_training_curve(job: TrainJob, output_dir: Path) -> float:
    rng = random.Random(job.seed)
    start_loss, floor, decay = 2.8, 0.3, 5.0
    lines = []
    loss = start_loss
    for step in range(1, job.steps + 1):
        progress = step / job.steps
        base = floor + (start_loss - floor) * math.exp(-decay * progress)
        loss = base * (1.0 + rng.uniform(-0.004, 0.004))
        grad_norm = (1.0 + 2.5 * math.exp(-6.0 * progress)
                     + rng.uniform(-0.02, 0.02))
        lines.append(json.dumps({
            "step": step,
            "training_loss": round(loss, 6),
            "grad_norm": round(grad_norm, 6),
        }, separators=(",", ":")))
    (output_dir / "metrics.jsonl").write_text("\n".join(lines) + "\n",
                                              encoding="utf-8")
    return round(loss, 6)


def _real_training_run(job: TrainJob, output_dir: Path) -> float:
    """QLoRA supervised fine-tuning via the optional GPU stack."""
    try:
        import torch
        from datasets import load_dataset
        from peft import LoraConfig, get_peft_model, prepare_model_for_kbit_training
        from transformers import (
            AutoModelForCausalLM,
            AutoTokenizer,
            BitsAndBytesConfig,
            Trainer,
            TrainingArguments,
        )
    except ImportError as exc:
        raise TrainingEnvironmentError(
            "non-mock training needs torch/transformers/peft/datasets/"
            f"bitsandbytes installed: {exc}"
        ) from exc
    if not torch.cuda.is_available():
        raise TrainingEnvironmentError("non-mock training needs a CUDA GPU")

    tokenizer = AutoTokenizer.from_pretrained(job.base_model_name)
    if tokenizer.pad_token is None:
        tokenizer.pad_token = tokenizer.eos_token

    quant_config = None
    if job.adapter == "qlora":
        quant_config = BitsAndBytesConfig(
            load_in_4bit=True,
            bnb_4bit_quant_type="nf4",
            bnb_4bit_use_double_quant=True,
            bnb_4bit_compute_dtype=torch.bfloat16,
        )
    model = AutoModelForCausalLM.from_pretrained(
        job.base_model_name, quantization_config=quant_config, device_map="auto")
    if job.adapter == "qlora":
        model = prepare_model_for_kbit_training(model)
        model = get_peft_model(model, LoraConfig(
            r=16, lora_alpha=32, lora_dropout=0.05, bias="none",
            task_type="CAUSAL_LM",
        ))

    def to_text(row):
        return {"text": f"{row['instruction']}\n\n{row['input']}\n\n{row['output']}"}

    dataset = load_dataset("json", data_files=str(job.dataset_path), split="train")
    dataset = dataset.map(to_text)

    def tokenize(row):
        tokens = tokenizer(row["text"], truncation=True, max_length=4096)
        tokens["labels"] = tokens["input_ids"].copy()
        return tokens

    dataset = dataset.map(tokenize, remove_columns=dataset.column_names)
    trainer = Trainer(
        model=model,
        args=TrainingArguments(
            output_dir=str(output_dir),
            max_steps=job.steps,
            learning_rate=job.learning_rate,
            per_device_train_batch_size=1,
            gradient_accumulation_steps=4,
            logging_steps=1,
            save_strategy="no",
            report_to=[],
            seed=job.seed,
        ),
        train_dataset=dataset,
    )
    result = trainer.train()
    lines = [
        json.dumps({
            "step": entry["step"],
            "training_loss": entry.get("loss"),
            "grad_norm": entry.get("grad_norm"),
        }, separators=(",", ":"))
        for entry in trainer.state.log_history if "loss" in entry
    ]
    (output_dir / "metrics.jsonl").write_text("\n".join(lines) + "\n",
                                              encoding="utf-8")
    model.save_pretrained(str(output_dir / "adapter"))
    tokenizer.save_pretrained(str(output_dir / "adapter"))
    return float(result.training_loss)
