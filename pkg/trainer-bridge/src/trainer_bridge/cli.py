"""trainer-bridge command line: train on instr/1 data, predict to pred/1."""

from __future__ import annotations

import click

from .inference import MockAssumptions, predict
from .schemas import SchemaValidationError
from .training import TrainingEnvironmentError, TrainJob, train


@click.group()
def main():
    """Training-backend adapter (instr/1 in, pred/1 out)."""


@main.command("train")
@click.option("--base", "base_model", required=True, help="Base model name.")
@click.option("--data", "dataset_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "output_dir", required=True, type=click.Path())
@click.option("--steps", default=1000, type=int)
@click.option("--lr", "learning_rate", default=5e-4, type=float)
@click.option("--adapter", default="qlora", type=click.Choice(["qlora", "none"]))
@click.option("--mock", is_flag=True, default=False)
@click.option("--seed", default=0, type=int)
def train_cmd(base_model, dataset_path, output_dir, steps, learning_rate,
              adapter, mock, seed):
    """Fine-tune (or mock-train) a model on an instruction dataset."""
    job = TrainJob(base_model_name=base_model, dataset_path=dataset_path,
                   output_dir=output_dir, steps=steps,
                   learning_rate=learning_rate, adapter=adapter,
                   mock=mock, seed=seed)
    try:
        outcome = train(job)
    except (SchemaValidationError, TrainingEnvironmentError) as exc:
        raise click.ClickException(str(exc))
    click.echo(f"model ref: {outcome.model_ref_path}")
    click.echo(f"metrics: {outcome.metrics_path}")
    click.echo(f"final training loss: {outcome.final_loss}")


@main.command("predict")
@click.option("--model", "model_ref", required=True,
              help="model.json path, or a bare model id in mock mode.")
@click.option("--eval", "eval_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--mock", is_flag=True, default=False)
@click.option("--p", "correct_probability", default=0.7, type=float,
              help="Mock probability assigned to the true label when correct.")
@click.option("--g", "rationale_confidence", default=0.8, type=float,
              help="Mock rationale-presence confidence.")
@click.option("--correct-count", default=None, type=int,
              help="Mock: score the first N entries as correct (default all).")
def predict_cmd(model_ref, eval_path, out_path, mock, correct_probability,
                rationale_confidence, correct_count):
    """Run inference over an evaluation set and emit a pred/1 log."""
    try:
        count = predict(
            model_ref, eval_path, out_path, mock=mock,
            assumptions=MockAssumptions(
                correct_probability=correct_probability,
                rationale_confidence=rationale_confidence,
                correct_count=correct_count,
            ),
        )
    except (SchemaValidationError, TrainingEnvironmentError, ValueError) as exc:
        raise click.ClickException(str(exc))
    click.echo(f"wrote {count} prediction records -> {out_path}")


if __name__ == "__main__":
    main()
