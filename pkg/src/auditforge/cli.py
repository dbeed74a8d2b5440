"""Command-line entry point wiring the pipeline stages together."""

from __future__ import annotations

import glob as globmod
import json
import logging
import sys
import time
from pathlib import Path

import click

from . import distiller, evaluator, gate, preprocess
from .config import ConfigError, ProjectConfig, load_project_config
from .corpus import load_annotated_corpus, write_entries, write_instruction_records
from .gateway import HttpChatBackend, StubBackend, load_templates
from .ioutil import atomic_write_text
from .pipeline import PipelineError, STAGE_ORDER, run_pipeline


class _JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": round(time.time(), 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        return json.dumps(payload, ensure_ascii=False)


def _setup_logging(log_format: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if log_format == "json":
        handler.setFormatter(_JsonLogFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)


def _load_config(ctx) -> ProjectConfig:
    path = ctx.obj.get("config")
    if not path:
        return ProjectConfig()
    try:
        return load_project_config(path)
    except ConfigError as exc:
        raise click.ClickException(str(exc))


def _make_backend(name: str, config: ProjectConfig, fixtures: str | None):
    if name == "stub":
        fixture_path = fixtures or config.gateway.fixtures
        if not fixture_path:
            raise click.ClickException("--fixtures is required for the stub backend")
        return StubBackend.from_jsonl(config.resolve(fixture_path),
                                      parallelism=config.gateway.parallelism)
    if name == "http":
        if not config.gateway.endpoint_url:
            raise click.ClickException("gateway.endpoint_url is not configured")
        return HttpChatBackend(
            endpoint_url=config.gateway.endpoint_url,
            model_name=config.gateway.model_name,
            max_retries=config.gateway.max_retries,
            parallelism=config.gateway.parallelism,
        )
    raise click.ClickException(f"unknown backend {name!r}")


@click.group()
@click.option("--config", type=click.Path(), default=None, help="Project config TOML.")
@click.option("--out-dir", type=click.Path(), default=None, help="Artifact directory.")
@click.option("--log-format", type=click.Choice(["text", "json"]), default="text")
@click.pass_context
def main(ctx, config, out_dir, log_format):
    """Dataset distillation, curation, loss gating, and audit scoring."""
    _setup_logging(log_format)
    ctx.ensure_object(dict)
    ctx.obj["config"] = config
    ctx.obj["out_dir"] = out_dir


@main.command("distill")
@click.option("--seeds", required=True, type=click.Path(exists=True))
@click.option("--backend", "backend_name", default="stub",
              type=click.Choice(["stub", "http"]))
@click.option("--fixtures", type=click.Path(exists=True), default=None,
              help="Stub fixture JSONL.")
@click.option("--catalog", type=click.Path(exists=True), default=None)
@click.option("--templates", type=click.Path(exists=True), default=None,
              help="JSON file overriding the shipped agent templates.")
@click.option("--policy", default="round-robin",
              type=click.Choice(["round-robin", "seeded-random"]))
@click.option("--seed", default=0, type=int, help="Seed for seeded-random policy.")
@click.option("--out", required=True, type=click.Path())
@click.option("--failures", type=click.Path(), default=None)
@click.pass_context
def distill_cmd(ctx, seeds, backend_name, fixtures, catalog, templates, policy,
                seed, out, failures):
    """Generate paired vulnerable/secure entries from seed contracts."""
    config = _load_config(ctx)
    seed_entries = load_annotated_corpus(seeds, "entries-jsonl")
    catalog_entries = (distiller.load_scenario_catalog(catalog)
                       if catalog else list(distiller.DEFAULT_SCENARIOS))
    template_path = templates or config.distill.templates or None
    agents = distiller.build_agents(
        _make_backend(backend_name, config, fixtures),
        templates=load_templates(template_path) if template_path else None,
        model_name=config.gateway.model_name,
    )
    result = distiller.distill(seed_entries, agents, catalog_entries,
                               distiller.make_policy(policy, seed))
    write_entries(result.combined, out)
    failure_lines = [
        json.dumps({"schema": "failure/1", "seed_id": f.seed_id,
                    "stage": f.stage, "error": f.error},
                   ensure_ascii=False, separators=(",", ":"))
        for f in sorted(result.failures, key=lambda f: f.seed_id)
    ]
    failures_path = failures or f"{out}.failures.jsonl"
    atomic_write_text(failures_path,
                      "\n".join(failure_lines) + ("\n" if failure_lines else ""))
    click.echo(f"distilled {len(result.combined)} entries "
               f"({len(result.failures)} seed failures) -> {out}")


@main.command("preprocess")
@click.option("--in", "input_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--entries-out", type=click.Path(), default=None,
              help="Where to write the curated entries (default <out>.entries.jsonl).")
@click.option("--max-tokens", default=4096, type=int)
@click.option("--dedup-threshold", default=0.9, type=float)
@click.option("--strip-comments", is_flag=True, default=False)
@click.option("--instruction", default=None, help="Override the instruction text.")
@click.option("--report", type=click.Path(), default=None)
@click.pass_context
def preprocess_cmd(ctx, input_path, out, entries_out, max_tokens, dedup_threshold,
                   strip_comments, instruction, report):
    """Curate entries into a training-ready instruction dataset."""
    entries = load_annotated_corpus(input_path, "entries-jsonl")
    result = preprocess.preprocess_entries(
        entries,
        instruction_text=instruction or preprocess.DEFAULT_INSTRUCTION,
        max_tokens=max_tokens,
        dedup_threshold=dedup_threshold,
        cleaning=preprocess.CleaningConfig(strip_comments=strip_comments),
    )
    write_instruction_records(result.instructions, out)
    write_entries(result.kept_entries, entries_out or f"{out}.entries.jsonl")
    removal_lines = [
        json.dumps({"schema": "removal/1", "entry_id": r.entry_id,
                    "reason": r.reason, "detail": r.detail},
                   ensure_ascii=False, separators=(",", ":"))
        for r in result.removals
    ]
    report_path = report or f"{out}.removals.jsonl"
    atomic_write_text(report_path,
                      "\n".join(removal_lines) + ("\n" if removal_lines else ""))
    click.echo(f"kept {len(result.instructions)} records, "
               f"removed {len(result.removals)} -> {out}")


@main.group("gate")
def gate_group():
    """Loss computation and the iterative enhancement gate."""


def _gate_config_from(config: ProjectConfig) -> gate.GateConfig:
    settings = config.gate
    return gate.GateConfig(
        baseline_label_loss=settings.baseline_label_loss,
        finish_threshold=settings.finish_threshold,
        removal_threshold=settings.removal_threshold,
        rationale_weight=settings.rationale_weight,
        assumed_correct_probability=settings.assumed_correct_probability,
        assumed_rationale_confidence=settings.assumed_rationale_confidence,
        max_iterations=settings.max_iterations,
        revision_fraction=settings.revision_fraction,
    )


def _read_prediction_glob(pattern: str) -> list[gate.PredictionRecord]:
    paths = sorted(globmod.glob(pattern))
    if not paths:
        raise click.ClickException(f"no prediction files match {pattern!r}")
    records: list[gate.PredictionRecord] = []
    for path in paths:
        records.extend(gate.read_prediction_log(path))
    return records


@gate_group.command("init")
@click.option("--state", required=True, type=click.Path())
@click.option("--models", required=True, help="Comma-separated model ids.")
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.pass_context
def gate_init_cmd(ctx, state, models, dataset):
    """Create a fresh run state for a model roster and initial dataset."""
    config = _load_config(ctx)
    model_ids = [m.strip() for m in models.split(",") if m.strip()]
    gate_state = gate.init_gate_state(model_ids, str(dataset),
                                      _gate_config_from(config))
    gate.save_gate_state(gate_state, state)
    click.echo(f"initialized gate state with {len(model_ids)} models -> {state}")


@gate_group.command("loss")
@click.option("--mode", required=True, type=click.Choice(["exact", "assumed"]))
@click.option("--predictions", default=None, help="pred/1 JSONL glob (exact mode).")
@click.option("--model-id", default=None, help="Restrict exact mode to one model.")
@click.option("--n", "total", default=None, type=int, help="Assumed mode: N.")
@click.option("--n-correct", default=None, type=int, help="Assumed mode: correct count.")
@click.option("--p", "probability", default=0.7, type=float)
@click.option("--g", "confidence", default=0.8, type=float)
@click.option("--rationale-weight", "--lambda", "weight", default=0.7, type=float)
@click.pass_context
def gate_loss_cmd(ctx, mode, predictions, model_id, total, n_correct,
                  probability, confidence, weight):
    """Print a loss report (JSON) from a prediction log or the closed forms."""
    if mode == "assumed":
        if total is None or n_correct is None:
            raise click.ClickException("assumed mode needs --n and --n-correct")
        label = gate.assumed_label_loss(total, n_correct, probability)
        rationale = gate.assumed_rationale_loss(total, n_correct, confidence)
        click.echo(json.dumps({
            "mode": "assumed",
            "total": total,
            "correct_count": n_correct,
            "label_loss": label,
            "rationale_loss": rationale,
            "rationale_weight": weight,
            "combined": gate.combined_loss(label, rationale, weight),
        }, indent=2))
        return
    if not predictions:
        raise click.ClickException("exact mode needs --predictions")
    records = _read_prediction_glob(predictions)
    grouped = gate.group_records_by_model(records)
    if model_id is not None:
        if model_id not in grouped:
            raise click.ClickException(f"no records for model {model_id!r}")
        grouped = {model_id: grouped[model_id]}
    config = gate.GateConfig(rationale_weight=weight)
    reports = [
        gate.loss_report_from_records(mid, 0, recs, config)
        for mid, recs in sorted(grouped.items())
    ]
    payload = [
        {
            "mode": "exact",
            "model_id": report.model_id,
            "total": report.total,
            "correct_count": report.correct_count,
            "incorrect_count": report.incorrect_count,
            "label_loss": report.label_loss,
            "rationale_loss": report.rationale_loss,
            "rationale_weight": report.rationale_weight,
            "combined": report.combined,
        }
        for report in reports
    ]
    click.echo(json.dumps(payload[0] if len(payload) == 1 else payload, indent=2))


@gate_group.command("step")
@click.option("--state", "state_path", required=True, type=click.Path(exists=True))
@click.option("--predictions", required=True, help="pred/1 JSONL glob.")
@click.pass_context
def gate_step_cmd(ctx, state_path, predictions):
    """Apply one loss-evaluation round and persist the updated state."""
    state = gate.load_gate_state(state_path)
    records = _read_prediction_glob(predictions)
    grouped = gate.group_records_by_model(records)
    reports = [
        gate.loss_report_from_records(mid, state.iteration, recs, state.config)
        for mid, recs in sorted(grouped.items())
    ]
    try:
        next_state, actions = gate.gate_step(state, reports, records_by_model=grouped)
    except gate.GateStateError as exc:
        raise click.ClickException(str(exc))
    gate.save_gate_state(next_state, state_path)
    for action in actions:
        click.echo(f"{action.kind}: {action.model_id}")
    click.echo(f"outcome: {next_state.outcome}")


@gate_group.command("export-revisions")
@click.option("--state", "state_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--predictions", default=None,
              help="Attach model evidence from these pred/1 files.")
@click.pass_context
def gate_export_cmd(ctx, state_path, out, predictions):
    """Write the flagged entries (with model evidence) for human revision."""
    state = gate.load_gate_state(state_path)
    entries = load_annotated_corpus(state.current_dataset(), "entries-jsonl")
    grouped = None
    if predictions:
        grouped = gate.group_records_by_model(_read_prediction_glob(predictions))
    try:
        count = gate.export_revision_queue(state, out, entries, grouped)
    except gate.GateStateError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"exported {count} flagged entries -> {out}")


@gate_group.command("import-revisions")
@click.option("--state", "state_path", required=True, type=click.Path(exists=True))
@click.option("--in", "revised_path", required=True, type=click.Path(exists=True))
@click.option("--dataset-out", type=click.Path(), default=None,
              help="Path for the new dataset version (default derived).")
@click.pass_context
def gate_import_cmd(ctx, state_path, revised_path, dataset_out):
    """Fold revised entries back in and advance the dataset version."""
    state = gate.load_gate_state(state_path)
    if dataset_out is None:
        current = Path(state.current_dataset())
        dataset_out = str(current.with_name(
            f"{current.stem.split('-v')[0]}-v{state.iteration + 1}{current.suffix}"
        ))
    try:
        next_state, diff = gate.import_revised_dataset(state, revised_path, dataset_out)
    except (gate.GateStateError, ValueError) as exc:
        raise click.ClickException(str(exc))
    gate.save_gate_state(next_state, state_path)
    click.echo(f"dataset version {next_state.iteration} -> {dataset_out}")
    click.echo(f"changed: {len(diff.changed)}, added: {len(diff.added)}, "
               f"unchanged: {len(diff.unchanged)}")


@main.command("evaluate")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--reports", "reports_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path())
@click.option("--strict-labels", is_flag=True, default=False)
@click.option("--format", "fmt", default="csv",
              type=click.Choice(["csv", "markdown-table"]))
@click.pass_context
def evaluate_cmd(ctx, corpus, reports_dir, out, strict_labels, fmt):
    """Score model audit reports against an annotated corpus."""
    entries = load_annotated_corpus(corpus, "entries-jsonl")
    cards = evaluator.evaluate_reports(entries, reports_dir,
                                       corpus_id=Path(corpus).stem,
                                       strict_labels=strict_labels)
    atomic_write_text(out, evaluator.emit_comparison(cards, fmt))
    click.echo(f"scored {len(cards)} models over {len(entries)} contracts -> {out}")


@main.command("run")
@click.option("--stages", default=",".join(STAGE_ORDER),
              help="Comma-separated subset of: " + ", ".join(STAGE_ORDER))
@click.pass_context
def run_cmd(ctx, stages):
    """Run pipeline stages in fixed order under the manifest."""
    if not ctx.obj.get("config"):
        raise click.ClickException("run requires --config")
    config = _load_config(ctx)
    stage_list = [s.strip() for s in stages.split(",") if s.strip()]
    try:
        result = run_pipeline(config, stage_list, out_dir=ctx.obj.get("out_dir"))
    except (ConfigError, PipelineError) as exc:
        raise click.ClickException(str(exc))
    for run in result.runs:
        status = "skipped (inputs unchanged)" if run.skipped else "ok"
        click.echo(f"{run.stage}: {status}")
    ctx.exit(result.exit_status)


if __name__ == "__main__":
    main()
