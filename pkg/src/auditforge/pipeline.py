"""Stage orchestration with a run manifest.

Stages execute in a fixed order; each stage writes its artifacts before
the next starts, and a manifest records input/output hashes per stage so
re-running a completed stage with unchanged inputs is a no-op.  Any stage
error halts the run with the stage name and cause; completed artifacts are
kept, which makes interrupted runs resumable.
"""

from __future__ import annotations

import glob as globmod
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import distiller, evaluator, gate, preprocess
from .config import ConfigError, ProjectConfig, validate_stage_inputs
from .corpus import load_annotated_corpus, write_entries, write_instruction_records
from .gateway import HttpChatBackend, StubBackend, load_templates
from .ioutil import atomic_write_text, file_sha256

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "manifest/1"
STAGE_ORDER = ("distill", "preprocess", "gate-step", "evaluate")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


@dataclass
class StageRun:
    stage: str
    inputs: dict[str, str]
    outputs: dict[str, str]
    skipped: bool = False


@dataclass
class PipelineResult:
    exit_status: int
    runs: list[StageRun] = field(default_factory=list)


def _load_manifest(path: Path) -> dict:
    if path.exists():
        payload = json.loads(path.read_text(encoding="utf-8"))
        if payload.get("schema") == MANIFEST_SCHEMA:
            return payload
    return {"schema": MANIFEST_SCHEMA, "stages": {}}


def _save_manifest(path: Path, manifest: dict) -> None:
    atomic_write_text(path, json.dumps(manifest, indent=2) + "\n")


def _hash_paths(paths: list[Path]) -> dict[str, str]:
    return {str(path): file_sha256(path) for path in paths}


def _make_backend(config: ProjectConfig):
    settings = config.gateway
    if settings.backend == "stub":
        if not settings.fixtures:
            raise ConfigError("gateway.fixtures is required for the stub backend")
        return StubBackend.from_jsonl(config.resolve(settings.fixtures),
                                      parallelism=settings.parallelism)
    if settings.backend == "http":
        return HttpChatBackend(
            endpoint_url=settings.endpoint_url,
            model_name=settings.model_name,
            max_retries=settings.max_retries,
            parallelism=settings.parallelism,
        )
    raise ConfigError(f"unknown gateway backend {settings.backend!r}")


def _stage_distill(config: ProjectConfig, out_dir: Path) -> tuple[list[Path], list[Path]]:
    seeds_path = config.resolve(config.paths.seeds)
    inputs = [seeds_path]
    if config.gateway.backend == "stub" and config.gateway.fixtures:
        inputs.append(config.resolve(config.gateway.fixtures))
    if config.distill.catalog:
        inputs.append(config.resolve(config.distill.catalog))
    if config.distill.templates:
        inputs.append(config.resolve(config.distill.templates))
    seeds = load_annotated_corpus(seeds_path, "entries-jsonl")
    catalog = (distiller.load_scenario_catalog(config.resolve(config.distill.catalog))
               if config.distill.catalog else list(distiller.DEFAULT_SCENARIOS))
    templates = (load_templates(config.resolve(config.distill.templates))
                 if config.distill.templates else None)
    policy = distiller.make_policy(config.distill.policy, config.distill.seed)
    agents = distiller.build_agents(_make_backend(config), templates=templates,
                                    model_name=config.gateway.model_name)
    result = distiller.distill(seeds, agents, catalog, policy)
    combined_path = out_dir / "distilled.jsonl"
    failures_path = out_dir / "distill-failures.jsonl"
    write_entries(result.combined, combined_path)
    failure_lines = [
        json.dumps({"schema": "failure/1", "seed_id": f.seed_id,
                    "stage": f.stage, "error": f.error},
                   ensure_ascii=False, separators=(",", ":"))
        for f in sorted(result.failures, key=lambda f: f.seed_id)
    ]
    atomic_write_text(failures_path, "\n".join(failure_lines) + ("\n" if failure_lines else ""))
    return inputs, [combined_path, failures_path]


def _stage_preprocess(config: ProjectConfig, out_dir: Path) -> tuple[list[Path], list[Path]]:
    source = out_dir / "distilled.jsonl"
    if not source.exists():
        raise FileNotFoundError(f"preprocess input missing: {source}")
    entries = load_annotated_corpus(source, "entries-jsonl")
    settings = config.preprocess
    result = preprocess.preprocess_entries(
        entries,
        instruction_text=settings.instruction or preprocess.DEFAULT_INSTRUCTION,
        max_tokens=settings.max_tokens,
        dedup_threshold=settings.dedup_threshold,
        cleaning=preprocess.CleaningConfig(strip_comments=settings.strip_comments),
    )
    instructions_path = out_dir / "instructions.jsonl"
    kept_path = out_dir / "curated.jsonl"
    removals_path = out_dir / "removals.jsonl"
    write_instruction_records(result.instructions, instructions_path)
    write_entries(result.kept_entries, kept_path)
    removal_lines = [
        json.dumps({"schema": "removal/1", "entry_id": r.entry_id,
                    "reason": r.reason, "detail": r.detail},
                   ensure_ascii=False, separators=(",", ":"))
        for r in result.removals
    ]
    atomic_write_text(removals_path, "\n".join(removal_lines) + ("\n" if removal_lines else ""))
    return [source], [instructions_path, kept_path, removals_path]


def _stage_gate_step(config: ProjectConfig, out_dir: Path) -> tuple[list[Path], list[Path]]:
    state_path = config.resolve(config.gate.state)
    pattern = config.gate.predictions
    if not pattern:
        raise FileNotFoundError("gate.predictions glob is not configured")
    prediction_paths = [Path(p) for p in sorted(globmod.glob(str(config.resolve(pattern))))]
    if not prediction_paths:
        raise FileNotFoundError(f"no prediction files match {pattern!r}")
    state = gate.load_gate_state(state_path)
    records = []
    for path in prediction_paths:
        records.extend(gate.read_prediction_log(path))
    grouped = gate.group_records_by_model(records)
    reports = [
        gate.loss_report_from_records(model_id, state.iteration, model_records,
                                      state.config)
        for model_id, model_records in sorted(grouped.items())
    ]
    next_state, actions = gate.gate_step(state, reports, records_by_model=grouped)
    gate.save_gate_state(next_state, state_path)
    actions_path = out_dir / "gate-actions.json"
    atomic_write_text(actions_path, json.dumps({
        "iteration": state.iteration,
        "outcome": next_state.outcome,
        "actions": [{"kind": a.kind, "model_id": a.model_id} for a in actions],
    }, indent=2) + "\n")
    return prediction_paths, [state_path, actions_path]


def _stage_evaluate(config: ProjectConfig, out_dir: Path) -> tuple[list[Path], list[Path]]:
    corpus_path = config.resolve(config.paths.corpus)
    reports_dir = config.resolve(config.paths.reports_dir)
    entries = load_annotated_corpus(corpus_path, "entries-jsonl")
    cards = evaluator.evaluate_reports(entries, reports_dir, corpus_id=corpus_path.stem)
    scores_path = out_dir / "scores.csv"
    atomic_write_text(scores_path, evaluator.emit_comparison(cards, "csv"))
    inputs = [corpus_path] + sorted(p for p in reports_dir.iterdir() if p.is_file())
    return inputs, [scores_path]


_STAGE_IMPL = {
    "distill": _stage_distill,
    "preprocess": _stage_preprocess,
    "gate-step": _stage_gate_step,
    "evaluate": _stage_evaluate,
}


def run_pipeline(config: ProjectConfig, stages: list[str],
                 out_dir: str | Path | None = None) -> PipelineResult:
    """Run the requested stages in fixed order under the manifest."""
    unknown = [s for s in stages if s not in STAGE_ORDER]
    if unknown:
        raise ConfigError(f"unknown stage {unknown[0]!r}")
    ordered = [s for s in STAGE_ORDER if s in stages]
    validate_stage_inputs(config, ordered)
    out_path = Path(out_dir) if out_dir else config.resolve(config.paths.out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    manifest_path = out_path / "manifest.json"
    manifest = _load_manifest(manifest_path)

    result = PipelineResult(exit_status=0)
    for stage in ordered:
        impl = _STAGE_IMPL[stage]
        try:
            inputs, outputs = _run_stage(stage, impl, config, out_path, manifest)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(stage, str(exc)) from exc
        result.runs.append(StageRun(
            stage=stage,
            inputs={str(p): manifest["stages"][stage]["inputs"][str(p)] for p in inputs},
            outputs={str(p): manifest["stages"][stage]["outputs"][str(p)] for p in outputs},
            skipped=manifest["stages"][stage].get("skipped_last_run", False),
        ))
        _save_manifest(manifest_path, manifest)
    return result


def _run_stage(stage, impl, config, out_path, manifest):
    previous = manifest["stages"].get(stage)
    if previous:
        inputs_unchanged = all(
            Path(p).exists() and file_sha256(p) == digest
            for p, digest in previous["inputs"].items()
        )
        outputs_intact = all(
            Path(p).exists() and file_sha256(p) == digest
            for p, digest in previous["outputs"].items()
        )
        if inputs_unchanged and outputs_intact:
            logger.info("stage %s: inputs unchanged, skipping", stage)
            previous["skipped_last_run"] = True
            return ([Path(p) for p in previous["inputs"]],
                    [Path(p) for p in previous["outputs"]])
    logger.info("stage %s: running", stage)
    inputs, outputs = impl(config, out_path)
    output_hashes = _hash_paths(outputs)
    manifest["stages"][stage] = {
        "inputs": _hash_paths(inputs),
        "outputs": output_hashes,
        "skipped_last_run": False,
    }
    logger.info("stage %s: done; artifacts %s", stage,
                {path: digest[:12] for path, digest in output_hashes.items()})
    return inputs, outputs
