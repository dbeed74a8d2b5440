"""Synthetic dataset distillation.

Each seed contract flows through three prompted agents: the Distillation
agent labels the seed's weakness with a rationale, a scenario is picked
from a catalog, the Developer agent writes a fresh vulnerable contract for
that (label, rationale, scenario) triplet, and the Security agent produces
a patched variant.  Every successful seed yields exactly one vulnerable
and one secure entry; per-seed failures are recorded and never abort the
run.
"""

from __future__ import annotations

import json
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import (
    ContractDocument,
    DatasetEntry,
    VulnerabilityAnnotation,
    merge_datasets,
    normalize_label_id,
    normalize_source_text,
)
from .gateway import Agent, DEFAULT_ROLE_SAMPLING, PromptTemplate, default_templates
from .lenient_json import extract_first_json_object

STAGE_DISTILLATION = "distillation"
STAGE_DEVELOPER = "developer"
STAGE_SECURITY = "security"


class ReportParseError(ValueError):
    """An agent response could not be parsed into a report."""

    def __init__(self, message: str, raw: str = ""):
        self.raw = raw
        super().__init__(message)


class DistillationStageError(RuntimeError):
    """A single stage of the per-seed pipeline failed."""


@dataclass(frozen=True)
class ScenarioDescriptor:
    scenario_id: str
    title: str
    description: str

    def __post_init__(self) -> None:
        if not self.scenario_id:
            raise ValueError("scenario_id must be non-empty")
        if not self.description:
            raise ValueError(f"scenario {self.scenario_id}: description must be non-empty")


@dataclass(frozen=True)
class AgentLabel:
    label_id: str
    label_name: str
    rationale: str = ""
    span: tuple[int, int] | None = None


@dataclass(frozen=True)
class AgentReport:
    """Parsed agent output: labels, optional generated code, optional notes."""

    labels: tuple[AgentLabel, ...]
    code: str | None = None
    notes: str | None = None


@dataclass(frozen=True)
class DistillationTriplet:
    label: AgentLabel
    rationale: str
    scenario: ScenarioDescriptor

    def __post_init__(self) -> None:
        if not self.rationale:
            raise ValueError("triplet rationale must be non-empty")


@dataclass(frozen=True)
class DistillFailure:
    seed_id: str
    stage: str
    error: str


@dataclass
class DistillAgents:
    distillation: Agent
    developer: Agent
    security: Agent


# Shipped catalog of application scenarios; any JSONL catalog can replace it.
DEFAULT_SCENARIOS = (
    ScenarioDescriptor("defi-lending", "DeFi lending pool",
                       "A pooled lending protocol where users deposit collateral, "
                       "borrow against it, and accrue interest per block."),
    ScenarioDescriptor("amm-dex", "Automated market maker",
                       "A constant-product token exchange holding paired reserves "
                       "and charging a swap fee to liquidity providers."),
    ScenarioDescriptor("nft-marketplace", "NFT marketplace",
                       "A marketplace escrowing NFTs for fixed-price sales and "
                       "timed auctions with royalty payouts."),
    ScenarioDescriptor("dao-governance", "DAO governance",
                       "A token-weighted governance module where proposals queue "
                       "timelocked treasury actions."),
    ScenarioDescriptor("staking", "Staking rewards",
                       "A staking vault distributing reward tokens proportionally "
                       "to staked balances over time."),
    ScenarioDescriptor("auction", "Sealed-bid auction",
                       "An auction contract collecting bids in ether and refunding "
                       "losing bidders after settlement."),
    ScenarioDescriptor("token-vesting", "Token vesting",
                       "A vesting schedule releasing ERC-20 grants to team wallets "
                       "with a cliff and linear unlock."),
    ScenarioDescriptor("cross-chain-bridge", "Cross-chain bridge",
                       "A lock-and-mint bridge holding deposits on one chain and "
                       "releasing wrapped tokens on another."),
    ScenarioDescriptor("lottery", "On-chain lottery",
                       "A ticket-based lottery paying the pot to a winner selected "
                       "once enough tickets are sold."),
    ScenarioDescriptor("multisig-wallet", "Multisig wallet",
                       "A shared wallet executing transactions once a threshold of "
                       "owner confirmations is reached."),
)


def load_scenario_catalog(path: str | Path) -> list[ScenarioDescriptor]:
    """Load a scenario catalog: JSONL of {scenario_id, title, description}."""
    catalog = []
    seen: set[str] = set()
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), 1):
        if not raw.strip():
            continue
        payload = json.loads(raw)
        descriptor = ScenarioDescriptor(
            scenario_id=payload["scenario_id"],
            title=payload.get("title", payload["scenario_id"]),
            description=payload["description"],
        )
        if descriptor.scenario_id in seen:
            raise ValueError(f"catalog line {line_no}: duplicate scenario_id "
                             f"{descriptor.scenario_id!r}")
        seen.add(descriptor.scenario_id)
        catalog.append(descriptor)
    return catalog


class RoundRobinPolicy:
    """Cycle through the catalog deterministically."""

    def __init__(self) -> None:
        self._next = 0

    def select(self, catalog: list[ScenarioDescriptor]) -> ScenarioDescriptor:
        choice = catalog[self._next % len(catalog)]
        self._next += 1
        return choice


class SeededRandomPolicy:
    """Reproducible random selection for a given seed."""

    def __init__(self, seed: int) -> None:
        self._rng = random.Random(seed)

    def select(self, catalog: list[ScenarioDescriptor]) -> ScenarioDescriptor:
        return catalog[self._rng.randrange(len(catalog))]


def make_policy(name: str, seed: int = 0):
    if name == "round-robin":
        return RoundRobinPolicy()
    if name == "seeded-random":
        return SeededRandomPolicy(seed)
    raise ValueError(f"unknown scenario policy {name!r}")


def select_scenario(catalog: list[ScenarioDescriptor], policy) -> ScenarioDescriptor:
    """Pick the next scenario from the catalog under the given policy."""
    if not catalog:
        raise ValueError("scenario catalog is empty")
    return policy.select(catalog)


def parse_agent_report(raw: str) -> AgentReport:
    """Parse an agent response into a report.

    Tries the whole text as JSON first, then falls back to the first
    balanced ``{...}`` block embedded in prose.
    """
    payload = extract_first_json_object(raw)
    if payload is None:
        raise ReportParseError("no JSON object found in agent response", raw=raw)
    labels_raw = payload.get("labels", [])
    if not isinstance(labels_raw, list):
        raise ReportParseError("report field 'labels' must be a list", raw=raw)
    labels = []
    for item in labels_raw:
        if not isinstance(item, dict):
            raise ReportParseError("report field 'labels' must contain objects", raw=raw)
        name = item.get("label_name") or item.get("label") or item.get("label_id")
        if not name:
            raise ReportParseError(
                "report label is missing field 'label_id'", raw=raw
            )
        span = None
        raw_span = item.get("span")
        if (isinstance(raw_span, list) and len(raw_span) == 2
                and all(isinstance(v, int) for v in raw_span)):
            span = (raw_span[0], raw_span[1])
        labels.append(AgentLabel(
            label_id=normalize_label_id(str(item.get("label_id") or name)),
            label_name=str(name),
            rationale=str(item.get("rationale", "")),
            span=span,
        ))
    code = payload.get("code")
    if code is not None and not isinstance(code, str):
        raise ReportParseError("report field 'code' must be a string", raw=raw)
    notes = payload.get("notes")
    if notes is not None and not isinstance(notes, str):
        raise ReportParseError("report field 'notes' must be a string", raw=raw)
    return AgentReport(labels=tuple(labels), code=code, notes=notes)


def analyze_seed_report(distillation_agent: Agent, seed: ContractDocument) -> AgentReport:
    """Run the Distillation agent on a seed and return its full parsed report."""
    if not seed.source_text:
        raise ValueError(f"seed {seed.id}: contract text is empty")
    raw = distillation_agent.run({"seed_code": seed.source_text})
    report = parse_agent_report(raw)
    if not report.labels:
        raise ReportParseError(
            f"seed {seed.id}: distillation report has zero labels", raw=raw
        )
    return report


def analyze_seed(distillation_agent: Agent, seed: ContractDocument) -> tuple[AgentLabel, str]:
    """Label a seed contract: returns (first label, its rationale)."""
    report = analyze_seed_report(distillation_agent, seed)
    first = report.labels[0]
    return first, first.rationale


def format_label_binding(label: AgentLabel) -> str:
    if label.label_name and normalize_label_id(label.label_name) != label.label_id:
        return f"{label.label_id} ({label.label_name})"
    return label.label_id


def format_scenario_binding(scenario: ScenarioDescriptor) -> str:
    return f"{scenario.title}. {scenario.description}"


_PRAGMA_RE = re.compile(r"^\s*pragma\s", re.MULTILINE)


def check_code_sanity(code: str) -> None:
    """Cheap syntactic sanity check: non-empty, balanced braces, pragma line.

    Not a compile check; it only rejects obviously truncated or garbled
    generations.
    """
    if not code.strip():
        raise DistillationStageError("generated code is empty")
    depth = 0
    for char in code:
        if char == "{":
            depth += 1
        elif char == "}":
            depth -= 1
            if depth < 0:
                raise DistillationStageError("generated code has unbalanced braces")
    if depth != 0:
        raise DistillationStageError("generated code has unbalanced braces")
    if not _PRAGMA_RE.search(code):
        raise DistillationStageError("generated code has no pragma line")


def _span_within(span: tuple[int, int] | None, document: ContractDocument):
    if span is not None and 1 <= span[0] <= span[1] <= document.line_count:
        return span
    return None


def generate_vulnerable(
    developer_agent: Agent,
    triplet: DistillationTriplet,
    entry_id: str,
    extra_labels: tuple[AgentLabel, ...] = (),
) -> DatasetEntry:
    """Ask the Developer agent for a vulnerable contract realizing the triplet.

    The agent sees only (label, rationale, scenario), never the seed code.
    Auxiliary labels from the distillation report are kept as additional
    annotations rather than discarded.
    """
    raw = developer_agent.run({
        "label": format_label_binding(triplet.label),
        "rationale": triplet.rationale,
        "scenario": format_scenario_binding(triplet.scenario),
    })
    report = parse_agent_report(raw)
    if report.code is None:
        raise DistillationStageError("developer report has no 'code' field")
    check_code_sanity(report.code)
    if not report.labels:
        raise DistillationStageError("developer report has zero labels")
    document = ContractDocument(
        id=entry_id,
        source_text=normalize_source_text(report.code),
        origin="synthetic",
    )
    reported = report.labels[0]
    annotations = [VulnerabilityAnnotation(
        label_id=triplet.label.label_id,
        label_name=triplet.label.label_name,
        span=_span_within(reported.span, document),
        rationale=reported.rationale or triplet.rationale,
    )]
    for label in extra_labels:
        annotations.append(VulnerabilityAnnotation(
            label_id=label.label_id,
            label_name=label.label_name,
            span=_span_within(label.span, document),
            rationale=label.rationale,
        ))
    return DatasetEntry(
        entry_id=entry_id,
        contract=document,
        annotations=annotations,
        polarity="vulnerable",
        provenance="distilled-vulnerable",
        dataset_version=0,
    )


def secure_variant(security_agent: Agent, vulnerable: DatasetEntry,
                   entry_id: str) -> DatasetEntry:
    """Ask the Security agent for a patched variant of a vulnerable entry."""
    if vulnerable.polarity != "vulnerable":
        raise ValueError(
            f"entry {vulnerable.entry_id}: secure_variant needs a vulnerable entry"
        )
    raw = security_agent.run({"vulnerable_code": vulnerable.contract.source_text})
    report = parse_agent_report(raw)
    if report.code is None:
        raise DistillationStageError("security report has no 'code' field")
    code = normalize_source_text(report.code)
    if code == vulnerable.contract.source_text:
        raise DistillationStageError(
            "secure code is byte-identical to the vulnerable code"
        )
    check_code_sanity(code)
    explanation = report.notes or (report.labels[0].rationale if report.labels else "")
    if not explanation:
        raise DistillationStageError("security report has no 'notes' explanation")
    return DatasetEntry(
        entry_id=entry_id,
        contract=ContractDocument(id=entry_id, source_text=code, origin="synthetic"),
        annotations=[],
        polarity="secure",
        provenance="distilled-secure",
        dataset_version=0,
        secure_rationale=explanation,
        source_entry_id=vulnerable.entry_id,
    )


@dataclass
class DistillResult:
    combined: list[DatasetEntry]
    failures: list[DistillFailure] = field(default_factory=list)


def distill(
    seeds: list[DatasetEntry],
    agents: DistillAgents,
    catalog: list[ScenarioDescriptor] | None = None,
    policy=None,
    parallelism: int | None = None,
) -> DistillResult:
    """Run the full per-seed pipeline over all seeds.

    Every successful seed contributes exactly two entries (one vulnerable,
    one secure) to the combined dataset; a failure at any stage skips that
    seed and records (seed_id, stage, error).  Scenario selection happens in
    seed order before any agent call, so runs are reproducible regardless of
    per-seed parallelism.
    """
    if not seeds:
        raise ValueError("distill needs at least one seed")
    seed_ids = [seed.entry_id for seed in seeds]
    if len(set(seed_ids)) != len(seed_ids):
        raise ValueError("seed entry_ids must be unique")
    catalog = list(catalog) if catalog is not None else list(DEFAULT_SCENARIOS)
    if policy is None:
        policy = RoundRobinPolicy()
    scenarios = [select_scenario(catalog, policy) for _ in seeds]

    def run_seed(seed: DatasetEntry, scenario: ScenarioDescriptor):
        stage = STAGE_DISTILLATION
        try:
            report = analyze_seed_report(agents.distillation, seed.contract)
            label = report.labels[0]
            triplet = DistillationTriplet(
                label=label,
                rationale=label.rationale or "unspecified weakness rationale",
                scenario=scenario,
            )
            stage = STAGE_DEVELOPER
            vulnerable = generate_vulnerable(
                agents.developer, triplet, entry_id=f"{seed.entry_id}-dv",
                extra_labels=report.labels[1:],
            )
            stage = STAGE_SECURITY
            secure = secure_variant(
                agents.security, vulnerable, entry_id=f"{seed.entry_id}-ds"
            )
            return (vulnerable, secure)
        except Exception as exc:
            return DistillFailure(seed_id=seed.entry_id, stage=stage, error=str(exc))

    workers = parallelism or getattr(agents.distillation.backend, "parallelism", 4)
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_seed, seeds, scenarios))
    else:
        outcomes = [run_seed(seed, scen) for seed, scen in zip(seeds, scenarios)]

    vulnerable_entries, secure_entries, failures = [], [], []
    for outcome in outcomes:
        if isinstance(outcome, DistillFailure):
            failures.append(outcome)
        else:
            vulnerable, secure = outcome
            vulnerable_entries.append(vulnerable)
            secure_entries.append(secure)
    combined = merge_datasets(vulnerable_entries, secure_entries)
    return DistillResult(combined=combined, failures=failures)


def build_agents(backend, templates: dict[str, PromptTemplate] | None = None,
                 model_name: str = "default") -> DistillAgents:
    """Wire the three roles to one backend with their default sampling."""
    templates = templates or default_templates()
    return DistillAgents(
        distillation=Agent("Distillation", templates["Distillation"], backend,
                           model_name=model_name,
                           sampling=DEFAULT_ROLE_SAMPLING["Distillation"]),
        developer=Agent("Developer", templates["Developer"], backend,
                        model_name=model_name,
                        sampling=DEFAULT_ROLE_SAMPLING["Developer"]),
        security=Agent("Security", templates["Security"], backend,
                       model_name=model_name,
                       sampling=DEFAULT_ROLE_SAMPLING["Security"]),
    )
