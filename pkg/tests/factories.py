"""Shared builders for dataset entries and scripted agent fixtures."""

from __future__ import annotations

import json

from auditforge.corpus import (
    ContractDocument,
    DatasetEntry,
    VulnerabilityAnnotation,
)
from auditforge.distiller import (
    AgentLabel,
    ScenarioDescriptor,
    format_label_binding,
    format_scenario_binding,
)
from auditforge.gateway import default_templates, render_prompt, stub_key

SOLIDITY_SNIPPET = (
    "pragma solidity ^0.8.0;\n"
    "contract Wallet {\n"
    "    mapping(address => uint256) public balances;\n"
    "    function deposit() external payable {\n"
    "        balances[msg.sender] += msg.value;\n"
    "    }\n"
    "    function withdraw() external {\n"
    "        (bool ok,) = msg.sender.call{value: balances[msg.sender]}(\"\");\n"
    "        require(ok);\n"
    "        balances[msg.sender] = 0;\n"
    "    }\n"
    "}\n"
)


def make_vulnerable_entry(entry_id: str, text: str = SOLIDITY_SNIPPET,
                          label: str = "reentrancy",
                          span: tuple[int, int] | None = (7, 11),
                          provenance: str = "manual",
                          dataset_version: int = 0) -> DatasetEntry:
    return DatasetEntry(
        entry_id=entry_id,
        contract=ContractDocument(id=entry_id, source_text=text,
                                  origin="manual-labeled:test"),
        annotations=[VulnerabilityAnnotation(
            label_id=label,
            span=span,
            rationale=f"{label} weakness in {entry_id}",
        )],
        polarity="vulnerable",
        provenance=provenance,
        dataset_version=dataset_version,
    )


def make_secure_entry(entry_id: str, text: str = SOLIDITY_SNIPPET,
                      provenance: str = "manual",
                      dataset_version: int = 0) -> DatasetEntry:
    return DatasetEntry(
        entry_id=entry_id,
        contract=ContractDocument(id=entry_id, source_text=text,
                                  origin="manual-labeled:test"),
        annotations=[],
        polarity="secure",
        provenance=provenance,
        dataset_version=dataset_version,
        secure_rationale="state is updated before any external call",
    )


def make_seed(entry_id: str, marker: str) -> DatasetEntry:
    """A small distinct seed contract; the marker keeps texts unique."""
    text = SOLIDITY_SNIPPET.replace("Wallet", f"Wallet{marker}")
    return make_vulnerable_entry(entry_id, text=text)


def developer_code(marker: str) -> str:
    return (
        "pragma solidity ^0.8.0;\n"
        f"contract Lending{marker} {{\n"
        "    mapping(address => uint256) public shares;\n"
        "    function redeem() external {\n"
        f"        (bool ok,) = msg.sender.call{{value: shares[msg.sender]}}(\"\"); // {marker}\n"
        "        require(ok);\n"
        "        shares[msg.sender] = 0;\n"
        "    }\n"
        "}\n"
    )


def secured_code(marker: str) -> str:
    return (
        "pragma solidity ^0.8.0;\n"
        f"contract Lending{marker} {{\n"
        "    mapping(address => uint256) public shares;\n"
        "    function redeem() external {\n"
        "        uint256 owed = shares[msg.sender];\n"
        f"        shares[msg.sender] = 0; // {marker}\n"
        "        (bool ok,) = msg.sender.call{value: owed}(\"\");\n"
        "        require(ok);\n"
        "    }\n"
        "}\n"
    )


def build_distill_fixtures(
    seeds: list[DatasetEntry],
    catalog: list[ScenarioDescriptor],
    skip_developer_for: set[str] = frozenset(),
) -> dict[str, str]:
    """Script all three agents for every seed, assuming round-robin scenarios."""
    templates = default_templates()
    fixtures: dict[str, str] = {}
    for index, seed in enumerate(seeds):
        marker = seed.entry_id.replace("-", "")
        scenario = catalog[index % len(catalog)]
        rationale = f"external call precedes the balance update in {seed.entry_id}"
        label = AgentLabel(label_id="reentrancy", label_name="reentrancy",
                           rationale=rationale)

        distillation_prompt = render_prompt(
            templates["Distillation"], {"seed_code": seed.contract.source_text}
        )
        fixtures[stub_key("Distillation", distillation_prompt)] = json.dumps({
            "labels": [{"label_id": "reentrancy", "label_name": "reentrancy",
                        "rationale": rationale, "span": [7, 11]}],
        })

        if seed.entry_id in skip_developer_for:
            continue
        developer_prompt = render_prompt(templates["Developer"], {
            "label": format_label_binding(label),
            "rationale": rationale,
            "scenario": format_scenario_binding(scenario),
        })
        code = developer_code(marker)
        fixtures[stub_key("Developer", developer_prompt)] = json.dumps({
            "labels": [{"label_id": "reentrancy", "label_name": "reentrancy",
                        "rationale": f"redeem() pays out before zeroing shares ({marker})",
                        "span": [4, 8]}],
            "code": code,
        })

        security_prompt = render_prompt(templates["Security"],
                                        {"vulnerable_code": code})
        fixtures[stub_key("Security", security_prompt)] = json.dumps({
            "code": secured_code(marker),
            "notes": f"shares are zeroed before the external call ({marker})",
        })
    return fixtures


def write_fixture_file(path, fixtures: dict[str, str]) -> None:
    lines = [
        json.dumps({"key": key, "content": content, "finish_reason": "stop"},
                   ensure_ascii=False)
        for key, content in fixtures.items()
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
