"""File builders for the bridge's wire formats."""

from __future__ import annotations

import json


def instruction_line(marker: str) -> str:
    return json.dumps({
        "schema": "instr/1",
        "instruction": "audit the contract",
        "input": f"pragma solidity;\ncontract C{marker} {{}}",
        "output": f"finding {marker}",
    })


def write_instruction_file(path, count: int = 3) -> None:
    path.write_text("\n".join(instruction_line(str(i)) for i in range(count)) + "\n",
                    encoding="utf-8")


def entry_line(entry_id: str, label: str = "reentrancy") -> str:
    return json.dumps({
        "schema": "entry/1",
        "entry_id": entry_id,
        "polarity": "vulnerable",
        "provenance": "manual",
        "dataset_version": 0,
        "contract": {"id": entry_id, "origin": "manual-labeled",
                     "text": f"pragma solidity;\ncontract {entry_id.replace('-', '')} {{}}"},
        "annotations": [{"label_id": label, "label_name": label,
                         "category": "V2", "rationale": "why"}],
    })


def write_entries_file(path, count: int) -> None:
    lines = [json.dumps({"schema": "entry/1", "count": count})]
    lines.extend(entry_line(f"e-{i}") for i in range(count))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
