"""Extraction of JSON objects from chatty model output.

Models frequently wrap the requested JSON report in prose ("Sure! Here is
the report: {...} Hope it helps").  The helpers here first try a strict
parse of the whole text and then fall back to decoding the first balanced
``{...}`` block found anywhere in it.
"""

from __future__ import annotations

import json


def extract_first_json_object(text: str) -> dict | None:
    """Return the first JSON object found in *text*, or None when there is none."""
    try:
        value = json.loads(text)
        if isinstance(value, dict):
            return value
    except json.JSONDecodeError:
        pass
    decoder = json.JSONDecoder()
    index = text.find("{")
    while index != -1:
        try:
            value, _ = decoder.raw_decode(text, index)
            if isinstance(value, dict):
                return value
        except json.JSONDecodeError:
            pass
        index = text.find("{", index + 1)
    return None
