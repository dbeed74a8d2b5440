import json

import pytest
from hypothesis import given, settings, strategies as st

from auditforge.corpus import (
    ContractDocument,
    CorpusFormatError,
    DatasetEntry,
    DuplicateEntryError,
    InstructionRecord,
    VulnerabilityAnnotation,
    categorize_label,
    load_annotated_corpus,
    merge_datasets,
    normalize_label_id,
    read_entries,
    read_instruction_records,
    write_entries,
    write_instruction_records,
)

from factories import make_secure_entry, make_vulnerable_entry


class TestDomainTypes:
    def test_line_count_matches_newline_delimited_lines(self):
        doc = ContractDocument(id="c", source_text="a\nb\nc", origin="synthetic")
        assert doc.line_count == 3

    def test_empty_text_has_zero_lines(self):
        doc = ContractDocument(id="c", source_text="", origin="synthetic")
        assert doc.line_count == 0

    def test_control_characters_rejected(self):
        with pytest.raises(ValueError, match="control"):
            ContractDocument(id="c", source_text="a\x00b", origin="synthetic")
        with pytest.raises(ValueError, match="control"):
            ContractDocument(id="c", source_text="a\rb", origin="synthetic")
        # newline and tab are fine
        ContractDocument(id="c", source_text="a\n\tb", origin="synthetic")

    def test_vulnerable_entry_requires_annotations(self):
        with pytest.raises(ValueError, match="annotation"):
            DatasetEntry(
                entry_id="e",
                contract=ContractDocument(id="e", source_text="x", origin="synthetic"),
                annotations=[],
                polarity="vulnerable",
                provenance="manual",
            )

    def test_secure_entry_requires_rationale_and_no_annotations(self):
        with pytest.raises(ValueError, match="secure_rationale"):
            DatasetEntry(
                entry_id="e",
                contract=ContractDocument(id="e", source_text="x", origin="synthetic"),
                annotations=[],
                polarity="secure",
                provenance="manual",
            )
        with pytest.raises(ValueError, match="no annotations"):
            DatasetEntry(
                entry_id="e",
                contract=ContractDocument(id="e", source_text="x", origin="synthetic"),
                annotations=[VulnerabilityAnnotation(label_id="reentrancy")],
                polarity="secure",
                provenance="manual",
                secure_rationale="fine",
            )

    def test_span_must_fit_document(self):
        with pytest.raises(ValueError, match="exceeds"):
            make_vulnerable_entry("e", text="one\ntwo", span=(1, 5))

    def test_label_id_normalization(self):
        assert normalize_label_id("Unchecked Low_Level CALLS!") == "unchecked-low-level-calls"
        assert normalize_label_id("  Reentrancy ") == "reentrancy"

    def test_categorize_label_aliases(self):
        assert categorize_label("reentrancy") == "V2"
        assert categorize_label("Integer Overflow") == "V8"
        assert categorize_label("timestamp dependence") == "V9"
        assert categorize_label("something-novel") == "uncategorized"

    def test_instruction_record_rejects_empty_fields(self):
        with pytest.raises(ValueError, match="output"):
            InstructionRecord(instruction="a", input="b", output="")


class TestPersistence:
    def test_empty_round_trip_is_header_only(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        write_entries([], path)
        assert path.read_text().count("\n") == 1
        assert read_entries(path) == []

    def test_two_entry_file_has_three_lines(self, tmp_path):
        entries = [make_vulnerable_entry("a"), make_secure_entry("b")]
        path = tmp_path / "two.jsonl"
        write_entries(entries, path)
        assert len(path.read_text().splitlines()) == 3
        assert read_entries(path) == entries

    def test_multiline_contract_text_survives_byte_for_byte(self, tmp_path):
        text = "pragma solidity ^0.8.0;\ncontract A {\n\tuint x; // é\n}\n"
        entry = make_vulnerable_entry("multi", text=text, span=(2, 3))
        path = tmp_path / "multi.jsonl"
        write_entries([entry], path)
        loaded = read_entries(path)
        assert loaded[0].contract.source_text == text
        assert loaded == [entry]

    def test_schema_version_mismatch_is_reported(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"schema":"entry/99","count":0}\n')
        with pytest.raises(CorpusFormatError, match="schema"):
            read_entries(path)

    def test_write_rejects_duplicate_ids(self, tmp_path):
        entries = [make_vulnerable_entry("a"), make_vulnerable_entry("a")]
        with pytest.raises(DuplicateEntryError):
            write_entries(entries, tmp_path / "dup.jsonl")

    def test_instruction_records_round_trip(self, tmp_path):
        records = [
            InstructionRecord("audit this", "contract A {}", "no findings"),
            InstructionRecord("audit this", "contract B {\n}", '{"findings":[]}'),
        ]
        path = tmp_path / "instr.jsonl"
        write_instruction_records(records, path)
        assert read_instruction_records(path) == records


_label_ids = st.sampled_from(
    ["reentrancy", "arithmetic", "access-control", "bad-randomness", "front-running"]
)
_code_text = st.text(
    alphabet=st.sampled_from(list("abcXYZ {}();=+\n\t\"'é中")), min_size=1, max_size=80
)


@st.composite
def _entries(draw):
    entry_id = draw(st.uuids()).hex
    text = draw(_code_text)
    polarity = draw(st.sampled_from(["vulnerable", "secure"]))
    doc = ContractDocument(id=entry_id, source_text=text, origin="synthetic")
    if polarity == "secure":
        return DatasetEntry(
            entry_id=entry_id, contract=doc, annotations=[], polarity="secure",
            provenance=draw(st.sampled_from(["manual", "distilled-secure"])),
            dataset_version=draw(st.integers(0, 3)),
            secure_rationale=draw(st.text(min_size=1, max_size=30)),
        )
    max_line = max(doc.line_count, 1)
    start = draw(st.integers(1, max_line))
    end = draw(st.integers(start, max_line))
    use_span = draw(st.booleans())
    annotation = VulnerabilityAnnotation(
        label_id=draw(_label_ids),
        span=(start, end) if use_span else None,
        function=draw(st.sampled_from([None, "withdraw", "redeem"])),
        rationale=draw(st.text(max_size=30)),
    )
    return DatasetEntry(
        entry_id=entry_id, contract=doc, annotations=[annotation],
        polarity="vulnerable",
        provenance=draw(st.sampled_from(["seed", "manual", "distilled-vulnerable"])),
        dataset_version=draw(st.integers(0, 3)),
    )


class TestRoundTripProperty:
    @settings(max_examples=60, deadline=None)
    @given(entries=st.lists(_entries(), max_size=6, unique_by=lambda e: e.entry_id))
    def test_persistence_round_trip_is_identity(self, entries, tmp_path_factory):
        path = tmp_path_factory.mktemp("rt") / "entries.jsonl"
        write_entries(entries, path)
        assert read_entries(path) == entries


class TestLoaders:
    def test_empty_jsonl_file_loads_as_empty_list(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_annotated_corpus(path, "entries-jsonl") == []

    def test_malformed_record_error_names_the_line(self, tmp_path):
        good = json.dumps({
            "schema": "entry/1", "entry_id": "ok-1", "polarity": "secure",
            "provenance": "manual", "dataset_version": 0,
            "contract": {"id": "ok-1", "origin": "manual-labeled", "text": "x"},
            "annotations": [], "secure_rationale": "fine",
        })
        bad = good.replace('"polarity": "secure"', '"polarity": 7')
        path = tmp_path / "three.jsonl"
        path.write_text("\n".join([good, bad.replace("ok-1", "ok-2"),
                                   good.replace("ok-1", "ok-3")]) + "\n")
        with pytest.raises(CorpusFormatError, match="line 2"):
            load_annotated_corpus(path, "entries-jsonl")

    def test_annotated_json_yields_category_and_span(self, tmp_path):
        document = {
            "schema": "annotated/1",
            "source_name": "curated-benchmark",
            "contracts": [{
                "id": "simple_dao",
                "source": "\n".join(f"line {i}" for i in range(1, 21)),
                "vulnerabilities": [{
                    "label": "reentrancy",
                    "lines": [10, 11, 12, 13, 14],
                    "function": "withdraw",
                    "rationale": "call before state update",
                }],
            }],
        }
        path = tmp_path / "annotated.json"
        path.write_text(json.dumps(document))
        entries = load_annotated_corpus(path, "annotated-json")
        assert len(entries) == 1
        entry = entries[0]
        assert entry.polarity == "vulnerable"
        assert entry.provenance == "manual"
        assert entry.contract.origin == "manual-labeled:curated-benchmark"
        annotation = entry.annotations[0]
        assert annotation.category == "V2"
        assert annotation.span == (10, 14)

    def test_annotated_json_span_beyond_document_is_rejected(self, tmp_path):
        document = {"contracts": [{
            "id": "short", "source": "one\ntwo",
            "vulnerabilities": [{"label": "reentrancy", "lines": [5, 9]}],
        }]}
        path = tmp_path / "annotated.json"
        path.write_text(json.dumps(document))
        with pytest.raises(CorpusFormatError, match="exceeds"):
            load_annotated_corpus(path, "annotated-json")

    def test_unknown_format_rejected(self, tmp_path):
        path = tmp_path / "x.jsonl"
        path.write_text("")
        with pytest.raises(ValueError, match="format"):
            load_annotated_corpus(path, "csv")

    def test_loader_accepts_header_and_headerless_files(self, tmp_path):
        entries = [make_vulnerable_entry("h-1")]
        with_header = tmp_path / "with.jsonl"
        write_entries(entries, with_header)
        headerless = tmp_path / "without.jsonl"
        headerless.write_text(with_header.read_text().split("\n", 1)[1])
        assert load_annotated_corpus(with_header, "entries-jsonl") == entries
        assert load_annotated_corpus(headerless, "entries-jsonl") == entries


class TestMerge:
    def test_merge_totals_sum_when_ids_distinct(self):
        vulnerable = [make_vulnerable_entry(f"v{i}") for i in range(975)]
        secure = [make_secure_entry(f"s{i}") for i in range(850)]
        merged = merge_datasets(vulnerable, secure)
        assert len(merged) == 1825
        assert merged[:975] == vulnerable
        assert merged[975:] == secure

    def test_merge_of_empty_inputs_is_empty(self):
        assert merge_datasets([], []) == []

    def test_duplicate_id_across_inputs_rejected(self):
        with pytest.raises(DuplicateEntryError, match="same"):
            merge_datasets([make_vulnerable_entry("same")],
                           [make_secure_entry("same")])

    def test_polarity_mismatch_rejected(self):
        with pytest.raises(ValueError, match="polarity"):
            merge_datasets([make_secure_entry("s")], [])
