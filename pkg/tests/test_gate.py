import json
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from auditforge.corpus import read_entries, write_entries
from auditforge.gate import (
    GateConfig,
    GateStateError,
    LossReport,
    PredictionRecord,
    advance_dataset_version,
    assumed_label_loss,
    assumed_rationale_loss,
    classify_model,
    combined_loss,
    export_revision_queue,
    gate_step,
    group_records_by_model,
    import_revised_dataset,
    init_gate_state,
    initial_filter,
    label_loss,
    load_gate_state,
    loss_report_from_records,
    rationale_loss,
    read_prediction_log,
    save_gate_state,
    weighted_label_loss,
)

from factories import make_vulnerable_entry


def record(entry_id: str, probability: float, correct: bool = True,
           presence: float = 0.8, model_id: str = "m") -> PredictionRecord:
    return PredictionRecord(
        model_id=model_id, entry_id=entry_id,
        label_probability=probability,
        rationale_presence=presence, rationale_correct=correct,
    )


class TestLabelLoss:
    def test_hand_computed_mean(self):
        # -(ln 0.7 + ln 0.7 + ln 0.3) / 3
        records = [record("a", 0.7), record("b", 0.7), record("c", 0.3)]
        assert label_loss(records) == pytest.approx(0.6391, abs=1e-4)

    def test_perfect_model_scores_zero(self):
        records = [record(str(i), 1.0) for i in range(4)]
        assert label_loss(records) == 0.0

    def test_single_low_probability_record(self):
        assert label_loss([record("a", 0.3)]) == pytest.approx(1.2040, abs=1e-4)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError, match="record"):
            label_loss([])

    def test_zero_probability_rejected_at_construction(self):
        with pytest.raises(ValueError, match="label_probability"):
            record("a", 0.0)


class TestWeightedLabelLoss:
    def test_balanced_classes_equal_plain_loss(self):
        records = [record("a", 0.6), record("b", 0.4),
                   record("c", 0.6), record("d", 0.4)]
        labels = {"a": "x", "b": "x", "c": "y", "d": "y"}
        assert weighted_label_loss(records, "by-label-count", labels) == pytest.approx(
            label_loss(records), abs=1e-12)

    def test_imbalanced_classes_hand_computed(self):
        # three of class A and one of class B, all at p = 0.5:
        # weights 2/3 and 2, loss = -(1/4)(3*(2/3) + 2) ln 0.5 = ln 2
        records = [record(e, 0.5) for e in ("a1", "a2", "a3", "b1")]
        labels = {"a1": "A", "a2": "A", "a3": "A", "b1": "B"}
        assert weighted_label_loss(records, "by-label-count", labels) == pytest.approx(
            math.log(2), abs=1e-12)

    def test_single_class_equals_plain_loss(self):
        records = [record("a", 0.7), record("b", 0.3)]
        labels = {"a": "only", "b": "only"}
        assert weighted_label_loss(records, "by-label-count", labels) == pytest.approx(
            label_loss(records), abs=1e-12)

    def test_rationale_validity_classes(self):
        records = [record("a", 0.5, correct=True), record("b", 0.5, correct=False)]
        assert weighted_label_loss(records, "by-valid-rationale-count") == pytest.approx(
            label_loss(records), abs=1e-12)

    def test_missing_true_label_rejected(self):
        with pytest.raises(ValueError, match="true label"):
            weighted_label_loss([record("a", 0.5)], "by-label-count", {})

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ValueError, match="scheme"):
            weighted_label_loss([record("a", 0.5)], "by-magic")


class TestRationaleLoss:
    def test_correct_rationale_at_point_eight(self):
        assert rationale_loss([record("a", 0.5, correct=True, presence=0.8)]) == \
            pytest.approx(0.2231, abs=1e-4)

    def test_incorrect_rationale_symmetric(self):
        assert rationale_loss([record("a", 0.5, correct=False, presence=0.2)]) == \
            pytest.approx(0.2231, abs=1e-4)

    def test_hard_predictions_clamp_to_near_zero_loss(self):
        records = [record("a", 0.5, correct=True, presence=1.0),
                   record("b", 0.5, correct=False, presence=0.0)]
        assert rationale_loss(records) == pytest.approx(0.0, abs=1e-6)


class TestCombinedLoss:
    def test_recorded_first_round_row(self):
        assert combined_loss(1.01, 1.08, 0.7) == pytest.approx(1.766, abs=1e-12)

    def test_recorded_final_round_row(self):
        assert combined_loss(0.40, 0.30, 0.7) == pytest.approx(0.61, abs=1e-12)

    def test_zero_weight_returns_label_loss(self):
        assert combined_loss(1.3, 0.9, 0.0) == 1.3

    @settings(max_examples=50, deadline=None)
    @given(label=st.floats(0, 5), rationale=st.floats(0, 5),
           weight=st.floats(0, 2), bump=st.floats(0, 1))
    def test_monotone_and_linear(self, label, rationale, weight, bump):
        base = combined_loss(label, rationale, weight)
        assert combined_loss(label + bump, rationale, weight) >= base
        assert combined_loss(label, rationale + bump, weight) >= base
        # linear in the weight
        assert combined_loss(label, rationale, weight + bump) == pytest.approx(
            base + bump * rationale, rel=1e-9, abs=1e-12)


class TestAssumedLosses:
    def test_all_wrong_endpoint(self):
        assert assumed_label_loss(500, 0, 0.7) == pytest.approx(1.2040, abs=1e-4)

    def test_baseline_point(self):
        assert assumed_label_loss(500, 50, 0.7) == pytest.approx(1.1192, abs=1e-4)

    def test_all_correct_endpoint(self):
        assert assumed_label_loss(500, 500, 0.7) == pytest.approx(0.3567, abs=1e-4)

    def test_rationale_endpoints_and_midpoint(self):
        assert assumed_rationale_loss(500, 500, 0.8) == pytest.approx(0.2231, abs=1e-4)
        assert assumed_rationale_loss(500, 0, 0.8) == pytest.approx(1.6094, abs=1e-4)
        assert assumed_rationale_loss(500, 250, 0.8) == pytest.approx(0.9163, abs=1e-4)

    def test_bounds_enforced(self):
        with pytest.raises(ValueError):
            assumed_label_loss(0, 0, 0.7)
        with pytest.raises(ValueError):
            assumed_label_loss(10, 11, 0.7)
        with pytest.raises(ValueError):
            assumed_label_loss(10, 5, 1.0)

    @settings(max_examples=80, deadline=None)
    @given(total=st.integers(1, 2000), correct=st.integers(0, 2000),
           probability=st.floats(0.01, 0.99))
    def test_affine_between_endpoints(self, total, correct, probability):
        correct = min(correct, total)
        lo = -math.log(1.0 - probability)  # all wrong
        hi = -math.log(probability)        # all correct
        expected = (correct / total) * hi + (1 - correct / total) * lo
        assert assumed_label_loss(total, correct, probability) == pytest.approx(
            expected, rel=1e-12, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(total=st.integers(1, 500), correct_fraction=st.floats(0, 1),
           probability=st.floats(0.05, 0.95))
    def test_exact_path_equals_closed_form_under_uniform_probabilities(
            self, total, correct_fraction, probability):
        correct = round(total * correct_fraction)
        records = []
        for i in range(total):
            if i < correct:
                records.append(record(f"e{i}", probability, correct=True))
            else:
                records.append(record(f"e{i}", 1.0 - probability, correct=False))
        assert label_loss(records) == pytest.approx(
            assumed_label_loss(total, correct, probability), rel=1e-12, abs=1e-12)


class TestClassifyModel:
    CONFIG = GateConfig()

    def test_recorded_verdicts(self):
        assert classify_model(1.901, self.CONFIG) == "unsuitable"
        assert classify_model(1.65, self.CONFIG) == "acceptable"
        assert classify_model(0.733, self.CONFIG) == "well-optimized"

    def test_boundaries_are_inclusive_below(self):
        assert classify_model(0.84, self.CONFIG) == "well-optimized"
        assert classify_model(1.74, self.CONFIG) == "acceptable"

    @settings(max_examples=100, deadline=None)
    @given(loss=st.floats(0, 10, allow_nan=False))
    def test_partition_is_total(self, loss):
        verdict = classify_model(loss, self.CONFIG)
        assert verdict in ("well-optimized", "acceptable", "unsuitable")
        if loss <= 0.84:
            assert verdict == "well-optimized"
        elif loss <= 1.74:
            assert verdict == "acceptable"
        else:
            assert verdict == "unsuitable"


class TestInitialFilter:
    def test_boundary_and_ordering(self):
        candidates = [("kept-low", 0.92), ("boundary", 1.12), ("kept-mid", 1.04),
                      ("excluded", 1.20)]
        assert initial_filter(candidates, 1.12) == ["kept-low", "kept-mid"]

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError):
            initial_filter([], 1.12)


def report(model_id: str, combined: float, version: int = 0,
           weight: float = 0.7) -> LossReport:
    label = combined / (1 + weight)
    rationale = combined / (1 + weight)
    return LossReport(
        model_id=model_id, dataset_version=version, total=10,
        correct_count=5, incorrect_count=5,
        label_loss=label, rationale_loss=rationale,
        rationale_weight=weight, combined=label + weight * rationale,
    )


class TestGateStep:
    def test_unsuitable_model_removed(self):
        state = init_gate_state(["llama2-7b"], "d0")
        next_state, actions = gate_step(state, [report("llama2-7b", 1.766)])
        assert actions[0].kind == "remove"
        assert next_state.roster[0].status == "removed"
        assert next_state.outcome == "exhausted"  # nothing left to iterate

    def test_acceptable_model_requests_revision(self):
        state = init_gate_state(["mistral-7b"], "d0")
        records = {"mistral-7b": [record(f"e{i}", p, model_id="mistral-7b")
                                  for i, p in enumerate([0.9, 0.2, 0.5, 0.8, 0.4,
                                                         0.95, 0.6, 0.7, 0.85, 0.3])]}
        next_state, actions = gate_step(state, [report("mistral-7b", 1.444)],
                                        records_by_model=records)
        assert actions[0].kind == "request-revision"
        assert next_state.outcome == "running"
        # 10% of 10 distinct entries -> the single lowest-probability entry
        assert next_state.revision_queue == ["e1"]
        assert next_state.roster[0].status == "selected"  # carried to next round

    def test_well_optimized_model_finishes_run(self):
        state = init_gate_state(["llama3-8b"], "d0")
        next_state, actions = gate_step(state, [report("llama3-8b", 0.61)])
        assert actions[0].kind == "finish"
        assert next_state.outcome == "finished"
        assert next_state.final_dataset == "d0"

    def test_finish_stops_processing_further_models(self):
        state = init_gate_state(["first", "second"], "d0")
        next_state, actions = gate_step(
            state, [report("first", 0.5), report("second", 1.9)])
        assert [a.kind for a in actions] == ["finish"]
        # the second model keeps its pre-round status
        assert next_state.roster[1].status == "selected"

    def test_missing_report_rejected(self):
        state = init_gate_state(["a", "b"], "d0")
        with pytest.raises(GateStateError, match="missing report"):
            gate_step(state, [report("a", 1.0)])

    def test_unknown_model_rejected(self):
        state = init_gate_state(["a"], "d0")
        with pytest.raises(GateStateError, match="unknown"):
            gate_step(state, [report("a", 1.0), report("ghost", 1.0)])

    def test_version_mismatch_rejected(self):
        state = init_gate_state(["a"], "d0")
        with pytest.raises(GateStateError, match="version"):
            gate_step(state, [report("a", 1.0, version=3)])

    def test_removed_model_needs_no_report_and_never_returns(self):
        state = init_gate_state(["bad", "ok"], "d0")
        state, _ = gate_step(state, [report("bad", 2.5), report("ok", 1.0)])
        assert state.roster[0].status == "removed"
        state = advance_dataset_version(state, "d1")
        next_state, _ = gate_step(state, [report("ok", 1.0, version=1)])
        assert next_state.roster[0].status == "removed"

    def test_exhausted_when_iteration_budget_spent(self):
        config = GateConfig(max_iterations=2)
        state = init_gate_state(["a"], "d0", config)
        state, _ = gate_step(state, [report("a", 1.0)])
        assert state.outcome == "running"
        state = advance_dataset_version(state, "d1")
        state, _ = gate_step(state, [report("a", 1.0, version=1)])
        assert state.outcome == "exhausted"

    def test_step_on_finished_state_rejected(self):
        state = init_gate_state(["a"], "d0")
        state, _ = gate_step(state, [report("a", 0.5)])
        with pytest.raises(GateStateError, match="not running"):
            gate_step(state, [report("a", 0.5)])


class TestGateLoopProperties:
    def test_randomized_trajectories_terminate(self):
        rng = random.Random(20240817)
        config = GateConfig()
        for _ in range(300):
            model_ids = [f"m{i}" for i in range(rng.randint(1, 4))]
            state = init_gate_state(model_ids, "d0", config)
            rounds = 0
            while state.outcome == "running":
                reports = [report(slot.model_id, rng.uniform(0.0, 2.6),
                                  version=state.iteration)
                           for slot in state.active_models()]
                removed_before = {s.model_id for s in state.roster
                                  if s.status == "removed"}
                state, actions = gate_step(state, reports, config)
                rounds += 1
                removed_after = {s.model_id for s in state.roster
                                 if s.status == "removed"}
                assert removed_before <= removed_after
                assert rounds <= config.max_iterations
                if state.outcome == "running":
                    state = advance_dataset_version(state, f"d{state.iteration + 1}")
            assert state.outcome in ("finished", "exhausted")
            if state.outcome == "finished":
                finisher = next(a.model_id for a in actions if a.kind == "finish")
                finishing_report = next(r for r in reports if r.model_id == finisher)
                assert finishing_report.combined <= config.finish_threshold


class TestStatePersistence:
    def test_round_trip(self, tmp_path):
        state = init_gate_state(["a", "b"], "d0", GateConfig(max_iterations=4))
        state, _ = gate_step(state, [report("a", 1.0), report("b", 2.0)])
        path = tmp_path / "state.json"
        save_gate_state(state, path)
        loaded = load_gate_state(path)
        assert loaded == state

    def test_schema_guard(self, tmp_path):
        path = tmp_path / "state.json"
        path.write_text(json.dumps({"schema": "gate/9"}))
        with pytest.raises(GateStateError, match="schema"):
            load_gate_state(path)


class TestRevisionRoundTrip:
    def _running_state_with_queue(self, tmp_path, queue):
        entries = [make_vulnerable_entry(f"e{i}") for i in range(4)]
        dataset = tmp_path / "d0.jsonl"
        write_entries(entries, dataset)
        state = init_gate_state(["m"], str(dataset))
        state.revision_queue = list(queue)
        return state, entries, dataset

    def test_export_writes_flagged_entries_with_evidence(self, tmp_path):
        state, entries, _ = self._running_state_with_queue(tmp_path, ["e0", "e2", "e3"])
        out = tmp_path / "revisions.jsonl"
        records = {"m": [record(f"e{i}", 0.2 + 0.1 * i, model_id="m")
                         for i in range(4)]}
        count = export_revision_queue(state, out, entries, records)
        assert count == 3
        lines = out.read_text().strip().split("\n")
        assert len(lines) == 4  # header + 3 entries
        payload = json.loads(lines[1])
        assert payload["entry_id"] == "e0"
        assert payload["revision_evidence"][0]["label_probability"] == pytest.approx(0.2)

    def test_empty_queue_rejected(self, tmp_path):
        state, entries, _ = self._running_state_with_queue(tmp_path, [])
        with pytest.raises(GateStateError, match="empty"):
            export_revision_queue(state, tmp_path / "out.jsonl", entries)

    def test_import_of_unmodified_export_advances_with_empty_diff(self, tmp_path):
        state, entries, dataset = self._running_state_with_queue(tmp_path, ["e1"])
        export_path = tmp_path / "revisions.jsonl"
        export_revision_queue(state, export_path, entries)
        out = tmp_path / "d1.jsonl"
        next_state, diff = import_revised_dataset(state, export_path, out)
        assert next_state.iteration == 1
        assert next_state.dataset_chain[-1] == str(out)
        assert next_state.revision_queue == []
        assert diff.changed == [] and diff.added == []
        reloaded = read_entries(out)
        assert len(reloaded) == 4
        assert all(e.dataset_version == 1 for e in reloaded)

    def test_import_rejects_invalid_entry_naming_it(self, tmp_path):
        state, entries, dataset = self._running_state_with_queue(tmp_path, ["e1"])
        export_path = tmp_path / "revisions.jsonl"
        export_revision_queue(state, export_path, entries)
        text = export_path.read_text().replace('"polarity":"vulnerable"',
                                               '"polarity":"secure"')
        bad = tmp_path / "bad.jsonl"
        bad.write_text(text)
        with pytest.raises(Exception, match="e1"):
            import_revised_dataset(state, bad, tmp_path / "d1.jsonl")

    def test_unflagged_import_accepted_as_addition_with_warning(self, tmp_path, caplog):
        state, entries, dataset = self._running_state_with_queue(tmp_path, ["e1"])
        extra = make_vulnerable_entry("novel")
        revised = tmp_path / "revised.jsonl"
        write_entries([entries[1], extra], revised)
        import logging
        with caplog.at_level(logging.WARNING):
            next_state, diff = import_revised_dataset(state, revised,
                                                      tmp_path / "d1.jsonl")
        assert "novel" in caplog.text
        assert diff.added == ["novel"]
        assert len(read_entries(tmp_path / "d1.jsonl")) == 5


class TestPredictionLog:
    def test_round_trip_and_grouping(self, tmp_path):
        path = tmp_path / "pred.jsonl"
        rows = [
            {"schema": "pred/1", "model_id": "m1", "entry_id": "e1",
             "label_probability": 0.7,
             "predicted_labels": [{"label_id": "reentrancy", "probability": 0.7}],
             "rationale_presence": 0.8, "rationale_correct": True,
             "raw_report": "{}"},
            {"schema": "pred/1", "model_id": "m2", "entry_id": "e1",
             "label_probability": 0.3, "predicted_labels": [],
             "rationale_presence": 0.8, "rationale_correct": False,
             "raw_report": ""},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        records = read_prediction_log(path)
        grouped = group_records_by_model(records)
        assert set(grouped) == {"m1", "m2"}
        assert grouped["m1"][0].predicted_labels[0].label_id == "reentrancy"

    def test_schema_mismatch_names_line(self, tmp_path):
        path = tmp_path / "pred.jsonl"
        path.write_text('{"schema":"pred/2"}\n')
        with pytest.raises(Exception, match="1"):
            read_prediction_log(path)

    def test_loss_report_from_records(self):
        records = [record("a", 0.7, correct=True), record("b", 0.3, correct=False)]
        built = loss_report_from_records("m", 0, records, GateConfig())
        assert built.total == 2
        assert built.correct_count == 1
        assert built.combined == pytest.approx(
            built.label_loss + 0.7 * built.rationale_loss, abs=1e-15)
