"""auditforge: build, curate, gate, and score smart-contract auditing datasets."""

__version__ = "0.1.0"

from .corpus import (
    ContractDocument,
    DatasetEntry,
    InstructionRecord,
    VulnerabilityAnnotation,
    load_annotated_corpus,
    merge_datasets,
    read_entries,
    write_entries,
)
from .gate import (
    GateConfig,
    GateState,
    LossReport,
    PredictionRecord,
    assumed_label_loss,
    assumed_rationale_loss,
    classify_model,
    combined_loss,
    gate_step,
    initial_filter,
    label_loss,
    rationale_loss,
    weighted_label_loss,
)

__all__ = [
    "ContractDocument",
    "DatasetEntry",
    "InstructionRecord",
    "VulnerabilityAnnotation",
    "load_annotated_corpus",
    "merge_datasets",
    "read_entries",
    "write_entries",
    "GateConfig",
    "GateState",
    "LossReport",
    "PredictionRecord",
    "assumed_label_loss",
    "assumed_rationale_loss",
    "classify_model",
    "combined_loss",
    "gate_step",
    "initial_filter",
    "label_loss",
    "rationale_loss",
    "weighted_label_loss",
    "__version__",
]
