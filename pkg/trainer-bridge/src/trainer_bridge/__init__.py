"""trainer-bridge: training-backend adapter speaking instr/1 and pred/1."""

__version__ = "0.1.0"

from .inference import MockAssumptions, predict
from .schemas import (
    SchemaValidationError,
    read_eval_entries,
    validate_instruction_file,
)
from .training import TrainJob, TrainingEnvironmentError, train

__all__ = [
    "MockAssumptions",
    "SchemaValidationError",
    "TrainJob",
    "TrainingEnvironmentError",
    "predict",
    "read_eval_entries",
    "train",
    "validate_instruction_file",
    "__version__",
]
