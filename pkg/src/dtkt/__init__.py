"""Key-value memory-network knowledge tracing with a conditional pseudo-labeled loss."""

from .data import Dataset, Interaction, StudentSequence, SyntheticConfig
from .model import MemoryState, ModelConfig, WriteMode
from .training import TrainConfig, train

__all__ = [
    "Dataset",
    "Interaction",
    "StudentSequence",
    "SyntheticConfig",
    "MemoryState",
    "ModelConfig",
    "WriteMode",
    "TrainConfig",
    "train",
]

__version__ = "0.1.0"
