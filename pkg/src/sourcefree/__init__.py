"""Source-free domain adaptation with composite negative classes."""

from sourcefree.errors import (
    ConfigurationError,
    DataError,
    InvalidInputError,
    SourceFreeError,
    TrainingDivergedError,
)
from sourcefree.labels import LabelSpace, NegativeClassTable, build_negative_table, make_label_space

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DataError",
    "InvalidInputError",
    "LabelSpace",
    "NegativeClassTable",
    "SourceFreeError",
    "TrainingDivergedError",
    "build_negative_table",
    "make_label_space",
]
