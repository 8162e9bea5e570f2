"""embkit: desk-scale text-embedding toolkit.

Curation of training text pairs, a six-task evaluation benchmark with exact
metrics, and a three-stage training recipe over a small encoder with
closed-form gradients.
"""

__version__ = "0.1.0"

from .datamodel import (
    EmbeddingMatrix,
    EvaluationReport,
    TaskDataset,
    TaskKind,
    TextPair,
)

__all__ = [
    "__version__",
    "EmbeddingMatrix",
    "EvaluationReport",
    "TaskDataset",
    "TaskKind",
    "TextPair",
]
