"""Cross-modality pseudo-label correspondence via multi-memory matching.

Clusters two embedding sets (visible / infrared), splits each cluster into
several sub-memories, matches clusters across modalities through a bipartite
assignment over sub-memory distances, weighs samples with a confidence model
over their identification losses, and trains free embedding parameters with
contrastive and distribution-alignment losses.
"""

__version__ = "0.1.0"

from .model import (
    Assignment,
    ConfidenceWeights,
    EmbeddingSet,
    GmmFit,
    MemoryBank,
    MultiMemoryBank,
    PipelineConfig,
    PseudoLabeling,
    concat_sets,
    normalize_rows,
    validate,
)
from .pipeline import TrainingResult, run_training

__all__ = [
    "Assignment",
    "ConfidenceWeights",
    "EmbeddingSet",
    "GmmFit",
    "MemoryBank",
    "MultiMemoryBank",
    "PipelineConfig",
    "PseudoLabeling",
    "TrainingResult",
    "concat_sets",
    "normalize_rows",
    "run_training",
    "validate",
]
