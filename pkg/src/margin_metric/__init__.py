"""Euclidean-margin metric learning at desk scale.

Losses with analytic gradients, decision-region geometry, a toy
domain-conditional encoder, prototype hashing and retrieval metrics.
"""

from margin_metric.batch import PHOTO, SKETCH, EmbeddingBatch

__all__ = ["EmbeddingBatch", "PHOTO", "SKETCH"]
__version__ = "0.1.0"
