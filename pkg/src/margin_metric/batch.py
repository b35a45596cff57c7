"""Labelled, domain-tagged batches of vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PHOTO = 0
SKETCH = 1
DOMAIN_NAMES = {"photo": PHOTO, "sketch": SKETCH}


@dataclass
class EmbeddingBatch:
    """N feature vectors with class labels and photo/sketch domain tags.

    The same container holds raw synthetic inputs and encoder outputs.
    """

    vectors: np.ndarray
    labels: np.ndarray
    domains: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {self.vectors.shape}")
        n = self.vectors.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.domains is None:
            self.domains = np.zeros(n, dtype=np.uint8)
        self.domains = np.asarray(self.domains, dtype=np.uint8).reshape(-1)
        if self.labels.shape[0] != n or self.domains.shape[0] != n:
            raise ValueError(
                f"{n} vectors but {self.labels.shape[0]} labels and "
                f"{self.domains.shape[0]} domain tags"
            )
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")
        if np.any(self.domains > 1):
            raise ValueError("domain tags must be 0 (photo) or 1 (sketch)")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, mask_or_index) -> "EmbeddingBatch":
        return EmbeddingBatch(
            self.vectors[mask_or_index],
            self.labels[mask_or_index],
            self.domains[mask_or_index],
        )

    def domain(self, tag: int) -> "EmbeddingBatch":
        return self.subset(self.domains == tag)

    def check(self, num_classes: int | None = None) -> None:
        """Raise if any entry is non-finite or a label is out of range."""
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("batch contains non-finite vector entries")
        if num_classes is not None and len(self) and self.labels.max() >= num_classes:
            raise ValueError(
                f"label {int(self.labels.max())} out of range for {num_classes} classes"
            )
