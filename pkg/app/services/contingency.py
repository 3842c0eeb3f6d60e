"""
Contingency (intersection) tables between two label maps.
"""

from dataclasses import dataclass

import numpy as np

from app.errors import DimensionMismatchError


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray  # (|A|, |B|) int64, counts[a, b] = |a ∩ b|

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def row_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def _as_labels(seg) -> np.ndarray:
    return np.asarray(getattr(seg, "labels", seg))


def contingency_table(seg_a, seg_b) -> ContingencyTable:
    """Accepts SegmentationMaps or integer arrays of equal shape."""
    a, b = _as_labels(seg_a), _as_labels(seg_b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Label maps differ in shape: {a.shape} vs {b.shape}")
    _, a_ids = np.unique(a.ravel(), return_inverse=True)
    _, b_ids = np.unique(b.ravel(), return_inverse=True)
    n_a, n_b = int(a_ids.max()) + 1, int(b_ids.max()) + 1
    flat = np.bincount(a_ids * n_b + b_ids, minlength=n_a * n_b)
    return ContingencyTable(flat.reshape(n_a, n_b).astype(np.int64))
