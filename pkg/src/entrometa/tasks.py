"""Episode containers shared by task construction, training, and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Task"]


@dataclass
class Task:
    """A c-way episode: disjoint support/query splits with integer labels.

    ``support_y``/``query_y`` are the training targets (pseudo labels for
    unsupervised episodes, possibly corrupted labels for supervised
    analogs).  ``support_true``/``query_true`` carry generator ground
    truth when available, for evaluation only.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    way: int
    support_true: np.ndarray | None = None
    query_true: np.ndarray | None = None

    def __post_init__(self):
        self.support_x = np.asarray(self.support_x, dtype=np.float64)
        self.query_x = np.asarray(self.query_x, dtype=np.float64)
        self.support_y = np.asarray(self.support_y)
        self.query_y = np.asarray(self.query_y)
        if self.way < 2:
            raise ValueError(f"task way must be >= 2, got {self.way}")
        for name, y in (("support_y", self.support_y), ("query_y", self.query_y)):
            if y.size and (y.min() < 0 or y.max() >= self.way):
                raise ValueError(f"{name} outside [0, {self.way})")
        if set(np.unique(self.support_y)) != set(range(self.way)):
            raise ValueError("every class must appear in the support set")
