"""Mini-batch container shared by the loss modules and the trainer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Batch:
    """N frames with their camera, tracklet label and classification target.

    ``classes`` equals ``labels`` in unsupervised training; the weakly
    supervised mode maps each tracklet to its per-camera identity class.
    """

    cameras: np.ndarray
    labels: np.ndarray
    classes: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.cameras = np.asarray(self.cameras, dtype=int)
        self.labels = np.asarray(self.labels, dtype=int)
        self.classes = np.asarray(self.classes, dtype=int)
        self.x = np.asarray(self.x, dtype=float)

    def __len__(self):
        return self.x.shape[0]

    def groups(self) -> list[tuple[int, int, np.ndarray]]:
        """(camera, label, frame rows) per distinct in-batch tracklet, first-seen order."""
        seen: dict[tuple[int, int], list[int]] = {}
        for row, key in enumerate(zip(self.cameras.tolist(), self.labels.tolist())):
            seen.setdefault(key, []).append(row)
        return [(t, i, np.array(rows)) for (t, i), rows in seen.items()]
