from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class DetectionBox:
    """One detector proposal.

    ``proposal`` is the index of the proposal inside the model's output for
    the image it came from; models use it to re-score the same box
    differentiably.
    """

    rect: tuple[float, float, float, float]
    class_scores: np.ndarray
    objectness: float
    proposal: int = -1

    def __post_init__(self):
        self.rect = tuple(float(v) for v in self.rect)
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)
        x0, y0, x1, y1 = self.rect
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate rectangle {self.rect}")
        if self.class_scores.min() < 0 or abs(self.class_scores.sum() - 1) > 1e-6:
            raise ValueError("class scores must be a probability vector")

    @property
    def label(self) -> int:
        """Most likely class id (0 is background)."""
        return int(np.argmax(self.class_scores))

    def score(self, class_id: int) -> float:
        return float(self.class_scores[class_id])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x0 = np.maximum(a[:, None, 0], b[None, :, 0])
    y0 = np.maximum(a[:, None, 1], b[None, :, 1])
    x1 = np.minimum(a[:, None, 2], b[None, :, 2])
    y1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a, b) -> float:
    return float(iou_matrix(a, b)[0, 0])


def nms(rects: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Returns indices of kept boxes sorted by descending score; ties keep the
    lower index first. A box is dropped if its IoU with a kept box exceeds
    ``iou_threshold``.
    """
    rects = np.asarray(rects, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        overlaps = iou_matrix(rects[i], rects[order[1:]])[0]
        order = order[1:][overlaps <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)
