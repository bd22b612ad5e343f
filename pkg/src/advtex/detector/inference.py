from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import torch

from .boxes import DetectionBox, nms
from .models import Proposals, ToyDetector

Aggregation = Literal["mean", "max"]


@dataclass
class DetectorConfig:
    nms_iou_threshold: float = 0.3
    confidence_threshold: float = 0.6
    target_class: int = 1

    def __post_init__(self):
        if not 0 < self.nms_iou_threshold <= 1:
            raise ValueError("nms_iou_threshold must lie in (0, 1]")
        if not 0 <= self.confidence_threshold <= 1:
            raise ValueError("confidence_threshold must lie in [0, 1]")


def model_dtype(model: torch.nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """HxWxC array (or a stack of them) in [0, 1] -> NCHW tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)


def proposals_to_boxes(prop: Proposals, class_id: int | None = None,
                       min_score: float | None = None) -> list[DetectionBox]:
    """Proposals as boxes, optionally only those whose ``class_id`` score is at least ``min_score``.

    ``class_id=-1`` filters on the best foreground score instead.
    """
    probs = prop.probs.detach().cpu().numpy().astype(np.float64)
    probs /= probs.sum(axis=1, keepdims=True)
    rects = np.asarray(prop.rects, dtype=np.float64).reshape(-1, 4)
    keep = (rects[:, 2] - rects[:, 0] > 1e-6) & (rects[:, 3] - rects[:, 1] > 1e-6)
    if min_score is not None:
        sc = probs[:, 1:].max(axis=1) if class_id == -1 else probs[:, class_id]
        keep &= sc >= min_score
    return [DetectionBox(tuple(rects[i]), probs[i], float(np.clip(prop.objectness[i], 0, 1)), proposal=int(i))
            for i in np.flatnonzero(keep)]


def select_target(boxes: Sequence[DetectionBox], config: DetectorConfig) -> list[DetectionBox]:
    """Target-class boxes that pass the confidence threshold, after NMS, best first."""
    c = config.target_class
    cand = [b for b in boxes if b.score(c) >= config.confidence_threshold]
    if not cand:
        return []
    keep = nms(np.array([b.rect for b in cand]), np.array([b.score(c) for b in cand]),
               config.nms_iou_threshold)
    return [cand[i] for i in keep]


def select_all(boxes: Sequence[DetectionBox], config: DetectorConfig) -> list[DetectionBox]:
    """Labelled detections of every foreground class (class-wise NMS), best first."""
    out = []
    for b in boxes:
        label = int(np.argmax(b.class_scores[1:])) + 1
        if b.score(label) >= config.confidence_threshold:
            out.append((label, b))
    kept = []
    for label in sorted({lab for lab, _ in out}):
        group = [b for lab, b in out if lab == label]
        keep = nms(np.array([b.rect for b in group]), np.array([b.score(label) for b in group]),
                   config.nms_iou_threshold)
        kept += [(label, group[i]) for i in keep]
    kept.sort(key=lambda t: -t[1].score(t[0]))
    return [b for _, b in kept]


@torch.no_grad()
def _proposals(model: ToyDetector, images) -> list[Proposals]:
    model.eval()
    return model.propose(to_tensor(images, model_dtype(model)))


def class_score_map(model: ToyDetector, image) -> list[tuple[DetectionBox, float]]:
    """All proposals with their target-class score, before any thresholding."""
    boxes = proposals_to_boxes(_proposals(model, image)[0])
    return [(b, b.score(model.target_class)) for b in boxes]


def detect(model: ToyDetector, image, config: DetectorConfig) -> list[DetectionBox]:
    prop = _proposals(model, image)[0]
    return select_target(proposals_to_boxes(prop, config.target_class, config.confidence_threshold), config)


def detect_all(model: ToyDetector, image, config: DetectorConfig) -> list[DetectionBox]:
    prop = _proposals(model, image)[0]
    return select_all(proposals_to_boxes(prop, -1, config.confidence_threshold), config)


def detect_batch(model: ToyDetector, images, config: DetectorConfig, batch_size: int = 16):
    """Per-image (target detections, all-class detections)."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    out = []
    for start in range(0, len(images), batch_size):
        for prop in _proposals(model, images[start:start + batch_size]):
            boxes = proposals_to_boxes(prop, -1, config.confidence_threshold)
            out.append((select_target(boxes, config), select_all(boxes, config)))
    return out


def aggregate(scores: torch.Tensor, aggregation: Aggregation) -> torch.Tensor:
    if aggregation == "mean":
        return scores.mean()
    if aggregation == "max":
        return scores.max()
    raise ValueError(f"unknown aggregation {aggregation!r}")


def input_gradient(model: ToyDetector, image, box_subset: Sequence[DetectionBox],
                   aggregation: Aggregation = "mean") -> np.ndarray:
    """Gradient of the aggregated target-class score over ``box_subset`` w.r.t. the image.

    Box geometry is held fixed; only the class scores are differentiated.
    """
    if len(box_subset) == 0:
        raise ValueError("box_subset is empty")
    model.eval()
    x = to_tensor(image, model_dtype(model)).requires_grad_(True)
    probs = model.score_boxes(x, [list(box_subset)])[0]
    value = aggregate(probs[:, model.target_class], aggregation)
    if value.requires_grad:
        value.backward()
    if x.grad is None:
        return np.zeros(x.shape[1:]).transpose(1, 2, 0)
    return x.grad[0].permute(1, 2, 0).cpu().numpy().astype(np.float64)
