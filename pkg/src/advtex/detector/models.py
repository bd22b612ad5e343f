"""Two small, architecturally distinct detectors.

``GridDetector`` predicts class probabilities and a box for every cell of a
fixed stride-16 grid (one-stage). ``TwoStageDetector`` scores class-agnostic
proposals on a grid, keeps the best few and classifies each one from
RoI-aligned features (two-stage).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align

from .boxes import nms

DEFAULT_CLASSES = ("background", "stop_sign", "kite", "disc")
STRIDE = 16
BOX_SCALE = 32.0


@dataclass
class Proposals:
    """Per-image proposals; ``probs`` stays attached to the autograd graph."""

    rects: np.ndarray
    probs: torch.Tensor
    objectness: np.ndarray


def cell_centers(grid_h: int, grid_w: int, stride: int = STRIDE) -> np.ndarray:
    ys, xs = np.mgrid[0:grid_h, 0:grid_w]
    return np.stack([(xs.ravel() + 0.5) * stride, (ys.ravel() + 0.5) * stride], axis=1)


def decode_ltrb(ltrb: np.ndarray, centers: np.ndarray, width: int, height: int) -> np.ndarray:
    """Turn per-cell edge distances into clipped rectangles."""
    x0 = np.clip(centers[:, 0] - ltrb[:, 0], 0, width)
    y0 = np.clip(centers[:, 1] - ltrb[:, 1], 0, height)
    x1 = np.clip(centers[:, 0] + ltrb[:, 2], 0, width)
    y1 = np.clip(centers[:, 1] + ltrb[:, 3], 0, height)
    return np.stack([x0, y0, x1, y1], axis=1)


def _ltrb(raw: torch.Tensor) -> torch.Tensor:
    return torch.exp(raw.clamp(-4.0, 4.0)) * BOX_SCALE


class ToyDetector(nn.Module):
    arch = "base"

    def __init__(self, classes: Sequence[str] = DEFAULT_CLASSES, target_class: int = 1):
        super().__init__()
        self.classes = tuple(classes)
        self.target_class = int(target_class)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def descriptor(self) -> dict:
        return {"arch": self.arch, "classes": list(self.classes), "target_class": self.target_class}

    def propose(self, x: torch.Tensor) -> list[Proposals]:
        raise NotImplementedError

    def score_boxes(self, x: torch.Tensor, boxes: Sequence[Sequence]) -> list[torch.Tensor]:
        raise NotImplementedError


class GridDetector(ToyDetector):
    arch = "grid"

    def __init__(self, classes: Sequence[str] = DEFAULT_CLASSES, target_class: int = 1,
                 channels: Sequence[int] = (16, 32, 48, 64)):
        super().__init__(classes, target_class)
        c0, c1, c2, c3 = channels
        self.channels = tuple(channels)
        self.backbone = nn.Sequential(
            nn.Conv2d(3, c0, 4, stride=4), nn.ReLU(),
            nn.Conv2d(c0, c1, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c3, c3, 3, padding=2, dilation=2), nn.ReLU(),
        )
        self.head = nn.Conv2d(c3, self.num_classes + 4, 1)

    def descriptor(self) -> dict:
        return {**super().descriptor(), "channels": list(self.channels)}

    def forward(self, x: torch.Tensor):
        out = self.head(self.backbone(x - 0.5))
        logits = out[:, : self.num_classes]
        ltrb = _ltrb(out[:, self.num_classes:])
        return logits, ltrb

    def propose(self, x: torch.Tensor) -> list[Proposals]:
        logits, ltrb = self(x)
        B, C, gh, gw = logits.shape
        probs = F.softmax(logits, dim=1).permute(0, 2, 3, 1).reshape(B, gh * gw, C)
        ltrb_np = ltrb.detach().permute(0, 2, 3, 1).reshape(B, gh * gw, 4).cpu().numpy().astype(np.float64)
        centers = cell_centers(gh, gw)
        H, W = x.shape[-2:]
        result = []
        for b in range(B):
            p = probs[b]
            result.append(Proposals(
                rects=decode_ltrb(ltrb_np[b], centers, W, H),
                probs=p,
                objectness=1.0 - p[:, 0].detach().cpu().numpy().astype(np.float64),
            ))
        return result

    def score_boxes(self, x, boxes):
        logits, _ = self(x)
        B, C, gh, gw = logits.shape
        probs = F.softmax(logits, dim=1).permute(0, 2, 3, 1).reshape(B, gh * gw, C)
        out = []
        for b, bx in enumerate(boxes):
            idx = torch.as_tensor([box.proposal for box in bx], dtype=torch.long)
            out.append(probs[b, idx])
        return out


class TwoStageDetector(ToyDetector):
    arch = "two_stage"

    def __init__(self, classes: Sequence[str] = DEFAULT_CLASSES, target_class: int = 1,
                 channels: Sequence[int] = (12, 24, 40, 48), pre_nms_top: int = 32,
                 post_nms_top: int = 8, proposal_nms: float = 0.6, roi_size: int = 7):
        super().__init__(classes, target_class)
        c0, c1, c2, c3 = channels
        self.channels = tuple(channels)
        self.pre_nms_top = pre_nms_top
        self.post_nms_top = post_nms_top
        self.proposal_nms = proposal_nms
        self.roi_size = roi_size
        self.stem = nn.Sequential(
            nn.Conv2d(3, c0, 5, stride=4, padding=2), nn.ReLU(),
            nn.Conv2d(c0, c1, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(),
        )
        self.rpn = nn.Sequential(
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c3, c3, 3, padding=2, dilation=2), nn.ReLU(),
            nn.Conv2d(c3, 5, 1),
        )
        self.roi_head = nn.Sequential(
            nn.Conv2d(c2, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Flatten(),
            nn.Linear(32 * ((roi_size + 1) // 2) ** 2, 64), nn.ReLU(),
            nn.Linear(64, self.num_classes),
        )

    def descriptor(self) -> dict:
        return {**super().descriptor(), "channels": list(self.channels),
                "pre_nms_top": self.pre_nms_top, "post_nms_top": self.post_nms_top,
                "proposal_nms": self.proposal_nms, "roi_size": self.roi_size}

    def features(self, x):
        feat = self.stem(x - 0.5)
        rpn = self.rpn(feat)
        return feat, rpn[:, 0], _ltrb(rpn[:, 1:])

    def classify(self, feat: torch.Tensor, rois: Sequence[np.ndarray]) -> list[torch.Tensor]:
        """Class logits for fixed rectangles; gradients reach only the features."""
        boxes = [torch.as_tensor(np.asarray(r, dtype=np.float64).reshape(-1, 4), dtype=feat.dtype) for r in rois]
        counts = [len(b) for b in boxes]
        if sum(counts) == 0:
            return [feat.new_zeros((0, self.num_classes)) for _ in rois]
        pooled = roi_align(feat, boxes, output_size=self.roi_size, spatial_scale=1.0 / 8,
                           sampling_ratio=2, aligned=True)
        logits = self.roi_head(pooled)
        return list(torch.split(logits, counts))

    def _select(self, obj: np.ndarray, rects: np.ndarray) -> np.ndarray:
        top = np.argsort(-obj, kind="stable")[: self.pre_nms_top]
        keep = nms(rects[top], obj[top], self.proposal_nms)[: self.post_nms_top]
        return top[keep]

    def propose(self, x):
        feat, obj_logit, ltrb = self.features(x)
        B, gh, gw = obj_logit.shape
        H, W = x.shape[-2:]
        centers = cell_centers(gh, gw)
        obj = torch.sigmoid(obj_logit).detach().reshape(B, -1).cpu().numpy().astype(np.float64)
        ltrb_np = ltrb.detach().permute(0, 2, 3, 1).reshape(B, -1, 4).cpu().numpy().astype(np.float64)
        rois, objs = [], []
        for b in range(B):
            rects = decode_ltrb(ltrb_np[b], centers, W, H)
            sel = self._select(obj[b], rects)
            rois.append(rects[sel])
            objs.append(obj[b, sel])
        logits = self.classify(feat, rois)
        return [Proposals(rects=r, probs=F.softmax(lg, dim=1), objectness=o)
                for r, lg, o in zip(rois, logits, objs)]

    def score_boxes(self, x, boxes):
        feat, _, _ = self.features(x)
        rois = [np.array([box.rect for box in bx]).reshape(-1, 4) for bx in boxes]
        return [F.softmax(lg, dim=1) for lg in self.classify(feat, rois)]


ARCHITECTURES = {"grid": GridDetector, "two_stage": TwoStageDetector}


def build_detector(descriptor: dict) -> ToyDetector:
    kwargs = dict(descriptor)
    arch = kwargs.pop("arch")
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    return ARCHITECTURES[arch](**kwargs)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
