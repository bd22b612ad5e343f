"""Training of the toy detectors on rendered detection samples."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..data import DetectionSampleSpec, render_detection_samples
from .boxes import iou_matrix
from .inference import DetectorConfig, detect_batch
from .models import BOX_SCALE, DEFAULT_CLASSES, ToyDetector, build_detector, cell_centers, decode_ltrb

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    arch: str = "grid"
    epochs: int = 14
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 1e-4
    seed: int = 0
    min_detection_rate: float = 0.9
    samples: DetectionSampleSpec = field(default_factory=DetectionSampleSpec)


def cell_targets(boxes: np.ndarray, labels: np.ndarray, grid_h: int, grid_w: int):
    """Per-cell class label and edge-distance targets.

    A cell is positive for the smallest ground-truth box containing its center.
    """
    centers = cell_centers(grid_h, grid_w)
    cls = np.zeros(len(centers), dtype=np.int64)
    ltrb = np.ones((len(centers), 4), dtype=np.float64)
    if len(boxes) == 0:
        return cls, ltrb
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    best = np.full(len(centers), np.inf)
    for b, lab, a in zip(boxes, labels, areas):
        x, y = centers[:, 0], centers[:, 1]
        inside = (x > b[0]) & (x < b[2]) & (y > b[1]) & (y < b[3])
        # small boxes may contain no cell center: take the nearest cell
        if not inside.any():
            cx, cy = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
            inside = np.zeros(len(centers), dtype=bool)
            inside[np.argmin((x - cx) ** 2 + (y - cy) ** 2)] = True
        take = inside & (a < best)
        best[take] = a
        cls[take] = lab
        ltrb[take] = np.stack([x - b[0], y - b[1], b[2] - x, b[3] - y], axis=1)[take]
    return cls, np.maximum(ltrb, 1.0)


def _targets(batch_targets, grid_h, grid_w):
    cls, ltrb = zip(*(cell_targets(b, l, grid_h, grid_w) for b, l in batch_targets))
    return torch.as_tensor(np.stack(cls)), torch.as_tensor(np.stack(ltrb), dtype=torch.float32)


def _grid_loss(model, x, batch_targets):
    logits, pred_ltrb = model(x)
    B, C, gh, gw = logits.shape
    cls, ltrb = _targets(batch_targets, gh, gw)
    logits = logits.permute(0, 2, 3, 1).reshape(-1, C)
    pred_ltrb = pred_ltrb.permute(0, 2, 3, 1).reshape(-1, 4)
    cls, ltrb = cls.reshape(-1), ltrb.reshape(-1, 4)
    pos = cls > 0
    n_pos = max(1, int(pos.sum()))
    loss_cls = F.cross_entropy(logits, cls, reduction="sum") / n_pos
    loss_box = torch.tensor(0.0)
    if pos.any():
        loss_box = (torch.log(pred_ltrb[pos] / BOX_SCALE) - torch.log(ltrb[pos] / BOX_SCALE)).abs().mean()
    return loss_cls + loss_box


def _jitter(rng: np.random.Generator, box: np.ndarray, amount: float, n: int) -> np.ndarray:
    w, h = box[2] - box[0], box[3] - box[1]
    d = rng.uniform(-amount, amount, size=(n, 4)) * np.array([w, h, w, h])
    return box + d


def _random_boxes(rng: np.random.Generator, n: int, W: int, H: int) -> np.ndarray:
    wh = rng.uniform(16, 140, size=(n, 2))
    xy = rng.uniform(0, 1, size=(n, 2)) * (np.array([W, H]) - wh)
    return np.c_[xy, xy + wh]


def _two_stage_loss(model, x, batch_targets, rng: np.random.Generator, rois_per_image: int = 16):
    feat, obj_logit, pred_ltrb = model.features(x)
    B, gh, gw = obj_logit.shape
    H, W = x.shape[-2:]
    cls, ltrb = _targets(batch_targets, gh, gw)
    obj_t = (cls > 0).float().reshape(-1)
    obj = obj_logit.reshape(-1)
    pos = obj_t > 0
    n_pos = max(1, int(pos.sum()))
    loss_obj = F.binary_cross_entropy_with_logits(obj, obj_t, reduction="sum") / n_pos
    pl = pred_ltrb.permute(0, 2, 3, 1).reshape(-1, 4)
    loss_box = torch.tensor(0.0)
    if pos.any():
        loss_box = (torch.log(pl[pos] / BOX_SCALE) - torch.log(ltrb.reshape(-1, 4)[pos] / BOX_SCALE)).abs().mean()

    # second stage: jittered ground truth, the model's own proposals, random boxes
    with torch.no_grad():
        obj_np = torch.sigmoid(obj_logit).reshape(B, -1).numpy().astype(np.float64)
        ltrb_np = pred_ltrb.permute(0, 2, 3, 1).reshape(B, -1, 4).numpy().astype(np.float64)
    centers = cell_centers(gh, gw)
    rois, roi_labels = [], []
    for b, (boxes, labels) in enumerate(batch_targets):
        cand = [_random_boxes(rng, 4, W, H)]
        rects = decode_ltrb(ltrb_np[b], centers, W, H)
        cand.append(rects[model._select(obj_np[b], rects)])
        for box in boxes:
            cand.append(_jitter(rng, box, 0.12, 3))
        r = np.concatenate(cand)
        r[:, [0, 2]] = np.clip(r[:, [0, 2]], 0, W)
        r[:, [1, 3]] = np.clip(r[:, [1, 3]], 0, H)
        r = r[(r[:, 2] - r[:, 0] > 2) & (r[:, 3] - r[:, 1] > 2)][:rois_per_image]
        lab = np.zeros(len(r), dtype=np.int64)
        if len(boxes):
            ov = iou_matrix(r, boxes)
            best = ov.argmax(axis=1)
            hit = ov.max(axis=1) >= 0.5
            lab[hit] = labels[best[hit]]
        rois.append(r)
        roi_labels.append(lab)
    logits = torch.cat(model.classify(feat, rois))
    loss_roi = F.cross_entropy(logits, torch.as_tensor(np.concatenate(roi_labels)))
    return loss_obj + loss_box + loss_roi


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def train_toy_detector(images: np.ndarray, targets, arch: str | dict = "grid", seed: int = 0,
                       config: TrainConfig | None = None, classes=DEFAULT_CLASSES,
                       val: tuple | None = None) -> ToyDetector:
    """Train a toy detector on uint8 images with (boxes, labels) targets.

    Deterministic given ``seed``: single-threaded, fixed data order per epoch.
    If ``val`` (images, targets) is given and the final detection rate on it
    is below ``config.min_detection_rate``, :class:`TrainingError` is raised.
    """
    config = config or TrainConfig()
    descriptor = {"arch": arch, "classes": list(classes)} if isinstance(arch, str) else dict(arch)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        seed_everything(seed)
        model = build_detector(descriptor)
        rng = np.random.default_rng(seed)
        opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        n = len(images)
        steps = config.epochs * -(-n // config.batch_size)
        sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=config.lr, total_steps=steps, pct_start=0.15)
        model.train()
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                batch = images[idx].astype(np.float32) / 255.0
                if rng.random() < 0.5:
                    batch = batch[:, :, ::-1]
                    tg = [_flip(targets[i], images.shape[2]) for i in idx]
                else:
                    tg = [targets[i] for i in idx]
                x = torch.as_tensor(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))
                if model.arch == "grid":
                    loss = _grid_loss(model, x, tg)
                else:
                    loss = _two_stage_loss(model, x, tg, rng)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                total += float(loss.detach()) * len(idx)
            if not np.isfinite(total):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            log.info("epoch %d loss %.4f", epoch, total / n)
        model.eval()
    finally:
        torch.set_num_threads(threads)
    if val is not None:
        rate = detection_rate(model, *val, classes.index("stop_sign"))
        if rate < config.min_detection_rate:
            raise TrainingError(f"detector did not converge: detection rate {rate:.3f} "
                                f"< {config.min_detection_rate} after {config.epochs} epochs (final loss {total / n:.4f})")
    return model


def _flip(target, width: int):
    boxes, labels = target
    if len(boxes) == 0:
        return target
    flipped = boxes.copy()
    flipped[:, 0] = width - boxes[:, 2]
    flipped[:, 2] = width - boxes[:, 0]
    return flipped, labels


def detection_rate(model: ToyDetector, images: np.ndarray, targets, target_class: int,
                   config: DetectorConfig | None = None, iou: float = 0.5) -> float:
    """Fraction of images holding the target class that get a matching detection."""
    config = config or DetectorConfig(target_class=target_class)
    hits = total = 0
    for start in range(0, len(images), 32):
        chunk = images[start:start + 32].astype(np.float32) / 255.0
        for (det, _), (boxes, labels) in zip(detect_batch(model, chunk, config), targets[start:start + 32]):
            gt = boxes[labels == target_class]
            if len(gt) == 0:
                continue
            total += 1
            if det and iou_matrix(np.array([d.rect for d in det]), gt).max() >= iou:
                hits += 1
    return hits / max(total, 1)


def train_from_spec(config: TrainConfig, classes=DEFAULT_CLASSES) -> ToyDetector:
    images, targets = render_detection_samples(config.samples, classes)
    return train_toy_detector(images, targets, config.arch, config.seed, config, classes)
