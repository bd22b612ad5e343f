"""Signed-gradient texture attack against a detector's target-class scores."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import cv2
import numpy as np
import torch

from .data import frame_box, write_image
from .detector.boxes import DetectionBox, iou_matrix
from .detector.inference import (DetectorConfig, aggregate, detect_batch, model_dtype,
                                 proposals_to_boxes, select_target, to_tensor)
from .detector.models import Proposals, ToyDetector
from .registration import Frame, TextureMap, ViewMap, WarpOperator, polygon_interior

log = logging.getLogger(__name__)

TERMINATION_REASONS = ("max_iterations", "val_criterion", "stalled")


@dataclass
class AttackConfig:
    epsilon: float = 1 / 255
    lambda_l2: float = 0.0
    aggregation: Literal["mean", "max"] = "mean"
    val_fool_rate: float = 0.9
    max_iterations: int = 2000
    region_mask: np.ndarray | None = None
    seed: int = 0
    # which boxes enter the objective: the detector's thresholded output
    # ("post_nms") or every proposal whose target score exceeds proposal_threshold
    box_source: Literal["post_nms", "pre_nms"] = "post_nms"
    proposal_threshold: float = 0.1
    stall_patience: int = 50
    stall_tolerance: float = 1e-12
    checkpoint_every: int = 0
    batch_size: int = 32
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.lambda_l2 < 0:
            raise ValueError("lambda_l2 must be nonnegative")
        if not 0 < self.val_fool_rate <= 1:
            raise ValueError("val_fool_rate must lie in (0, 1]")
        if self.aggregation not in ("mean", "max"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.box_source not in ("post_nms", "pre_nms"):
            raise ValueError(f"unknown box_source {self.box_source!r}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")
        if self.region_mask is not None:
            self.region_mask = np.asarray(self.region_mask, dtype=bool)

    def to_json(self) -> dict:
        d = asdict(self)
        d["region_mask"] = None if self.region_mask is None else int(self.region_mask.sum())
        return d


@dataclass
class StepRecord:
    iteration: int
    objective: float
    detection_term: float
    l2_distance: float
    active_frames: int
    val_fool_rate: float | None
    val_mislabel_rate: float | None


@dataclass
class AttackResult:
    final_texture: TextureMap
    history: list[StepRecord]
    termination_reason: str
    config: AttackConfig

    base: np.ndarray | None = None

    @property
    def perturbation(self) -> np.ndarray:
        return self.final_texture.pixels - self.base


@dataclass
class View:
    """A registered frame: image, view map and its precomputed warp."""

    frame: Frame
    view: ViewMap
    warp: WarpOperator

    @classmethod
    def build(cls, frame: Frame, view: ViewMap, texture_mask: np.ndarray) -> "View":
        return cls(frame, view, WarpOperator(view.homography, texture_mask, frame.image.shape))

    def render(self, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Composited frame and the unclipped values at the warped-region pixels."""
        img = self.frame.image
        r = self.warp.region
        raw = img[r] + self.view.illumination * self.warp.apply_region(delta)
        out = img.copy()
        out[r] = np.clip(raw, 0.0, 1.0)
        return out, raw


def descent_direction(texture_gradient: np.ndarray) -> np.ndarray:
    return np.sign(texture_gradient)


def step(texture: TextureMap, direction: np.ndarray, config: AttackConfig) -> TextureMap:
    """Move every editable texel one epsilon against ``direction``, then clip to [0, 1]."""
    editable = texture.mask if config.region_mask is None else texture.mask & config.region_mask
    new = texture.pixels.copy()
    new[editable] -= config.epsilon * direction[editable]
    return texture.replace(np.clip(new, 0.0, 1.0))


def l2_penalty(texture: np.ndarray, base: np.ndarray, mask: np.ndarray) -> float:
    d = (texture - base)[mask]
    return float((d * d).sum())


def _select(prop: Proposals, config: AttackConfig, target_class: int) -> list[DetectionBox]:
    if config.box_source == "post_nms":
        return select_target(proposals_to_boxes(prop, target_class, config.detector.confidence_threshold),
                             config.detector)
    return proposals_to_boxes(prop, target_class, config.proposal_threshold)


def _clip_chain(frame_grad: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Chain rule through clip([0, 1]) for a descent step.

    At a saturated pixel the gradient passes only if descending would move
    the value back inside the range.
    """
    inside = (raw > 0) & (raw < 1)
    leave_low = (raw <= 0) & (frame_grad < 0)
    leave_high = (raw >= 1) & (frame_grad > 0)
    return np.where(inside | leave_low | leave_high, frame_grad, 0.0)


def frame_terms(texture: TextureMap, base: np.ndarray, views: Sequence[View], model: ToyDetector,
                config: AttackConfig, boxes: Sequence[Sequence[DetectionBox]] | None = None,
                with_gradient: bool = True):
    """Per-frame aggregated scores and root-coordinate gradients.

    If ``boxes`` is given the box set is frozen to it (used by gradient
    checks); otherwise it is recomputed from the current composites.
    Returns (scores, texture gradients, selected boxes).
    """
    delta = texture.pixels - base
    dtype = model_dtype(model)
    model.eval()
    scores = np.zeros(len(views))
    grads = [None] * len(views)
    selected: list = [None] * len(views)
    for start in range(0, len(views), config.batch_size):
        chunk = views[start:start + config.batch_size]
        rendered = [v.render(delta) for v in chunk]
        x = to_tensor(np.stack([img for img, _ in rendered]), dtype).requires_grad_(with_gradient)
        with torch.set_grad_enabled(with_gradient):
            if boxes is None:
                props = model.propose(x)
                chosen = [_select(p, config, model.target_class) for p in props]
                probs = [p.probs[[b.proposal for b in bx]] if bx else None for p, bx in zip(props, chosen)]
            else:
                chosen = [list(b) for b in boxes[start:start + config.batch_size]]
                nonempty = [i for i, bx in enumerate(chosen) if bx]
                scored = model.score_boxes(x[nonempty], [chosen[i] for i in nonempty]) if nonempty else []
                probs = [None] * len(chosen)
                for i, p in zip(nonempty, scored):
                    probs[i] = p
            total = 0
            for k, (bx, p) in enumerate(zip(chosen, probs)):
                selected[start + k] = bx
                if bx:
                    s = aggregate(p[:, model.target_class], config.aggregation)
                    scores[start + k] = float(s.detach())
                    total = total + s
        if with_gradient:
            if torch.is_tensor(total) and total.requires_grad:
                total.backward()
            if x.grad is not None:
                g_img = x.grad.permute(0, 2, 3, 1).cpu().numpy().astype(np.float64)
            else:
                g_img = np.zeros((len(chunk),) + chunk[0].frame.image.shape)
            for k, (v, (_, raw)) in enumerate(zip(chunk, rendered)):
                if not selected[start + k]:
                    grads[start + k] = np.zeros_like(texture.pixels)
                    continue
                g = _clip_chain(g_img[k][v.warp.region], raw)
                gt = v.view.illumination * v.warp.adjoint_region(g)
                gt[~texture.mask] = 0.0
                grads[start + k] = gt
    return scores, grads, selected


def objective(texture: TextureMap, base: np.ndarray, views: Sequence[View], model: ToyDetector,
              config: AttackConfig, boxes=None) -> float:
    """Mean over frames of the aggregated target score, plus the L2 penalty."""
    scores, _, _ = frame_terms(texture, base, views, model, config, boxes, with_gradient=False)
    return float(scores.mean()) + config.lambda_l2 * l2_penalty(texture.pixels, base, texture.mask)


def penalty_preset(texture: TextureMap, views: Sequence[View], model: ToyDetector, config: AttackConfig,
                   reference_linf: float = 8 / 255) -> float:
    """A lambda_l2 that puts the penalty on the scale of the detection term.

    The penalty is zero at T0 itself, so the two terms are matched at a
    reference perturbation of ``reference_linf`` on every masked channel:
    ``lambda * ||delta_ref||^2 == detection term at T0``.
    """
    cfg = AttackConfig(**{**_shallow(config), "lambda_l2": 0.0})
    det = objective(texture, texture.pixels, views, model, cfg)
    size = int(texture.mask.sum()) * texture.pixels.shape[2]
    return det / (size * reference_linf**2)


def objective_gradient(texture: TextureMap, base: np.ndarray, views: Sequence[View], model: ToyDetector,
                       config: AttackConfig, boxes=None):
    """(objective value, gradient w.r.t. the texture, selected boxes, detection term)."""
    scores, grads, selected = frame_terms(texture, base, views, model, config, boxes)
    det = float(scores.mean())
    total = np.zeros_like(texture.pixels)
    for g in grads:
        total += g
    total /= len(grads)
    total += 2 * config.lambda_l2 * np.where(texture.mask[..., None], texture.pixels - base, 0.0)
    value = det + config.lambda_l2 * l2_penalty(texture.pixels, base, texture.mask)
    return value, total, selected, det


def fool_statistics(texture: TextureMap, base: np.ndarray, views: Sequence[View], model: ToyDetector,
                    config: AttackConfig) -> tuple[float, float]:
    """(fraction of frames with no target detection, fraction of those relabelled as another class)."""
    if not views:
        return 0.0, 0.0
    delta = texture.pixels - base
    images = np.stack([v.render(delta)[0] for v in views])
    fooled = mislabeled = 0
    for v, (target, every) in zip(views, detect_batch(model, images, config.detector, config.batch_size)):
        if target:
            continue
        fooled += 1
        if _mislabel(every, v.frame, config.detector.target_class) is not None:
            mislabeled += 1
    return fooled / len(views), mislabeled / len(views)


def _mislabel(detections, frame: Frame, target_class: int):
    others = [d for d in detections if d.label != target_class]
    if not others:
        return None
    ov = iou_matrix(np.array([d.rect for d in others]), frame_box(frame)[None])[:, 0]
    best = int(np.argmax(ov))
    return others[best].label if ov[best] >= 0.5 else None


def run_attack(train: Sequence[tuple[Frame, ViewMap]], val: Sequence[tuple[Frame, ViewMap]],
               model: ToyDetector, initial: TextureMap, config: AttackConfig,
               run_dir=None) -> AttackResult:
    """Minimize the mean target-class score over the training frames.

    Each iteration recomputes the box sets, backprojects the per-frame image
    gradients into root coordinates, averages them in frame order, adds the
    penalty gradient and takes one signed step. Stops when the validation
    fool rate exceeds ``config.val_fool_rate``, after ``max_iterations``, or
    when the objective has not moved for ``stall_patience`` steps.
    """
    if not train:
        raise ValueError("training set is empty")
    if config.region_mask is not None and np.any(config.region_mask & ~initial.mask):
        raise ValueError("region_mask must lie inside the texture mask")
    torch.manual_seed(config.seed)
    base = initial.pixels.copy()
    train_views = [View.build(f, v, initial.mask) for f, v in train]
    val_views = [View.build(f, v, initial.mask) for f, v in val]
    writer = _RunWriter(run_dir, config) if run_dir is not None else None

    texture = initial
    history: list[StepRecord] = []
    reason = "max_iterations"
    last, flat = None, 0
    for n in range(config.max_iterations):
        value, grad, selected, det = objective_gradient(texture, base, train_views, model, config)
        texture = step(texture, descent_direction(grad), config)
        fool, mis = fool_statistics(texture, base, val_views, model, config) if val_views else (None, None)
        rec = StepRecord(n, value, det, l2_penalty(texture.pixels, base, initial.mask),
                         sum(1 for s in selected if s), fool, mis)
        history.append(rec)
        if writer:
            writer.log(rec, texture, n)
        log.debug("iter %d objective %.5f active %d fool %s", n, value, rec.active_frames, fool)
        if fool is not None and fool > config.val_fool_rate:
            reason = "val_criterion"
            break
        if last is not None and abs(value - last) <= config.stall_tolerance:
            flat += 1
            if flat >= config.stall_patience:
                reason = "stalled"
                break
        else:
            flat = 0
        last = value
    result = AttackResult(texture, history, reason, config, base=base)
    if writer:
        writer.finish(result)
    return result


class _RunWriter:
    """Run directory: config.json, history.jsonl, texture.png/.npy, checkpoints/."""

    def __init__(self, run_dir, config: AttackConfig):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.every = config.checkpoint_every
        (self.dir / "attack_config.json").write_text(json.dumps(config.to_json(), indent=1) + "\n")
        self.history = open(self.dir / "history.jsonl", "w")

    def log(self, rec: StepRecord, texture: TextureMap, n: int):
        self.history.write(json.dumps(asdict(rec)) + "\n")
        self.history.flush()
        if self.every and (n + 1) % self.every == 0:
            ck = self.dir / "checkpoints"
            ck.mkdir(exist_ok=True)
            np.save(ck / f"texture_{n + 1:05d}.npy", texture.pixels)
            write_image(ck / f"texture_{n + 1:05d}.png", texture.pixels)

    def finish(self, result: AttackResult):
        self.history.close()
        np.save(self.dir / "texture.npy", result.final_texture.pixels)
        np.save(self.dir / "texture_mask.npy", result.final_texture.mask)
        write_image(self.dir / "texture.png", result.final_texture.pixels)
        (self.dir / "result.json").write_text(json.dumps({
            "termination_reason": result.termination_reason,
            "iterations": len(result.history),
            "linf": float(np.abs(result.perturbation).max()),
        }, indent=1) + "\n")


def identity_view() -> ViewMap:
    return ViewMap(np.eye(3), 1.0)


def object_region(frame: Frame) -> np.ndarray:
    h, w = frame.image.shape[:2]
    m = np.zeros((h, w), dtype=np.uint8)
    cv2.fillPoly(m, [np.round(frame.object_polygon).astype(np.int32)], 1)
    return m.astype(bool) | polygon_interior(frame.object_polygon, (h, w))


def single_image_attack(frame: Frame, model: ToyDetector, config: AttackConfig,
                        region: Literal["image", "object"] = "image") -> tuple[np.ndarray, AttackResult]:
    """Attack one frame directly in image coordinates.

    The frame itself is the texture (identity view) and also the validation
    set, so the run stops as soon as the target detection disappears.
    """
    h, w = frame.image.shape[:2]
    mask = np.ones((h, w), dtype=bool) if region == "image" else object_region(frame)
    texture = TextureMap(frame.image, mask)
    cfg = AttackConfig(**{**_shallow(config), "region_mask": None})
    result = run_attack([(frame, identity_view())], [(frame, identity_view())], model, texture, cfg)
    return result.final_texture.pixels, result


def _shallow(config: AttackConfig) -> dict:
    return {f: getattr(config, f) for f in config.__dataclass_fields__}


def rectangular_region(texture_mask: np.ndarray, rect: tuple[int, int, int, int]) -> np.ndarray:
    """Editable region restricted to root-coordinate rectangle ``(x0, y0, x1, y1)``."""
    x0, y0, x1, y1 = rect
    region = np.zeros_like(texture_mask, dtype=bool)
    region[y0:y1, x0:x1] = True
    return region & texture_mask


def perturbation_tier(delta: np.ndarray, mask: np.ndarray) -> str:
    """Coarse size label from the RMS perturbation over the object: S, L or EL."""
    rms = float(np.sqrt(np.mean(delta[mask] ** 2))) if mask.any() else 0.0
    if rms < 8 / 255:
        return "S"
    if rms < 48 / 255:
        return "L"
    return "EL"
