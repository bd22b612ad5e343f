"""Detection-rate evaluation over split x distance x condition x detector x defense x attack."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np

from .data import DISTANCES, SPLITS, Dataset, frame_box, write_image
from .defenses import DefenseSpec, apply_defense
from .detector.boxes import iou_matrix
from .detector.inference import DetectorConfig, detect_batch
from .detector.models import ToyDetector
from .registration import Frame, TextureMap, ViewMap, composite, estimate_illumination, view_from_vertices

CELL_FIELDS = ("split", "distance", "condition", "detector", "defense", "attack")
CSV_HEADER = CELL_FIELDS + ("detected", "total")
CLEAN = "clean"


@dataclass(frozen=True)
class FrameOutcome:
    split: str
    sequence_id: str
    image: str
    distance: str
    condition: str
    detector: str
    defense: str
    attack: str
    detected: bool
    localized: bool
    mislabeled_as: str | None
    max_score: float
    boxes: tuple = ()

    @property
    def fooled(self) -> bool:
        return not self.detected

    @property
    def cell(self) -> tuple:
        return tuple(getattr(self, f) for f in CELL_FIELDS)


@dataclass
class DetectionRateReport:
    """Per-frame outcomes; every cell count is derived from them."""

    records: list[FrameOutcome] = field(default_factory=list)
    # attack id -> perturbation-size tier, for row labels
    tiers: dict[str, str] = field(default_factory=dict)
    images: dict = field(default_factory=dict, repr=False)

    def cells(self) -> dict[tuple, tuple[int, int]]:
        out: dict[tuple, list[int]] = {}
        for r in self.records:
            c = out.setdefault(r.cell, [0, 0])
            c[0] += int(r.detected)
            c[1] += 1
        return {k: (d, t) for k, (d, t) in out.items()}

    def rate(self, **where) -> float:
        sel = [r for r in self.records if all(getattr(r, k) == v for k, v in where.items())]
        if not sel:
            raise ValueError(f"no records match {where}")
        return sum(r.detected for r in sel) / len(sel)

    def merge(self, other: "DetectionRateReport") -> "DetectionRateReport":
        return DetectionRateReport(self.records + other.records, {**self.tiers, **other.tiers},
                                   {**self.images, **other.images})


def reference_illumination(dataset: Dataset) -> float:
    """Illumination of the first training frame (first frame overall if there is no training split)."""
    seqs = [s for s in dataset.sequences if s.split == "train"] or dataset.sequences
    if not seqs:
        raise ValueError("dataset is empty")
    first = Dataset(dataset.root, dataset.texture, dataset.root_vertices, seqs[:1]).frames()[0]
    return estimate_illumination(first)


def registered_frames(dataset: Dataset, split: str | None = None,
                      reference: float | None = None) -> list[tuple[Frame, ViewMap]]:
    """Frames with view maps from their annotated vertices.

    Illumination is measured on the frame and expressed relative to
    ``reference`` so the reference frame composites the perturbation unscaled.
    """
    frames = dataset.frames(split)
    if not frames:
        return []
    ref = reference_illumination(dataset) if reference is None else reference
    return [(f, view_from_vertices(dataset.root_vertices, f.object_polygon, estimate_illumination(f) / ref))
            for f in frames]


def _mislabel(detections, gt: np.ndarray, target_class: int, classes) -> str | None:
    others = [d for d in detections if d.label != target_class]
    if not others:
        return None
    ov = iou_matrix(np.array([d.rect for d in others]), gt[None])[:, 0]
    best = int(np.argmax(ov))
    return classes[others[best].label] if ov[best] >= 0.5 else None


def evaluate(texture: TextureMap | None, dataset: Dataset, detectors: Mapping[str, ToyDetector],
             defenses: Sequence[DefenseSpec] = (DefenseSpec(),), config: DetectorConfig | None = None,
             splits: Sequence[str] = SPLITS, attack_id: str | None = None, tier: str | None = None,
             keep_images: bool = False, workers: int = 1, batch_size: int = 16) -> DetectionRateReport:
    """Composite (if a texture is given), defend, detect and record every frame.

    The perturbation ``texture - dataset.texture`` is added through each
    frame's view map; ``texture=None`` evaluates the clean frames.
    """
    config = config or DetectorConfig()
    attack_id = attack_id or (CLEAN if texture is None else "attack")
    report = DetectionRateReport(tiers={attack_id: tier or (CLEAN if texture is None else "?")})
    if not dataset.sequences:
        return report
    reference = reference_illumination(dataset)
    for split in splits:
        pairs = registered_frames(dataset, split, reference)
        if not pairs:
            continue
        if texture is None:
            base_images = [f.image for f, _ in pairs]
        else:
            base_images = [composite(f, texture, v, base=dataset.texture.pixels) for f, v in pairs]
        for spec in defenses:
            with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
                images = list(pool.map(lambda im: apply_defense(im, spec), base_images))
            for name, model in detectors.items():
                cfg = DetectorConfig(config.nms_iou_threshold, config.confidence_threshold, model.target_class)
                dets = detect_batch(model, np.stack(images), cfg, batch_size)
                for (frame, _), img, (target, every) in zip(pairs, images, dets):
                    gt = frame_box(frame)
                    localized = bool(target) and iou_matrix(np.array([d.rect for d in target]), gt[None]).max() >= 0.5
                    rec = FrameOutcome(
                        split, frame.sequence_id, frame.metadata.get("image", ""), frame.distance,
                        frame.condition, name, spec.name, attack_id, bool(target), bool(localized),
                        None if target else _mislabel(every, gt, model.target_class, model.classes),
                        max((d.score(model.target_class) for d in target), default=0.0),
                        tuple((model.classes[d.label], tuple(round(float(c), 3) for c in d.rect),
                               round(d.score(d.label), 4)) for d in every))
                    report.records.append(rec)
                    if keep_images:
                        report.images[(name, spec.name, attack_id, frame.sequence_id, rec.image)] = img
    return report


def transfer_evaluate(texture: TextureMap | None, dataset: Dataset, detectors: Mapping[str, ToyDetector],
                      source: str, target: str, **kwargs) -> DetectionRateReport:
    """Evaluate a texture optimized against ``source`` on both ``source`` and ``target``.

    Detector order in the report is source first, so the dual-rate table reads
    "source ; target".
    """
    chosen = {source: detectors[source]}
    chosen[target] = detectors[target]
    return evaluate(texture, dataset, chosen, **kwargs)


# rendering

def write_cells_csv(report: DetectionRateReport, path) -> None:
    """One row per cell: split,distance,condition,detector,defense,attack,detected,total."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for key, (d, t) in sorted(report.cells().items()):
            w.writerow(list(key) + [d, t])


def read_cells_csv(path) -> dict[tuple, tuple[int, int]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
    out = {}
    for row in rows[1:]:
        d, t = int(row[6]), int(row[7])
        if not 0 <= d <= t:
            raise ValueError(f"{path}: bad counts {d}/{t}")
        out[tuple(row[:6])] = (d, t)
    return out


def write_frames_csv(report: DetectionRateReport, path) -> None:
    names = [f.name for f in fields(FrameOutcome) if f.name != "boxes"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in report.records:
            d = asdict(r)
            w.writerow(["" if d[n] is None else d[n] for n in names])


def format_cell(counts: Sequence[tuple[int, int] | None]) -> str:
    """Counts per detector joined as ``a/b ; c/d``; a missing cell reads ``n/a``."""
    return " ; ".join("n/a" if c is None else f"{c[0]}/{c[1]}" for c in counts)


def table_grid(cells: Mapping[tuple, tuple[int, int]], detectors: Sequence[str], defense: str,
               tiers: Mapping[str, str] | None = None) -> list[list[str]]:
    """Rows = condition x attack (labelled by tier), columns = split x distance."""
    tiers = tiers or {}
    columns = [(s, d) for s in SPLITS for d in DISTANCES]
    rows = sorted({(k[2], k[5]) for k in cells if k[4] == defense})
    grid = [["condition", "perturbation"] + [f"{s} {d}" for s, d in columns]]
    for cond, attack in rows:
        label = tiers.get(attack, attack)
        line = [cond, label if label == attack else f"{label} ({attack})"]
        for s, d in columns:
            line.append(format_cell([cells.get((s, d, cond, det, defense, attack)) for det in detectors]))
        grid.append(line)
    return grid


def grid_text(grid: list[list[str]]) -> str:
    widths = [max(len(row[i]) for row in grid) for i in range(len(grid[0]))]
    buf = io.StringIO()
    for row in grid:
        buf.write(" | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n")
    return buf.getvalue()


def annotate(image: np.ndarray, boxes, target: str = "stop_sign") -> np.ndarray:
    """Frame with detections drawn: target class in green, anything else in orange."""
    img = np.ascontiguousarray(np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8))
    for label, (x0, y0, x1, y1), score in boxes:
        color = (40, 200, 40) if label == target else (240, 140, 20)
        cv2.rectangle(img, (int(round(x0)), int(round(y0))), (int(round(x1)), int(round(y1))), color, 1)
        cv2.putText(img, f"{label} {score:.2f}", (int(round(x0)), max(8, int(round(y0)) - 2)),
                    cv2.FONT_HERSHEY_SIMPLEX, 0.3, color, 1, cv2.LINE_AA)
    return img.astype(np.float64) / 255.0


def render_report(report: DetectionRateReport, out_dir, detectors: Sequence[str] | None = None) -> dict:
    """Write cells.csv, frames.csv, one text grid per defense and annotated frames.

    Returns the paths written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = report.cells()
    if detectors is None:
        detectors = list(dict.fromkeys(r.detector for r in report.records))
    paths = {"cells": out / "cells.csv", "frames": out / "frames.csv"}
    write_cells_csv(report, paths["cells"])
    write_frames_csv(report, paths["frames"])
    for defense in dict.fromkeys(r.defense for r in report.records):
        p = out / f"table_{defense}.txt"
        p.write_text(grid_text(table_grid(cells, detectors, defense, report.tiers)))
        paths[f"table_{defense}"] = p
    if report.images:
        ann = out / "annotated"
        by_key = {(r.detector, r.defense, r.attack, r.sequence_id, r.image): r for r in report.records}
        for key, img in report.images.items():
            det, defense, attack, seq, name = key
            p = ann / det / defense / attack / seq / name
            p.parent.mkdir(parents=True, exist_ok=True)
            write_image(p, annotate(img, by_key[key].boxes))
        paths["annotated"] = ann
    return paths


def save_report(report: DetectionRateReport, path) -> None:
    """Per-frame records and tier labels as JSON (images are not stored)."""
    recs = [{**asdict(r), "boxes": [list(b) for b in r.boxes]} for r in report.records]
    Path(path).write_text(json.dumps({"tiers": report.tiers, "records": recs}, indent=0) + "\n")


def load_report(path) -> DetectionRateReport:
    data = json.loads(Path(path).read_text())
    recs = []
    for d in data["records"]:
        d["boxes"] = tuple((b[0], tuple(b[1]), b[2]) for b in d["boxes"])
        recs.append(FrameOutcome(**d))
    return DetectionRateReport(recs, dict(data["tiers"]))
