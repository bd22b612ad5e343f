"""On-disk dataset format and the synthetic sequence generator.

Layout::

    <root>/dataset.json          root texture, its mask and the 8 root vertices
    <root>/texture.png
    <root>/texture_mask.png
    <root>/splits.json           {"splits": {sequence_id: "train" | "val" | "test"}}
    <root>/<sequence_id>/manifest.json
    <root>/<sequence_id>/frame_0000.png ...

``manifest.json`` lists, per frame, the image file name, the 8 object
vertices in frame pixel coordinates (ordered like the root vertices), the
distance tag and the condition tag. Synthetic frames also record the
generating homography and illumination. Images are 8-bit RGB; floats in
[0, 1] are quantized with ``rint(255 * v)`` (round half to even).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .registration import Frame, TextureMap, ViewMap, apply_homography, composite
from .scene import background_pool, draw_distractor, octagon_vertices, stop_sign_texture

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
DISTANCES = ("far", "medium", "near")
N_VERTICES = 8


class ManifestError(ValueError):
    pass


def write_image(path, image: np.ndarray):
    arr = np.asarray(image, dtype=np.float64)
    q = np.rint(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    if q.ndim == 3 and q.shape[2] == 3:
        q = cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
    elif q.ndim == 3:
        q = q[..., 0]
    if not cv2.imwrite(str(path), q):
        raise OSError(f"could not write {path}")


def read_image(path) -> np.ndarray:
    q = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if q is None:
        raise OSError(f"could not read {path}")
    if q.ndim == 3:
        q = cv2.cvtColor(q, cv2.COLOR_BGR2RGB)
    else:
        q = q[..., None]
    return q.astype(np.float64) / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0, 1) * 255) / 255.0


@dataclass(frozen=True)
class FrameRecord:
    image: str
    vertices: tuple[tuple[float, float], ...]
    distance: str
    condition: str
    homography: tuple[tuple[float, ...], ...] | None = None
    illumination: float | None = None

    def to_json(self) -> dict:
        d = {"image": self.image, "vertices": [list(v) for v in self.vertices],
             "distance": self.distance, "condition": self.condition}
        if self.homography is not None:
            d["homography"] = [list(r) for r in self.homography]
        if self.illumination is not None:
            d["illumination"] = self.illumination
        return d


@dataclass(frozen=True)
class SequenceManifest:
    sequence_id: str
    frames: tuple[FrameRecord, ...]
    split: str | None = None

    @property
    def condition(self) -> str:
        return self.frames[0].condition if self.frames else ""


@dataclass
class SyntheticSceneSpec:
    n_sequences: int = 22
    frames_per_sequence: int = 5
    frame_width: int = 320
    frame_height: int = 240
    texture_size: int = 128
    # frame pixels per texel, per distance band
    scale_bands: dict = field(default_factory=lambda: {
        "far": (0.22, 0.32), "medium": (0.42, 0.56), "near": (0.72, 0.92)})
    max_rotation_deg: float = 8.0
    perspective_jitter: float = 0.15
    illumination_range: tuple[float, float] = (0.7, 1.15)
    backgrounds_per_condition: int = 6
    conditions: tuple[str, ...] = ("tree", "sky")
    split_ratios: tuple[float, float, float] = (12 / 22, 5 / 22, 5 / 22)
    seed: int = 0

    def __post_init__(self):
        bands = [tuple(self.scale_bands[d]) for d in DISTANCES]
        for (lo, hi) in bands:
            if not 0 < lo < hi:
                raise ValueError(f"bad scale band {(lo, hi)}")
        for (_, hi), (lo, _) in zip(bands, bands[1:]):
            if not hi < lo:
                raise ValueError("scale bands must be disjoint and ordered far < medium < near")
        lo, hi = self.illumination_range
        if not (0 < lo <= hi <= 2):
            raise ValueError("illumination range must lie in (0, 2]")


@dataclass
class Dataset:
    root: Path
    texture: TextureMap
    root_vertices: np.ndarray
    sequences: list[SequenceManifest]

    def frames(self, split: str | None = None) -> list[Frame]:
        out = []
        for seq in self.sequences:
            if split is not None and seq.split != split:
                continue
            out += [load_frame(self.root, seq, rec) for rec in seq.frames]
        return out


def distance_tags(n: int) -> list[str]:
    return [DISTANCES[min(2, k * 3 // n)] for k in range(n)]


def sample_homography(rng: np.random.Generator, spec: SyntheticSceneSpec, distance: str,
                      center: Sequence[float] | None = None) -> np.ndarray:
    c = (spec.texture_size - 1) / 2.0
    s = rng.uniform(*spec.scale_bands[distance])
    ang = np.deg2rad(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
    p = rng.uniform(-spec.perspective_jitter, spec.perspective_jitter, size=2) / spec.texture_size
    if center is None:
        half = s * spec.texture_size / 2 + 4
        center = rng.uniform([half, half], [spec.frame_width - half, spec.frame_height - half])
    to_origin = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
    persp = np.array([[1, 0, 0], [0, 1, 0], [p[0], p[1], 1.0]])
    rs = np.array([[s * np.cos(ang), -s * np.sin(ang), 0], [s * np.sin(ang), s * np.cos(ang), 0], [0, 0, 1.0]])
    to_frame = np.array([[1, 0, center[0]], [0, 1, center[1]], [0, 0, 1.0]])
    H = to_frame @ rs @ persp @ to_origin
    return H / H[2, 2]


def _sequence_centers(rng, spec: SyntheticSceneSpec, n: int) -> np.ndarray:
    # the sign drifts across the frame as the camera approaches
    half = spec.scale_bands["near"][1] * spec.texture_size / 2 + 4
    lo = np.array([half, half])
    hi = np.array([spec.frame_width - half, spec.frame_height - half])
    a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
    t = np.linspace(0, 1, n)[:, None]
    return a * (1 - t) + b * t


def default_texture(spec: SyntheticSceneSpec) -> tuple[TextureMap, np.ndarray]:
    tex = stop_sign_texture(spec.texture_size)
    return TextureMap(quantize(tex.pixels), tex.mask), octagon_vertices(spec.texture_size)


def render_frame(background: np.ndarray, texture: TextureMap, root_vertices: np.ndarray, H: np.ndarray,
                 illumination: float, name: str, distance: str, condition: str) -> tuple[np.ndarray, FrameRecord]:
    """The quantized frame and its annotation, with vertices the images of ``root_vertices`` under ``H``."""
    img = quantize(composite(background, texture, ViewMap(H, illumination)))
    verts = apply_homography(H, root_vertices)
    rec = FrameRecord(
        image=name,
        vertices=tuple((float(x), float(y)) for x, y in verts),
        distance=distance, condition=condition,
        homography=tuple(tuple(float(v) for v in row) for row in H),
        illumination=float(illumination),
    )
    return img, rec


def render_sequences(spec: SyntheticSceneSpec):
    """In-memory generation: yields (sequence_id, condition, [(image, FrameRecord)])."""
    rng = np.random.default_rng(spec.seed)
    texture, root_vertices = default_texture(spec)
    pool = background_pool(rng, spec.backgrounds_per_condition, spec.frame_width, spec.frame_height)
    by_cond = {c: [img for cond, img in pool if cond == c] for c in spec.conditions}
    for k in range(spec.n_sequences):
        cond = spec.conditions[k % len(spec.conditions)]
        bg = by_cond[cond][rng.integers(len(by_cond[cond]))]
        base_illum = rng.uniform(*spec.illumination_range)
        centers = _sequence_centers(rng, spec, spec.frames_per_sequence)
        frames = []
        for j, dist in enumerate(distance_tags(spec.frames_per_sequence)):
            H = sample_homography(rng, spec, dist, centers[j])
            lo, hi = spec.illumination_range
            illum = float(np.clip(base_illum * rng.uniform(0.95, 1.05), lo, hi))
            frames.append(render_frame(bg, texture, root_vertices, H, illum, f"frame_{j:04d}.png", dist, cond))
        yield f"seq_{k:03d}", cond, frames


def generate_synthetic(spec: SyntheticSceneSpec, root) -> Dataset:
    """Render the synthetic sequences, assign splits and write everything under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    texture, root_vertices = default_texture(spec)
    manifests = []
    for seq_id, _, frames in render_sequences(spec):
        d = root / seq_id
        d.mkdir(exist_ok=True)
        for img, rec in frames:
            write_image(d / rec.image, img)
        manifests.append(SequenceManifest(seq_id, tuple(rec for _, rec in frames)))
    splits = split_dataset(manifests, spec.split_ratios, spec.seed)
    manifests = [SequenceManifest(m.sequence_id, m.frames, splits[m.sequence_id]) for m in manifests]
    for m in manifests:
        write_manifest(root / m.sequence_id / "manifest.json", m)
    write_image(root / "texture.png", texture.pixels)
    write_image(root / "texture_mask.png", texture.mask[..., None].astype(np.float64))
    _dump(root / "dataset.json", {
        "format_version": FORMAT_VERSION, "texture": "texture.png", "texture_mask": "texture_mask.png",
        "root_vertices": root_vertices.tolist(), "target_class": "stop_sign"})
    _dump(root / "splits.json", {"format_version": FORMAT_VERSION, "splits": splits})
    return Dataset(root, texture, root_vertices, manifests)


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1) + "\n")


def write_manifest(path, manifest: SequenceManifest):
    _dump(Path(path), {"format_version": FORMAT_VERSION, "sequence_id": manifest.sequence_id,
                       "frames": [r.to_json() for r in manifest.frames]})


def _parse_frame(path: Path, d: dict, n_vertices: int) -> FrameRecord:
    try:
        verts = d["vertices"]
        if len(verts) != n_vertices or any(len(v) != 2 for v in verts):
            raise ManifestError(f"{path}: frame {d.get('image')!r} has {len(verts)} vertices, "
                                f"expected {n_vertices}")
        if d["distance"] not in DISTANCES:
            raise ManifestError(f"{path}: unknown distance tag {d['distance']!r}")
        H = d.get("homography")
        return FrameRecord(
            image=str(d["image"]),
            vertices=tuple((float(x), float(y)) for x, y in verts),
            distance=d["distance"],
            condition=str(d["condition"]),
            homography=None if H is None else tuple(tuple(float(v) for v in r) for r in H),
            illumination=None if d.get("illumination") is None else float(d["illumination"]),
        )
    except KeyError as e:
        raise ManifestError(f"{path}: missing field {e}") from None


def read_manifest(path, n_vertices: int = N_VERTICES, split: str | None = None) -> SequenceManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: {e}") from None
    if "sequence_id" not in d or "frames" not in d:
        raise ManifestError(f"{path}: missing sequence_id or frames")
    frames = tuple(_parse_frame(path, f, n_vertices) for f in d["frames"])
    for rec in frames:
        if not (path.parent / rec.image).is_file():
            raise ManifestError(f"{path}: frame file {rec.image!r} does not exist")
    return SequenceManifest(str(d["sequence_id"]), frames, split)


def load_dataset(root) -> list[SequenceManifest]:
    """Validated manifests of every sequence directory under ``root``."""
    root = Path(root)
    splits = {}
    if (root / "splits.json").is_file():
        splits = json.loads((root / "splits.json").read_text()).get("splits", {})
        for sid, s in splits.items():
            if s not in SPLITS:
                raise ManifestError(f"{root / 'splits.json'}: sequence {sid!r} has invalid split {s!r}")
    out = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        mpath = d / "manifest.json"
        if not mpath.is_file():
            continue
        out.append(read_manifest(mpath, split=splits.get(d.name)))
    return out


def open_dataset(root) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "dataset.json").read_text())
    pixels = read_image(root / meta["texture"])
    mask = read_image(root / meta["texture_mask"])[..., 0] > 0.5
    return Dataset(root, TextureMap(pixels, mask), np.asarray(meta["root_vertices"], dtype=np.float64),
                   load_dataset(root))


def load_frame(root, seq: SequenceManifest, rec: FrameRecord) -> Frame:
    image = read_image(Path(root) / seq.sequence_id / rec.image)
    return Frame(image, np.asarray(rec.vertices), sequence_id=seq.sequence_id, split=seq.split or "",
                 distance=rec.distance, condition=rec.condition,
                 metadata={"image": rec.image, "homography": rec.homography,
                           "illumination": rec.illumination})


def split_dataset(manifests: Sequence[SequenceManifest], ratios=(12 / 22, 5 / 22, 5 / 22),
                  seed: int = 0) -> dict[str, str]:
    """Sequence-level train/val/test assignment with largest-remainder rounding."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != 3 or np.any(ratios < 0) or abs(ratios.sum() - 1) > 1e-9:
        raise ValueError("ratios must be three nonnegative numbers summing to 1")
    ids = sorted(m.sequence_id for m in manifests)
    n = len(ids)
    raw = ratios * n
    counts = np.floor(raw + 1e-9).astype(int)
    frac = raw - counts
    for i in np.argsort(-frac, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    out, start = {}, 0
    for split, c in zip(SPLITS, counts):
        for i in order[start:start + c]:
            out[ids[i]] = split
        start += c
    return out


# --- detector training samples -------------------------------------------------

@dataclass
class DetectionSampleSpec:
    n_images: int = 600
    p_sign: float = 0.8
    max_distractors: int = 2
    p_empty: float = 0.08
    noise_std: float = 0.01
    seed: int = 1000
    scene: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)


def _bbox(poly: np.ndarray, w: int, h: int) -> np.ndarray:
    x0, y0 = poly.min(axis=0)
    x1, y1 = poly.max(axis=0)
    return np.array([max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)])


def render_detection_samples(spec: DetectionSampleSpec, classes: Sequence[str]):
    """Images (uint8, NxHxWx3) with per-image (boxes, labels) for detector training.

    Stop signs follow the same viewing distribution as the synthetic
    sequences; kites and discs are distractors of other classes.
    """
    scene = spec.scene
    rng = np.random.default_rng(spec.seed)
    texture, root_vertices = default_texture(scene)
    pool = background_pool(rng, 2 * scene.backgrounds_per_condition, scene.frame_width, scene.frame_height)
    W, H = scene.frame_width, scene.frame_height
    images = np.zeros((spec.n_images, H, W, 3), dtype=np.uint8)
    targets = []
    for n in range(spec.n_images):
        _, bg = pool[rng.integers(len(pool))]
        img = bg.copy()
        boxes, labels = [], []
        if rng.random() >= spec.p_empty:
            n_dis = int(rng.integers(0, spec.max_distractors + 1))
            for _ in range(n_dis):
                kind = ("kite", "disc")[rng.integers(2)]
                size = rng.uniform(24, 110)
                c = rng.uniform([size / 2, size / 2], [W - size / 2, H - size / 2])
                poly = draw_distractor(img, rng, kind, c, size)
                boxes.append(_bbox(poly, W, H))
                labels.append(classes.index(kind))
            if rng.random() < spec.p_sign:
                dist = DISTANCES[rng.integers(3)]
                Hm = sample_homography(rng, scene, dist)
                illum = rng.uniform(scene.illumination_range[0] * 0.9, min(2.0, scene.illumination_range[1] * 1.1))
                img = composite(img, texture, ViewMap(Hm, illum))
                poly = apply_homography(Hm, root_vertices)
                box = _bbox(poly, W, H)
                # occluded distractors lose their label
                keep = [i for i, b in enumerate(boxes) if _covered(b, box) < 0.5]
                boxes = [boxes[i] for i in keep] + [box]
                labels = [labels[i] for i in keep] + [classes.index("stop_sign")]
        img = img * rng.uniform(0.9, 1.1) + rng.normal(0, spec.noise_std, img.shape)
        images[n] = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
        targets.append((np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(labels, dtype=np.int64)))
    return images, targets


def _covered(box: np.ndarray, by: np.ndarray) -> float:
    x0, y0 = np.maximum(box[:2], by[:2])
    x1, y1 = np.minimum(box[2:], by[2:])
    inter = max(0.0, x1 - x0) * max(0.0, y1 - y0)
    area = (box[2] - box[0]) * (box[3] - box[1])
    return inter / area if area > 0 else 1.0


def frame_box(frame: Frame) -> np.ndarray:
    h, w = frame.image.shape[:2]
    return _bbox(frame.object_polygon, w, h)

