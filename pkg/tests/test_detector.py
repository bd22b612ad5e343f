import copy

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from advtex.data import DetectionSampleSpec, frame_box, render_detection_samples
from advtex.detector import (DEFAULT_CLASSES, DetectionBox, DetectorConfig, ToyDetector, build_detector,
                             class_score_map, detect, detect_all, detection_rate, input_gradient,
                             load_checkpoint, nms, save_checkpoint, train_toy_detector)
from advtex.detector.boxes import iou, iou_matrix
from advtex.detector.inference import _proposals, proposals_to_boxes
from advtex.detector.models import count_parameters
from advtex.detector.training import TrainConfig


def random_image(seed, h=240, w=320):
    return np.random.default_rng(seed).random((h, w, 3))


rects = st.lists(
    st.tuples(st.floats(0, 100), st.floats(0, 100), st.floats(1, 60), st.floats(1, 60)),
    min_size=1, max_size=25,
).map(lambda xs: np.array([[x, y, x + w, y + h] for x, y, w, h in xs]))


# boxes and NMS

def test_detection_box_validation():
    with pytest.raises(ValueError):
        DetectionBox((5, 0, 5, 10), np.array([0.5, 0.5]), 0.5)
    with pytest.raises(ValueError):
        DetectionBox((0, 0, 5, 10), np.array([0.5, 0.6]), 0.5)
    b = DetectionBox((0, 0, 5, 10), np.array([0.1, 0.7, 0.2]), 0.9)
    assert b.label == 1 and b.score(2) == 0.2


def test_iou_scalar_cases():
    assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0
    assert iou([0, 0, 10, 10], [10, 0, 20, 10]) == 0.0
    assert iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(50 / 150)


def test_duplicate_boxes_keep_exactly_one():
    r = np.array([[10, 10, 50, 50]] * 4, dtype=float)
    assert len(nms(r, np.array([0.5, 0.9, 0.9, 0.2]), 0.3)) == 1
    assert nms(r, np.array([0.5, 0.9, 0.9, 0.2]), 0.3)[0] == 1


@settings(max_examples=200, deadline=None)
@given(rects, st.floats(0.05, 1.0), st.integers(0, 2**31 - 1))
def test_nms_postcondition(r, thr, seed):
    scores = np.random.default_rng(seed).random(len(r))
    keep = nms(r, scores, thr)
    kept = r[keep]
    ov = iou_matrix(kept, kept)
    np.fill_diagonal(ov, 0)
    assert np.all(ov <= thr)
    assert np.all(np.diff(scores[keep]) <= 0)
    # every dropped box is covered by a kept box with at least its score
    for i in set(range(len(r))) - set(keep.tolist()):
        cover = iou_matrix(r[i:i + 1], kept)[0]
        assert np.any((cover > thr) & (scores[keep] >= scores[i]))


# models

@pytest.mark.parametrize("arch", ["grid", "two_stage"])
def test_parameter_budget_and_interface(arch):
    model = build_detector({"arch": arch})
    assert count_parameters(model) < 200_000
    assert isinstance(model, ToyDetector)
    assert model.classes == DEFAULT_CLASSES and model.target_class == 1
    model.eval()
    boxes = class_score_map(model, random_image(0))
    assert boxes and all(0 <= s <= 1 for _, s in boxes)


@pytest.mark.parametrize("arch", ["grid", "two_stage"])
def test_detect_is_thresholded_subset_of_score_map(arch):
    torch.manual_seed(1)
    model = build_detector({"arch": arch}).eval()
    img = random_image(1)
    cfg = DetectorConfig(confidence_threshold=0.2)
    dets = detect(model, img, cfg)
    pool = {(b.rect, round(s, 12)) for b, s in class_score_map(model, img) if s >= 0.2}
    assert {(d.rect, round(d.score(1), 12)) for d in dets} <= pool
    scores = [d.score(1) for d in dets]
    assert scores == sorted(scores, reverse=True)


@pytest.mark.parametrize("arch", ["grid", "two_stage"])
def test_raising_confidence_never_adds_detections(arch):
    torch.manual_seed(2)
    model = build_detector({"arch": arch}).eval()
    img = random_image(2)
    counts = [len(detect(model, img, DetectorConfig(confidence_threshold=c))) for c in np.linspace(0, 1, 21)]
    assert counts[0] > 0
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_detector_config_ranges():
    with pytest.raises(ValueError):
        DetectorConfig(nms_iou_threshold=0.0)
    with pytest.raises(ValueError):
        DetectorConfig(confidence_threshold=1.5)


# input gradients

class ConstantDetector(ToyDetector):
    arch = "constant"

    def __init__(self):
        super().__init__()
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def score_boxes(self, x, boxes):
        p = torch.tensor([0.1, 0.6, 0.2, 0.1], dtype=x.dtype)
        return [p.repeat(len(b), 1) + 0 * self.dummy for b in boxes]


def _boxes(model, img, n):
    return proposals_to_boxes(_proposals(model, img)[0])[:n]


def test_constant_model_has_zero_gradient():
    box = DetectionBox((0, 0, 10, 10), np.array([0.1, 0.6, 0.2, 0.1]), 1.0)
    g = input_gradient(ConstantDetector(), random_image(0, 32, 32), [box])
    assert g.shape == (32, 32, 3) and not g.any()


def test_empty_box_subset_is_an_error(untrained_grid):
    with pytest.raises(ValueError):
        input_gradient(untrained_grid, random_image(0), [])


@pytest.mark.parametrize("arch", ["grid", "two_stage"])
def test_aggregation_identities(arch):
    torch.manual_seed(4)
    model = build_detector({"arch": arch}).eval()
    img = random_image(4)
    one = _boxes(model, img, 1)
    np.testing.assert_array_equal(input_gradient(model, img, one, "mean"), input_gradient(model, img, one, "max"))
    b = _boxes(model, img, 2)
    mean = input_gradient(model, img, b, "mean")
    singles = (input_gradient(model, img, b[:1]) + input_gradient(model, img, b[1:])) / 2
    np.testing.assert_allclose(mean, singles, rtol=1e-4, atol=1e-9)


@pytest.mark.parametrize("arch", ["grid", "two_stage"])
def test_input_gradient_matches_finite_differences(arch):
    torch.manual_seed(5)
    model = copy.deepcopy(build_detector({"arch": arch})).double().eval()
    img = random_image(5)
    boxes = _boxes(model, img, 3)
    grad = input_gradient(model, img, boxes)

    def value(x):
        with torch.no_grad():
            t = torch.as_tensor(x.transpose(2, 0, 1)[None].copy())
            return float(model.score_boxes(t, [boxes])[0][:, 1].mean())

    rng = np.random.default_rng(0)
    # pixels around the boxes, where the gradient lives
    x0, y0, x1, y1 = np.array(boxes[0].rect).astype(int)
    ys = rng.integers(max(0, y0 - 8), min(240, y1 + 8), 150)
    xs = rng.integers(max(0, x0 - 8), min(320, x1 + 8), 150)
    cs = rng.integers(0, 3, 150)
    h = 1e-6
    fd, an = [], []
    for i, j, c in zip(ys, xs, cs):
        p, m = img.copy(), img.copy()
        p[i, j, c] += h
        m[i, j, c] -= h
        fd.append((value(p) - value(m)) / (2 * h))
        an.append(grad[i, j, c])
    fd, an = np.array(fd), np.array(an)
    assert np.count_nonzero(fd) >= 100
    assert np.linalg.norm(an - fd) / np.linalg.norm(fd) < 1e-3


# checkpoints

@pytest.mark.parametrize("arch", ["grid", "two_stage"])
def test_checkpoint_round_trip(tmp_path, arch):
    torch.manual_seed(6)
    model = build_detector({"arch": arch}).eval()
    save_checkpoint(model, tmp_path / "m.pt")
    back = load_checkpoint(tmp_path / "m.pt")
    assert back.descriptor() == model.descriptor()
    img = random_image(6)
    a = proposals_to_boxes(_proposals(model, img)[0])
    b = proposals_to_boxes(_proposals(back, img)[0])
    assert [x.rect for x in a] == [x.rect for x in b]
    np.testing.assert_array_equal([x.class_scores for x in a], [x.class_scores for x in b])


def test_checkpoint_rejects_foreign_files(tmp_path):
    torch.save({"format": "other", "version": 1}, tmp_path / "x.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.pt")


# training

def _small_samples(n, seed):
    return render_detection_samples(DetectionSampleSpec(n_images=n, seed=seed), DEFAULT_CLASSES)


def test_training_is_deterministic():
    images, targets = _small_samples(32, 7)
    cfg = TrainConfig(epochs=1, batch_size=8)
    a = train_toy_detector(images, targets, "grid", seed=3, config=cfg)
    b = train_toy_detector(images, targets, "grid", seed=3, config=cfg)
    for (k, va), (_, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(va, vb), k


def test_shuffled_labels_learn_nothing():
    images, targets = _small_samples(240, 8)
    held, held_t = _small_samples(60, 9)
    rng = np.random.default_rng(0)
    shuffled = [targets[i] for i in rng.permutation(len(targets))]
    cfg = TrainConfig(epochs=10)
    loose = DetectorConfig(confidence_threshold=0.3)
    real = detection_rate(train_toy_detector(images, targets, "grid", 0, cfg), held, held_t, 1, loose)
    fake = detection_rate(train_toy_detector(images, shuffled, "grid", 0, cfg), held, held_t, 1, loose)
    assert fake < 0.2
    assert real > fake + 0.4


def test_training_error_on_unreachable_gate():
    from advtex.detector import TrainingError
    images, targets = _small_samples(16, 10)
    with pytest.raises(TrainingError, match="detection rate"):
        train_toy_detector(images, targets, "grid", 0, TrainConfig(epochs=1, min_detection_rate=1.01),
                           val=(images, targets))


# trained detectors

@pytest.mark.slow
@pytest.mark.parametrize("name", ["detector_a", "detector_b"])
def test_trained_detector_behaviour(name, request, dataset):
    model = request.getfixturevalue(name)
    cfg = DetectorConfig()
    assert detect(model, np.full((240, 320, 3), 0.5), cfg) == []
    assert detect(model, np.zeros((240, 320, 3)), cfg) == []
    frames = dataset.frames("test")
    single = 0
    for f in frames:
        dets = detect(model, f.image, cfg)
        if len(dets) == 1 and iou(dets[0].rect, frame_box(f)) >= 0.5:
            single += 1
    assert single / len(frames) >= 0.9
    # all-class output covers the target detections
    f = frames[0]
    assert {d.rect for d in detect(model, f.image, cfg)} <= {d.rect for d in detect_all(model, f.image, cfg)}
