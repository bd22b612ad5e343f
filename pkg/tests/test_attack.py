import copy
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import gaussian_filter

from advtex.attack import (AttackConfig, View, descent_direction, fool_statistics, frame_terms, l2_penalty,
                           objective, objective_gradient, penalty_preset, perturbation_tier, rectangular_region,
                           run_attack, single_image_attack, step)
from advtex.data import render_frame
from advtex.detector import DetectorConfig, build_detector, class_score_map, detect
from advtex.detector.models import Proposals, ToyDetector
from advtex.registration import Frame, TextureMap, ViewMap, composite, polygon_interior
from advtex.scene import octagon_vertices

from test_registration import make_h


class OneBoxDetector(ToyDetector):
    """Exactly one box per image with target score 1."""

    arch = "one_box"

    def __init__(self):
        super().__init__()
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def _probs(self, n, dtype):
        return torch.tensor([[0.0, 1.0, 0.0, 0.0]] * n, dtype=dtype) + 0 * self.dummy

    def propose(self, x):
        return [Proposals(np.array([[10.0, 10.0, 60.0, 60.0]]), self._probs(1, x.dtype), np.ones(1))
                for _ in range(len(x))]

    def score_boxes(self, x, boxes):
        return [self._probs(len(b), x.dtype) for b in boxes]


def smooth(rng, shape, lo, hi, sigma=3.0):
    t = gaussian_filter(rng.random(shape), sigma=(sigma, sigma, 0))
    t = (t - t.min()) / (t.max() - t.min())
    return lo + (hi - lo) * t


def scene(n_frames=3, seed=0, size=64, frame_hw=(120, 160)):
    """Registered frames of a mid-grey textured octagon: every pixel strictly inside (0, 1)."""
    rng = np.random.default_rng(seed)
    verts = octagon_vertices(size)
    tex = TextureMap(smooth(rng, (size, size, 3), 0.3, 0.7), polygon_interior(verts, (size, size)))
    h, w = frame_hw
    out = []
    for k in range(n_frames):
        H = make_h(1.0 + 0.2 * k, 0.1 * k, 1e-3, -5e-4, w / 2 + 5 * k, h / 2, c=(size - 1) / 2)
        bg = smooth(rng, (h, w, 3), 0.2, 0.8)
        img, rec = render_frame(bg, tex, verts, H, 1.0, f"f{k}.png", "near", "tree")
        frame = Frame(img, np.array(rec.vertices))
        out.append((frame, ViewMap(H, 0.9 + 0.1 * k)))
    return tex, out


# direction and step

def test_descent_direction_examples():
    np.testing.assert_array_equal(descent_direction(np.array([2.5, -0.1, 0.0])), [1, -1, 0])


@given(arrays(np.float64, (5, 4, 3), elements=st.floats(-1e6, 1e6)))
def test_descent_direction_matches_scalar_loop(g):
    d = descent_direction(g)
    np.testing.assert_array_equal(descent_direction(-g), -d)
    for idx in np.ndindex(g.shape):
        assert d[idx] == (1 if g[idx] > 0 else -1 if g[idx] < 0 else 0)


def test_step_examples():
    mask = np.zeros((6, 6), dtype=bool)
    mask[1:5, 1:5] = True
    t = TextureMap(np.full((6, 6, 3), 0.5), mask)
    cfg = AttackConfig()
    assert np.array_equal(step(t, np.zeros((6, 6, 3)), cfg).pixels, t.pixels)
    one = step(t, np.ones((6, 6, 3)), cfg)
    assert np.abs(one.pixels - t.pixels).max() == pytest.approx(cfg.epsilon, abs=1e-15)
    np.testing.assert_array_equal(one.pixels[~mask], t.pixels[~mask])
    zero = TextureMap(np.zeros((6, 6, 3)), mask)
    assert step(zero, np.ones((6, 6, 3)), cfg).pixels.min() == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_step_bound_and_region_support(seed, n):
    rng = np.random.default_rng(seed)
    mask = rng.random((12, 12)) < 0.7
    mask[0, 0] = True
    region = mask & (rng.random((12, 12)) < 0.5)
    t0 = TextureMap(rng.random((12, 12, 3)), mask)
    cfg = AttackConfig(region_mask=region)
    t = t0
    for _ in range(n):
        t = step(t, np.sign(rng.normal(size=(12, 12, 3))), cfg)
    assert np.abs(t.pixels - t0.pixels).max() <= n * cfg.epsilon + 1e-12
    np.testing.assert_array_equal(t.pixels[~region], t0.pixels[~region])


# penalty

def test_penalty_gradient_is_two_lambda_delta(rng):
    tex, frames = scene(2)
    views = [View.build(f, v, tex.mask) for f, v in frames]
    model = OneBoxDetector()
    T = tex.replace(np.clip(tex.pixels + rng.normal(0, 0.05, tex.pixels.shape), 0, 1))
    _, g0, _, _ = objective_gradient(T, tex.pixels, views, model, AttackConfig(lambda_l2=0.0))
    _, g1, _, _ = objective_gradient(T, tex.pixels, views, model, AttackConfig(lambda_l2=0.3))
    expect = 2 * 0.3 * np.where(tex.mask[..., None], T.pixels - tex.pixels, 0)
    np.testing.assert_allclose(g1 - g0, expect, atol=1e-12)
    # and against finite differences of the penalty itself
    idx = np.argwhere(tex.mask)[:20]
    h = 1e-6
    for i, j in idx:
        p, m = T.pixels.copy(), T.pixels.copy()
        p[i, j, 1] += h
        m[i, j, 1] -= h
        fd = 0.3 * (l2_penalty(p, tex.pixels, tex.mask) - l2_penalty(m, tex.pixels, tex.mask)) / (2 * h)
        assert fd == pytest.approx(expect[i, j, 1], abs=1e-7)


@given(st.floats(0, 1), st.floats(0, 1))
def test_penalty_nondecreasing_in_distance(a, b):
    base = np.full((4, 4, 3), 0.5)
    mask = np.ones((4, 4), dtype=bool)
    d = np.linspace(-0.5, 0.5, 48).reshape(4, 4, 3)
    lo, hi = sorted((a, b))
    assert l2_penalty(base + lo * d, base, mask) <= l2_penalty(base + hi * d, base, mask)


def test_penalty_vanishes_at_base():
    tex, _ = scene(1)
    assert l2_penalty(tex.pixels, tex.pixels, tex.mask) == 0.0


# objective

def test_constant_one_box_detector_gives_unit_objective():
    tex, frames = scene(3)
    views = [View.build(f, v, tex.mask) for f, v in frames]
    assert objective(tex, tex.pixels, views, OneBoxDetector(), AttackConfig()) == 1.0


@pytest.mark.parametrize("source", ["post_nms", "pre_nms"])
def test_objective_matches_recomputation_from_score_maps(source):
    torch.manual_seed(0)
    model = build_detector({"arch": "grid"}).eval()
    tex, frames = scene(3, seed=1)
    rng = np.random.default_rng(1)
    T = tex.replace(np.clip(tex.pixels + rng.normal(0, 0.1, tex.pixels.shape) * tex.mask[..., None], 0, 1))
    cfg = AttackConfig(box_source=source, proposal_threshold=0.25, lambda_l2=0.01,
                       detector=DetectorConfig(confidence_threshold=0.26))
    views = [View.build(f, v, tex.mask) for f, v in frames]
    total = 0.0
    for f, v in frames:
        img = composite(f, T, v, base=tex.pixels)
        if source == "pre_nms":
            s = [sc for _, sc in class_score_map(model, img) if sc >= 0.25]
        else:
            s = [d.score(1) for d in detect(model, img, cfg.detector)]
        total += np.mean(s) if s else 0.0
    expect = total / len(frames) + 0.01 * l2_penalty(T.pixels, tex.pixels, tex.mask)
    assert objective(T, tex.pixels, views, model, cfg) == pytest.approx(expect, rel=1e-5)


def test_frames_without_boxes_contribute_nothing():
    torch.manual_seed(0)
    model = build_detector({"arch": "grid"}).eval()
    tex, frames = scene(2)
    views = [View.build(f, v, tex.mask) for f, v in frames]
    cfg = AttackConfig(detector=DetectorConfig(confidence_threshold=1.0))
    scores, grads, sel = frame_terms(tex, tex.pixels, views, model, cfg)
    assert not scores.any() and all(not g.any() for g in grads) and all(s == [] for s in sel)


def test_end_to_end_gradient_matches_finite_differences():
    torch.manual_seed(1)
    model = copy.deepcopy(build_detector({"arch": "grid"})).double().eval()
    tex, frames = scene(2, seed=2)
    rng = np.random.default_rng(2)
    T = tex.replace(np.clip(tex.pixels + rng.uniform(-0.02, 0.02, tex.pixels.shape) * tex.mask[..., None], 0, 1))
    views = [View.build(f, v, tex.mask) for f, v in frames]
    cfg = AttackConfig(box_source="pre_nms", proposal_threshold=0.2)
    _, grad, boxes, _ = objective_gradient(T, tex.pixels, views, model, cfg)
    assert all(boxes)
    idx = np.argwhere(tex.mask)
    pick = idx[rng.choice(len(idx), 80, replace=False)]
    h = 1e-6
    fd, an = [], []
    for (i, j), c in zip(pick, rng.integers(0, 3, len(pick))):
        p, m = T.pixels.copy(), T.pixels.copy()
        p[i, j, c] += h
        m[i, j, c] -= h
        fp = objective(T.replace(p), tex.pixels, views, model, cfg, boxes=boxes)
        fm = objective(T.replace(m), tex.pixels, views, model, cfg, boxes=boxes)
        fd.append((fp - fm) / (2 * h))
        an.append(grad[i, j, c])
    fd, an = np.array(fd), np.array(an)
    assert np.count_nonzero(fd) >= 50
    assert np.linalg.norm(an - fd) / np.linalg.norm(fd) < 1e-2


def test_mean_and_max_agree_with_one_box_per_frame():
    torch.manual_seed(2)
    model = build_detector({"arch": "grid"}).eval()
    tex, frames = scene(2, seed=3)
    views = [View.build(f, v, tex.mask) for f, v in frames]
    _, _, boxes, _ = objective_gradient(tex, tex.pixels, views, model,
                                        AttackConfig(box_source="pre_nms", proposal_threshold=0.0))
    one = [b[:1] for b in boxes]
    _, ga, _, _ = objective_gradient(tex, tex.pixels, views, model, AttackConfig(aggregation="mean"), boxes=one)
    _, gb, _, _ = objective_gradient(tex, tex.pixels, views, model, AttackConfig(aggregation="max"), boxes=one)
    np.testing.assert_array_equal(ga, gb)


def test_penalty_preset_balances_terms():
    torch.manual_seed(0)
    model = build_detector({"arch": "grid"}).eval()
    tex, frames = scene(2)
    views = [View.build(f, v, tex.mask) for f, v in frames]
    cfg = AttackConfig(box_source="pre_nms")
    lam = penalty_preset(tex, views, model, cfg, reference_linf=0.05)
    det = objective(tex, tex.pixels, views, model, cfg)
    ref = tex.pixels + 0.05 * tex.mask[..., None]
    assert lam * l2_penalty(ref, tex.pixels, tex.mask) == pytest.approx(det, rel=1e-9)


# the loop

def test_zero_iterations_returns_initial_texture():
    tex, frames = scene(2)
    res = run_attack(frames, frames, OneBoxDetector(), tex, AttackConfig(max_iterations=0))
    assert res.history == [] and res.termination_reason == "max_iterations"
    np.testing.assert_array_equal(res.final_texture.pixels, tex.pixels)


def test_configuration_errors():
    tex, frames = scene(1)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0)
    with pytest.raises(ValueError):
        AttackConfig(val_fool_rate=0)
    with pytest.raises(ValueError):
        run_attack([], frames, OneBoxDetector(), tex, AttackConfig())
    outside = ~tex.mask
    with pytest.raises(ValueError, match="region_mask"):
        run_attack(frames, frames, OneBoxDetector(), tex, AttackConfig(region_mask=outside))


def test_unmovable_objective_stalls():
    tex, frames = scene(2)
    res = run_attack(frames, frames, OneBoxDetector(), tex, AttackConfig(stall_patience=5, max_iterations=100))
    assert res.termination_reason == "stalled" and len(res.history) == 6


def _short_attack(tmp_path=None, region=None, iterations=4):
    torch.manual_seed(3)
    model = build_detector({"arch": "grid"}).eval()
    tex, frames = scene(3, seed=4)
    cfg = AttackConfig(max_iterations=iterations, box_source="pre_nms", proposal_threshold=0.2,
                       region_mask=region, checkpoint_every=2,
                       detector=DetectorConfig(confidence_threshold=0.0))
    return tex, run_attack(frames[:2], frames[2:], model, tex, cfg, run_dir=tmp_path)


def test_attack_invariants_and_run_directory(tmp_path):
    tex, _ = scene(1, seed=4)
    region = rectangular_region(tex.mask, (10, 10, 40, 30))
    tex, res = _short_attack(tmp_path, region)
    n = len(res.history)
    assert n == 4
    d = res.final_texture.pixels - tex.pixels
    assert np.abs(d).max() <= n * res.config.epsilon + 1e-12
    assert not d[~region].any() and d[region].any()
    assert res.final_texture.pixels.min() >= 0 and res.final_texture.pixels.max() <= 1
    lines = (tmp_path / "history.jsonl").read_text().splitlines()
    assert [json.loads(x)["iteration"] for x in lines] == list(range(n))
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == [
        "texture_00002.npy", "texture_00002.png", "texture_00004.npy", "texture_00004.png"]
    np.testing.assert_array_equal(np.load(tmp_path / "texture.npy"), res.final_texture.pixels)
    assert json.loads((tmp_path / "result.json").read_text())["iterations"] == n
    rec = res.history[0]
    assert 0 <= rec.val_fool_rate <= 1 and 0 <= rec.val_mislabel_rate <= rec.val_fool_rate


def test_attack_is_deterministic():
    _, a = _short_attack()
    _, b = _short_attack()
    np.testing.assert_array_equal(a.final_texture.pixels, b.final_texture.pixels)
    assert a.history == b.history


def test_fool_statistics_on_one_box_detector():
    tex, frames = scene(3)
    views = [View.build(f, v, tex.mask) for f, v in frames]
    cfg = AttackConfig(detector=DetectorConfig(confidence_threshold=0.5))
    assert fool_statistics(tex, tex.pixels, views, OneBoxDetector(), cfg) == (0.0, 0.0)
    assert fool_statistics(tex, tex.pixels, [], OneBoxDetector(), cfg) == (0.0, 0.0)


# single image

def test_single_image_zero_iterations_is_identity():
    _, frames = scene(1)
    f = frames[0][0]
    img, res = single_image_attack(f, OneBoxDetector(), AttackConfig(max_iterations=0))
    np.testing.assert_array_equal(img, f.image)


def test_single_image_object_region_support():
    torch.manual_seed(4)
    model = build_detector({"arch": "grid"}).eval()
    _, frames = scene(1, seed=5)
    f = frames[0][0]
    cfg = AttackConfig(max_iterations=3, box_source="pre_nms", proposal_threshold=0.0)
    img, res = single_image_attack(f, model, cfg, region="object")
    changed = np.any(img != f.image, axis=2)
    inside = res.final_texture.mask
    assert changed.any() and not (changed & ~inside).any()
    assert inside.sum() < 0.5 * inside.size


def test_perturbation_tiers():
    mask = np.ones((4, 4), dtype=bool)
    assert perturbation_tier(np.zeros((4, 4, 3)), mask) == "S"
    assert perturbation_tier(np.full((4, 4, 3), 20 / 255), mask) == "L"
    assert perturbation_tier(np.full((4, 4, 3), 0.5), mask) == "EL"
