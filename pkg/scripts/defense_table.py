"""Defense sweep: how often down-up sampling and TV denoising (several weights)
restore detection on single-image versus cross-view attacked frames.

    python scripts/defense_table.py --dataset runs/pipeline/data --detector runs/pipeline/detector_A/A.pt \
        --texture runs/pipeline/attack/texture.npy [--frames 10]
"""
import argparse

import numpy as np

from advtex.attack import AttackConfig, single_image_attack
from advtex.cli import _dataset_root
from advtex.data import open_dataset
from advtex.defenses import DefenseSpec, apply_defense
from advtex.detector import DetectorConfig, detect, load_checkpoint
from advtex.evaluation import evaluate
from advtex.registration import TextureMap


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--detector", required=True)
    ap.add_argument("--texture", required=True, help="texture.npy from a cross-view attack run")
    ap.add_argument("--frames", type=int, default=10)
    ap.add_argument("--tv", type=float, nargs="+", default=[0.02, 0.05, 0.1, 0.2, 0.4])
    args = ap.parse_args()

    ds = open_dataset(_dataset_root(args.dataset))
    model = load_checkpoint(args.detector)
    cfg = DetectorConfig()
    specs = [DefenseSpec("down_up")] + [DefenseSpec("tv", w) for w in args.tv]

    single = []
    for f in ds.frames("test")[: args.frames]:
        img, _ = single_image_attack(f, model, AttackConfig(max_iterations=200))
        if not detect(model, img, cfg):
            single.append(img)

    tex = TextureMap(np.load(args.texture), ds.texture.mask)
    rep = evaluate(tex, ds, {"A": model}, defenses=[DefenseSpec()] + specs, splits=("test",), workers=4)
    clean = evaluate(None, ds, {"A": model}, defenses=specs, splits=("test",), workers=4)
    outcome = {}
    for r in rep.records:
        outcome.setdefault((r.sequence_id, r.image), {})[r.defense] = r.detected
    fooled = [d for d in outcome.values() if not d["none"]]

    print(f"single-image fooled: {len(single)}   cross-view fooled: {len(fooled)}/{len(outcome)}")
    print(f"{'defense':10s} {'single restored':>16s} {'cross-view restored':>20s} {'clean kept':>11s}")
    for s in specs:
        a = np.mean([bool(detect(model, apply_defense(img, s), cfg)) for img in single]) if single else float("nan")
        b = np.mean([d[s.name] for d in fooled]) if fooled else float("nan")
        print(f"{s.name:10s} {a:16.2f} {b:20.2f} {clean.rate(defense=s.name):11.2f}")


if __name__ == "__main__":
    main()
