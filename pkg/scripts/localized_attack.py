"""Localized attack: the perturbation is confined to a rectangle of the sign
(by default the band holding the lettering), then evaluated on every split.

    python scripts/localized_attack.py --dataset runs/pipeline/data --detector runs/pipeline/detector_A/A.pt \
        --out runs/localized [--rect 16 40 112 88]
"""
import argparse
import json
from pathlib import Path

import numpy as np

from advtex.attack import AttackConfig, perturbation_tier, rectangular_region, run_attack
from advtex.cli import _dataset_root
from advtex.data import open_dataset
from advtex.detector import load_checkpoint
from advtex.evaluation import evaluate, grid_text, registered_frames, table_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--detector", required=True)
    ap.add_argument("--out", default="runs/localized")
    ap.add_argument("--rect", type=int, nargs=4, default=[16, 40, 112, 88], metavar=("X0", "Y0", "X1", "Y1"))
    ap.add_argument("--max-iterations", type=int, default=2000)
    args = ap.parse_args()

    out = Path(args.out)
    ds = open_dataset(_dataset_root(args.dataset))
    model = load_checkpoint(args.detector)
    region = rectangular_region(ds.texture.mask, tuple(args.rect))
    cfg = AttackConfig(box_source="pre_nms", region_mask=region, max_iterations=args.max_iterations)
    res = run_attack(registered_frames(ds, "train"), registered_frames(ds, "val"), model, ds.texture, cfg,
                     run_dir=out)
    tier = perturbation_tier(res.perturbation, ds.texture.mask)
    rep = evaluate(res.final_texture, ds, {"A": model}, attack_id="localized", tier=tier)
    print(f"{res.termination_reason} after {len(res.history)} iterations; region covers "
          f"{region.sum() / ds.texture.mask.sum():.0%} of the sign; L_inf {np.abs(res.perturbation).max() * 255:.0f}/255")
    print(grid_text(table_grid(rep.cells(), ["A"], "none", rep.tiers)))
    (out / "localized.json").write_text(json.dumps(
        {s: rep.rate(split=s) for s in ("train", "val", "test")}, indent=1) + "\n")


if __name__ == "__main__":
    main()
