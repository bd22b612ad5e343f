"""Full synthetic pipeline through the CLI: data, two detectors, cross-view attack,
evaluation with defenses, transfer, regression and a merged report.

    python scripts/run_pipeline.py --out runs/pipeline [--quick]

``--quick`` shrinks the dataset and caps the attack so the chain runs in a few
minutes (detectors are still trained in full); the numbers are then only a
smoke check.
"""
import argparse
import sys
from pathlib import Path

from advtex.cli import main as advtex

QUICK_SCENE = ["scene.n_sequences=8", "scene.frames_per_sequence=3"]


def run(cmd, run_dir, *overrides, config=None):
    args = [cmd, "--run-dir", str(run_dir)]
    if config:
        args += ["--config", str(config)]
    for o in overrides:
        args += ["--set", o]
    print(f"\n== advtex {' '.join(args)}", flush=True)
    if advtex(args) != 0:
        sys.exit(f"{cmd} failed")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)
    configs = Path(__file__).resolve().parent.parent / "configs"

    run("generate-data", out / "data", *(QUICK_SCENE if args.quick else []))
    data = out / "data"
    for name, arch in (("A", "grid"), ("B", "two_stage")):
        run("train-detector", out / f"detector_{name}", f"train.arch={arch}", f"name={name}", f"dataset={data}")
    a, b = out / "detector_A" / "A.pt", out / "detector_B" / "B.pt"

    run("attack", out / "attack", f"dataset={data}", f"detector={a}",
        *(["attack.max_iterations=40"] if args.quick else []), config=configs / "attack_cross_view.yaml")
    dets = f"detectors={{A: {a}, B: {b}}}"
    run("evaluate", out / "clean", f"dataset={data}", dets, "attack_id=clean")
    run("defend-evaluate", out / "defended", f"dataset={data}", f"detectors={{A: {a}}}",
        f"texture={out / 'attack'}", *(["defenses=[none, down_up, 'tv:0.1']"] if args.quick else []))
    run("transfer", out / "transfer", f"dataset={data}", dets, f"texture={out / 'attack'}",
        "source=A", "target=B")
    run("regress", out / "regress", f"reports=[{out / 'transfer'}]")
    run("report", out / "report", f"reports=[{out / 'clean'}, {out / 'transfer'}]")
    print(f"\ntables: {out / 'report'}")


if __name__ == "__main__":
    main()
