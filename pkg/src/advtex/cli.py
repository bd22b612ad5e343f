"""Command-line entry point: ``advtex <command> [--config FILE] [--set key=value ...] [--run-dir DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from .attack import perturbation_tier, rectangular_region, run_attack, single_image_attack
from .data import generate_synthetic, open_dataset, write_image
from .defenses import DefenseSpec
from .detector import detect, load_checkpoint, save_checkpoint
from .detector.training import train_from_spec
from .evaluation import (DetectionRateReport, evaluate, load_report, registered_frames, render_report,
                         save_report, transfer_evaluate)
from .factors import fit_success_factors, records_from_report
from .registration import TextureMap

log = logging.getLogger("advtex")


def _dataset_root(path: str) -> Path:
    """Accept either a dataset root or a generate-data run directory."""
    p = Path(path)
    return p / "dataset" if (p / "dataset" / "dataset.json").exists() else p


def _load_texture(path: str, dataset) -> tuple[TextureMap, str, str]:
    """(texture, attack id, tier) from texture.npy or an attack run directory."""
    p = Path(path)
    if p.is_dir():
        pixels = np.load(p / "texture.npy")
        meta = json.loads((p / "result.json").read_text()) if (p / "result.json").exists() else {}
        tex = TextureMap(pixels, dataset.texture.mask)
        tier = meta.get("tier") or perturbation_tier(pixels - dataset.texture.pixels, dataset.texture.mask)
        return tex, p.name, tier
    pixels = np.load(p)
    return (TextureMap(pixels, dataset.texture.mask), p.stem,
            perturbation_tier(pixels - dataset.texture.pixels, dataset.texture.mask))


def cmd_generate_data(cfg: C.GenerateDataConfig, run_dir: Path) -> dict:
    ds = generate_synthetic(cfg.scene, run_dir / "dataset")
    counts = {s: sum(1 for q in ds.sequences if q.split == s) for s in ("train", "val", "test")}
    return {"dataset": str(run_dir / "dataset"), "sequences": counts}


def cmd_train_detector(cfg: C.TrainDetectorConfig, run_dir: Path) -> dict:
    t = time.time()
    model = train_from_spec(cfg.train)
    path = run_dir / f"{cfg.name}.pt"
    save_checkpoint(model, path)
    out = {"checkpoint": str(path), "seconds": round(time.time() - t, 1)}
    if cfg.dataset:
        ds = open_dataset(_dataset_root(cfg.dataset))
        rep = evaluate(None, ds, {cfg.name: model}, splits=("test",))
        out["clean_test_detection_rate"] = rep.rate(split="test")
    return out


def cmd_attack(cfg: C.AttackRunConfig, run_dir: Path) -> dict:
    ds = open_dataset(_dataset_root(cfg.dataset))
    model = load_checkpoint(cfg.detector)
    acfg = cfg.attack
    if cfg.mode == "single_image":
        frames = ds.frames(cfg.split)[: cfg.frames]
        rows = []
        for f in frames:
            img, res = single_image_attack(f, model, acfg, region=cfg.image_region)
            name = f"{f.sequence_id}_{f.metadata['image']}"
            write_image(run_dir / name, img)
            rows.append({"frame": name, "fooled": not detect(model, img, acfg.detector),
                         "iterations": len(res.history), "termination": res.termination_reason,
                         "linf": float(np.abs(res.perturbation).max())})
        (run_dir / "single_image.json").write_text(json.dumps(rows, indent=1) + "\n")
        return {"fooled": sum(r["fooled"] for r in rows), "frames": len(rows)}
    if cfg.region is not None:
        acfg.region_mask = rectangular_region(ds.texture.mask, tuple(cfg.region))
    train, val = registered_frames(ds, "train"), registered_frames(ds, "val")
    res = run_attack(train, val, model, ds.texture, acfg, run_dir=run_dir)
    tier = perturbation_tier(res.perturbation, ds.texture.mask)
    meta = json.loads((run_dir / "result.json").read_text())
    meta["tier"] = tier
    (run_dir / "result.json").write_text(json.dumps(meta, indent=1) + "\n")
    return meta


def _detectors(cfg: C.EvaluateConfig) -> dict:
    if not cfg.detectors:
        raise C.ConfigError("no detectors configured (detectors: {name: checkpoint})")
    return {name: load_checkpoint(path) for name, path in cfg.detectors.items()}


def _run_evaluate(cfg: C.EvaluateConfig, run_dir: Path, transfer: tuple[str, str] | None = None) -> dict:
    ds = open_dataset(_dataset_root(cfg.dataset))
    detectors = _detectors(cfg)
    texture, attack_id, tier = (None, None, None)
    if cfg.texture:
        texture, attack_id, tier = _load_texture(cfg.texture, ds)
    kwargs = dict(defenses=[DefenseSpec.parse(d) for d in cfg.defenses], config=cfg.detector_config,
                  splits=cfg.splits, attack_id=cfg.attack_id or attack_id, tier=tier,
                  keep_images=cfg.annotate, workers=cfg.workers)
    if transfer:
        report = transfer_evaluate(texture, ds, detectors, *transfer, **kwargs)
    else:
        report = evaluate(texture, ds, detectors, **kwargs)
    save_report(report, run_dir / "report.json")
    render_report(report, run_dir, list(detectors) if not transfer else list(dict.fromkeys(transfer)))
    rates = {}
    for r in report.records:
        rates.setdefault(f"{r.detector}/{r.defense}/{r.split}", []).append(r.detected)
    return {k: round(float(np.mean(v)), 4) for k, v in rates.items()}


def cmd_evaluate(cfg: C.EvaluateConfig, run_dir: Path) -> dict:
    return _run_evaluate(cfg, run_dir)


def cmd_transfer(cfg: C.TransferConfig, run_dir: Path) -> dict:
    return _run_evaluate(cfg, run_dir, (cfg.source, cfg.target))


def _merged(paths) -> DetectionRateReport:
    report = DetectionRateReport()
    for p in paths:
        p = Path(p)
        report = report.merge(load_report(p / "report.json" if p.is_dir() else p))
    return report


def cmd_regress(cfg: C.RegressConfig, run_dir: Path) -> dict:
    report = _merged(cfg.reports)
    records = records_from_report(DetectionRateReport(
        [r for r in report.records if r.defense == cfg.defense], report.tiers))
    fit = fit_success_factors(records, cfg.l1_strength, cfg.seed)
    out = {"records": len(records), "l1_strength": fit.l1_strength, "bias": fit.bias,
           "converged": fit.converged, "coefficients": dict(zip(fit.names, map(float, fit.coef))),
           "ranking": fit.ranking(), "factor_ranking": fit.factor_ranking(), "cv": fit.cv}
    (run_dir / "regression.json").write_text(json.dumps(out, indent=1) + "\n")
    return {k: out[k] for k in ("records", "l1_strength", "factor_ranking")}


def cmd_report(cfg: C.ReportConfig, run_dir: Path) -> dict:
    report = _merged(cfg.reports)
    paths = render_report(report, run_dir)
    return {k: str(v) for k, v in paths.items()}


COMMANDS = {
    "generate-data": (C.GenerateDataConfig, cmd_generate_data, None),
    "train-detector": (C.TrainDetectorConfig, cmd_train_detector, None),
    "attack": (C.AttackRunConfig, cmd_attack, None),
    "evaluate": (C.EvaluateConfig, cmd_evaluate, None),
    "defend-evaluate": (C.EvaluateConfig, cmd_evaluate, C.defend_evaluate_defaults),
    "transfer": (C.TransferConfig, cmd_transfer, None),
    "regress": (C.RegressConfig, cmd_regress, None),
    "report": (C.ReportConfig, cmd_report, None),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advtex", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted key, YAML value); repeatable")
        p.add_argument("--run-dir", help="output directory (default runs/<command>-<timestamp>)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    cls, fn, defaults = COMMANDS[args.command]
    try:
        cfg = C.load_config(cls, args.config, args.overrides, defaults() if defaults else None)
    except C.ConfigError as e:
        print(f"advtex {args.command}: {e}", file=sys.stderr)
        return 2
    run_dir = Path(args.run_dir or f"runs/{args.command}-{time.strftime('%Y%m%d-%H%M%S')}")
    run_dir.mkdir(parents=True, exist_ok=True)
    C.dump_config(cfg, run_dir / "config.yaml")
    try:
        summary = fn(cfg, run_dir)
    except (C.ConfigError, ValueError, FileNotFoundError) as e:
        if args.verbose:
            raise
        print(f"advtex {args.command}: {e}", file=sys.stderr)
        return 1
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1, default=str) + "\n")
    print(json.dumps(summary, indent=1, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
