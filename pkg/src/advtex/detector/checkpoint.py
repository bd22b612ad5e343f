"""Model checkpoints.

A checkpoint is a torch zip archive holding a plain dict::

    {"format": "advtex-detector", "version": 1,
     "descriptor": {"arch": ..., "classes": [...], ...},
     "state_dict": {name: tensor}}

It is loaded with ``weights_only=True``, so only tensors and primitive
containers are accepted.
"""
from __future__ import annotations

from pathlib import Path

import torch

from .models import ToyDetector, build_detector

FORMAT = "advtex-detector"
VERSION = 1


def save_checkpoint(model: ToyDetector, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": FORMAT, "version": VERSION, "descriptor": model.descriptor(),
                "state_dict": model.state_dict()}, path)


def load_checkpoint(path) -> ToyDetector:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format") != FORMAT:
        raise ValueError(f"{path}: not a detector checkpoint")
    if blob.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    model = build_detector(blob["descriptor"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
