"""Synthetic target-domain corpora for the toy backend."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backend import DimSpec, make_rng
from .io import atomic_write, save_image
from .types import ImageSample


def object_image(rng, dims, kind, image_id):
    """A centred bright 'object' of one of two shapes on a noisy background."""
    H, W, C = dims.image_shape
    px = rng.random((H, W, C)) * 0.25
    yy, xx = np.mgrid[0:H, 0:W]
    cy = (H - 1) / 2 + rng.normal(0, 0.5)
    cx = (W - 1) / 2 + rng.normal(0, 0.5)
    level = 0.6 + 0.4 * rng.random(C)
    if kind == 0:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (min(H, W) / 4) ** 2
    else:
        mask = (np.abs(yy - cy) <= H / 5) | (np.abs(xx - cx) <= W / 8)
    px[mask] = level
    return ImageSample(image_id, np.clip(px, 0.0, 1.0))


def toy_corpus(n, seed=0, dims=None, kinds=2):
    dims = dims or DimSpec()
    rng = make_rng(seed)
    return [object_image(rng, dims, k % kinds, f"img{k:04d}") for k in range(n)]


def write_corpus(images, out_dir, captions=None):
    """Write PNGs plus ``manifest.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    lines = []
    for im in images:
        save_image(out_dir / f"{im.id}.png", im)
        rec = {"id": im.id, "path": f"{im.id}.png"}
        if captions and im.id in captions:
            rec["captions"] = captions[im.id]
        lines.append(json.dumps(rec, sort_keys=True) + "\n")
    manifest = out_dir / "manifest.jsonl"
    atomic_write(manifest, "".join(lines))
    return manifest
