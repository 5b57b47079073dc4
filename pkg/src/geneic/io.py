"""File plumbing: atomic writes, images, JSON lines, corpus manifests."""
from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, FormatError
from .types import ImageSample


def atomic_write(path, data):
    """Write ``data`` (bytes or str) to ``path`` through a temp file + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


def dump_jsonl(records):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def write_jsonl(path, records):
    atomic_write(path, dump_jsonl(records))


def read_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc.msg}") from None
    return out


# images: PNG and PPM/PGM only

def load_image(path, image_id=None, channels=None):
    path = Path(path)
    if path.suffix.lower() not in {".png", ".ppm", ".pgm", ".pnm"}:
        raise ContractError(f"{path}: only PNG and PPM/PGM images are supported")
    with Image.open(path) as im:
        if channels == 1:
            im = im.convert("L")
        elif channels == 3 or im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ImageSample(image_id or path.stem, arr)


def save_image(path, image):
    px = np.round(np.clip(image.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "L" if px.shape[2] == 1 else "RGB"
    im = Image.fromarray(px[:, :, 0] if mode == "L" else px, mode=mode)
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_manifest(path):
    """Read a corpus manifest of ``{"id", "path"[, "captions"]}`` records.

    Relative image paths resolve against the manifest's directory.
    """
    path = Path(path)
    records = read_jsonl(path)
    seen = set()
    for i, rec in enumerate(records, 1):
        if "id" not in rec or "path" not in rec:
            raise FormatError(f"{path}: line {i}: manifest records need 'id' and 'path'")
        if rec["id"] in seen:
            raise ContractError(f"{path}: duplicate image id {rec['id']!r}")
        seen.add(rec["id"])
        p = Path(rec["path"])
        rec["path"] = str(p if p.is_absolute() else path.parent / p)
    return records


def load_corpus(manifest_path, channels=None):
    """Load every image of a manifest; returns (images, records, errors)."""
    records = read_manifest(manifest_path)
    images, errors = [], []
    for rec in records:
        try:
            images.append(load_image(rec["path"], rec["id"], channels))
        except (OSError, ContractError) as exc:
            errors.append(f"{rec['id']}: {exc}")
    return images, records, errors
