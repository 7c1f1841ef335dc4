"""On-disk datasets, PNG frame sequences and atomic file writes."""
from __future__ import annotations

import hashlib
import io as _stdio
import json
import os
import tempfile
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from PIL import Image

from .pipeline import TryOnSample, make_sample
from .points import write_alignment
from .scene import SceneTruth

DATASET_INDEX = "dataset.json"


def atomic_write_bytes(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def _png_bytes(img: np.ndarray) -> bytes:
    arr = to_uint8(img)
    mode = "L" if arr.ndim == 2 else "RGB"
    buf = _stdio.BytesIO()
    # fixed encoder settings keep the bytes identical across runs
    Image.fromarray(arr, mode=mode).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def write_png(path: str, img: np.ndarray) -> None:
    atomic_write_bytes(path, _png_bytes(img))


def read_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def write_frames(directory: str, video: np.ndarray) -> list[str]:
    """Frames as ``frame_000.png``, ``frame_001.png`` ...; returns the written paths."""
    paths = []
    for t, frame in enumerate(video):
        p = os.path.join(directory, f"frame_{t:03d}.png")
        write_png(p, frame)
        paths.append(p)
    return paths


def read_frames(directory: str) -> np.ndarray:
    names = sorted(n for n in os.listdir(directory) if n.startswith("frame_") and n.endswith(".png"))
    if not names:
        raise FileNotFoundError(f"no frame_*.png files in {directory}")
    return np.stack([read_png(os.path.join(directory, n)) for n in names])


@dataclass
class DatasetEntry:
    name: str
    pseudo_garment: int
    corruption: float
    seed: int


def write_scene(directory: str, sample: TryOnSample) -> None:
    """Every artefact of one pseudo pair; ``truth.json`` alone suffices to rebuild it."""
    truth = sample.truth
    atomic_write_text(os.path.join(directory, "truth.json"), truth.to_json() + "\n")
    write_frames(os.path.join(directory, "gt"), sample.x_gt)
    write_frames(os.path.join(directory, "pseudo"), sample.x_ps)
    write_frames(os.path.join(directory, "agnostic"), sample.a)
    write_frames(os.path.join(directory, "agnostic_mask"), sample.m.astype(np.float64))
    write_frames(os.path.join(directory, "pose"), sample.pose)
    write_png(os.path.join(directory, "garment.png"), sample.g)
    write_png(os.path.join(directory, "garment_mask.png"), sample.m_g.astype(np.float64))
    if sample.alignment is not None:
        write_alignment(os.path.join(directory, "alignment.txt"), sample.alignment)


def write_dataset(directory: str, samples: Iterable[TryOnSample], entries: Iterable[DatasetEntry]) -> None:
    entries = list(entries)
    for s, e in zip(samples, entries):
        write_scene(os.path.join(directory, e.name), s)
    index = {"format": 1, "scenes": [e.__dict__ for e in entries]}
    atomic_write_text(os.path.join(directory, DATASET_INDEX), json.dumps(index, indent=1, sort_keys=True) + "\n")


def read_dataset(directory: str, K: int = 16) -> list[TryOnSample]:
    """Rebuild the samples exactly from their truth records (no PNG quantization)."""
    path = os.path.join(directory, DATASET_INDEX)
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} not found; run gen-data first")
    with open(path, encoding="utf-8") as fh:
        index = json.load(fh)
    out = []
    for e in index["scenes"]:
        with open(os.path.join(directory, e["name"], "truth.json"), encoding="utf-8") as fh:
            truth = SceneTruth.from_json(fh.read())
        out.append(make_sample(truth, e["pseudo_garment"], e["corruption"], e["seed"], K))
    return out


def load_garment(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Garment image and mask; a sibling ``garment_mask.png`` is used when present."""
    g = read_png(path)
    if g.ndim == 2:
        g = np.repeat(g[..., None], 3, axis=-1)
    g = g[..., :3]
    mpath = os.path.join(os.path.dirname(path), "garment_mask.png")
    m = read_png(mpath) > 0.5 if os.path.exists(mpath) else np.ones(g.shape[:2], dtype=bool)
    return g * m[..., None], m

