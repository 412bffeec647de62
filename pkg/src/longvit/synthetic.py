"""Synthetic datasets and image stubs for desk-scale experiments."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .image import create_lvti, write_pnm
from .tasks import StudyRecord, write_manifest

PALETTE = np.array([[230, 40, 40], [40, 40, 230]], dtype=np.uint8)


def corner_match_image(size: int, marker: int, colors: tuple[int, int], rng: np.random.Generator,
                       jitter: int = 20) -> np.ndarray:
    """Flat grey image with ``marker``-pixel coloured squares in the top-left and bottom-right corners.

    Each marker colour is perturbed by up to ``jitter`` levels per channel.
    The background is constant and there is no per-pixel noise, so a model
    cannot separate the training images by memorising texture.
    """
    img = np.full((size, size, 3), 128, dtype=np.int64)
    for c, sl in ((colors[0], np.s_[:marker, :marker]), (colors[1], np.s_[-marker:, -marker:])):
        img[sl] = PALETTE[c].astype(np.int64) + rng.integers(-jitter, jitter + 1, size=3)
    return np.clip(img, 0, 255).astype(np.uint8)


def make_corner_match_dataset(out_dir: str | Path, n: int, size: int = 512, patch: int = 32,
                              marker_patches: int = 4, seed: int = 0) -> list[StudyRecord]:
    """Binary task whose label is whether the two corner markers share a colour.

    Each marker is a ``marker_patches x marker_patches`` block of patches.
    The two blocks sit in opposite corners of the patch grid, so relating
    them takes attention across most of the sequence.  Labels alternate,
    giving an exactly balanced set.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        label = i % 2
        a = int(rng.integers(2))
        b = a if label else 1 - a
        path = out / f"img{i:04d}.ppm"
        write_pnm(path, corner_match_image(size, marker_patches * patch, (a, b), rng))
        records.append(StudyRecord(f"img{i:04d}", path, label=label))
    write_manifest(out / "manifest.csv", records, "subtype")
    return records


def make_survival_dataset(out_dir: str | Path, n: int, size: int = 256, patch: int = 32, seed: int = 0,
                          censor_rate: float = 0.3) -> list[StudyRecord]:
    """Survival times whose hazard grows with the brightness of the image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        severity = rng.uniform(0.0, 1.0)
        img = rng.integers(0, 40, size=(size, size, 3)) + int(200 * severity)
        path = out / f"case{i:04d}.ppm"
        write_pnm(path, np.clip(img, 0, 255).astype(np.uint8))
        time = float(rng.exponential(60.0 * np.exp(-2.0 * severity))) + 0.1
        event = int(rng.random() >= censor_rate)
        if not event:
            time = float(rng.uniform(0.1, time)) if time > 0.2 else time
        records.append(StudyRecord(f"case{i:04d}", path, time=round(time, 3) or 0.1, event=event))
    write_manifest(out / "manifest.csv", records, "survival")
    return records


def make_lvti_stub(path: str | Path, side: int, channels: int = 3, tile_size: int = 512) -> Path:
    """A ``side x side`` LVTI file whose payload is a sparse hole (all zeros)."""
    tiles = create_lvti(path, side, side, channels, tile_size)
    del tiles
    return Path(path)
