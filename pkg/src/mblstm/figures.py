"""Static PNG panels: input, ground truth and prediction side by side."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .metrics import CUP_LABEL, DISC_LABEL, SegMask

PALETTE = {DISC_LABEL: (230, 120, 20), CUP_LABEL: (250, 220, 40)}


def colorize(mask: SegMask) -> np.ndarray:
    """Label field as RGB uint8: background black, disc orange, cup yellow."""
    rgb = np.zeros(mask.labels.shape + (3,), dtype=np.uint8)
    for label, color in PALETTE.items():
        rgb[mask.labels == label] = color
    return rgb


def segmentation_panel(image: np.ndarray, pred: SegMask, gt: SegMask | None, path: str | Path,
                       gap: int = 4) -> Path:
    """Write ``[input | ground truth | prediction]`` (ground truth omitted when ``None``)."""
    tiles = [np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)]
    if gt is not None:
        tiles.append(colorize(gt))
    tiles.append(colorize(pred))
    h = max(t.shape[0] for t in tiles)
    w = sum(t.shape[1] for t in tiles) + gap * (len(tiles) - 1)
    canvas = np.full((h, w, 3), 255, dtype=np.uint8)
    x = 0
    for t in tiles:
        canvas[:t.shape[0], x:x + t.shape[1]] = t
        x += t.shape[1] + gap
    out = Path(path)
    Image.fromarray(canvas, mode="RGB").save(out, format="PNG")
    return out
