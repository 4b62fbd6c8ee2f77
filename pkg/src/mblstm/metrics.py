"""Segmentation metrics, vertical cup-to-disc ratio and report serialisation.

Disc dice compares disc-or-cup pixels (the anatomical disc contains the cup);
cup dice compares cup pixels. Pixel accuracy is the fraction of pixels whose
3-class label matches.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, UndefinedCdrError

BACKGROUND, DISC_LABEL, CUP_LABEL = 0, 1, 2
LABELS = (BACKGROUND, DISC_LABEL, CUP_LABEL)
GLAUCOMA_CDR_THRESHOLD = 0.5

REPORT_COLUMNS = ("id", "disc_dice", "cup_dice", "accuracy", "vcdr", "flag")
SUMMARY_FIELDS = ("cup_dice", "disc_dice", "accuracy", "mean_vcdr", "suspect_count", "n")


@dataclass
class SegMask:
    """Per-pixel labels: 0 background, 1 disc, 2 cup (cup lies inside the disc)."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise ContractError(f"SegMask labels must be 2-D, got shape {self.labels.shape}")
        if self.labels.size and self.labels.max() > CUP_LABEL:
            raise ContractError(f"SegMask labels must be in {LABELS}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def disc(self) -> np.ndarray:
        """Disc region including the cup."""
        return self.labels >= DISC_LABEL

    @property
    def cup(self) -> np.ndarray:
        return self.labels == CUP_LABEL


def _as_labels(m) -> np.ndarray:
    return m.labels if isinstance(m, SegMask) else np.asarray(m)


def dice(pred_region: np.ndarray, gt_region: np.ndarray) -> float:
    """``2|A n B| / (|A| + |B|)``; two empty regions score 1."""
    a = np.asarray(pred_region, dtype=bool)
    b = np.asarray(gt_region, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"dice: region shapes {a.shape} and {b.shape} differ")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def disc_dice(pred: SegMask, gt: SegMask) -> float:
    return dice(pred.disc, gt.disc)


def cup_dice(pred: SegMask, gt: SegMask) -> float:
    return dice(pred.cup, gt.cup)


def pixel_accuracy(pred, gt) -> float:
    a, b = _as_labels(pred), _as_labels(gt)
    if a.shape != b.shape:
        raise ContractError(f"pixel_accuracy: mask shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        raise ContractError("pixel_accuracy: empty masks")
    return float((a == b).sum()) / a.size


def _row_span(region: np.ndarray) -> int:
    rows = np.flatnonzero(region.any(axis=1))
    return 0 if rows.size == 0 else int(rows[-1] - rows[0] + 1)


def vertical_cdr(mask) -> float:
    """Cup row extent over disc row extent (both inclusive).

    Raises :class:`UndefinedCdrError` when the mask has no disc pixels.
    """
    labels = _as_labels(mask)
    disc_span = _row_span(labels >= DISC_LABEL)
    if disc_span == 0:
        raise UndefinedCdrError("vertical CDR undefined: mask contains no disc pixels")
    return _row_span(labels == CUP_LABEL) / disc_span


def glaucoma_flag(vcdr: float) -> bool:
    """Suspect glaucoma when the vertical CDR is strictly greater than 0.5."""
    return vcdr > GLAUCOMA_CDR_THRESHOLD


@dataclass
class CdrReport:
    id: str
    disc_dice: float
    cup_dice: float
    pixel_accuracy: float
    vcdr: float | None
    glaucoma_suspect: bool

    def row(self) -> list:
        vcdr = "" if self.vcdr is None else f"{self.vcdr:.6f}"
        return [self.id, f"{self.disc_dice:.6f}", f"{self.cup_dice:.6f}", f"{self.pixel_accuracy:.6f}", vcdr,
                int(self.glaucoma_suspect)]


def report(sample_id: str, pred: SegMask, gt: SegMask) -> CdrReport:
    """Compare a predicted mask with ground truth; an empty predicted disc leaves vCDR undefined."""
    try:
        vcdr: float | None = vertical_cdr(pred)
    except UndefinedCdrError:
        vcdr = None
    return CdrReport(
        id=sample_id,
        disc_dice=disc_dice(pred, gt),
        cup_dice=cup_dice(pred, gt),
        pixel_accuracy=pixel_accuracy(pred, gt),
        vcdr=vcdr,
        glaucoma_suspect=vcdr is not None and glaucoma_flag(vcdr),
    )


@dataclass
class Summary:
    cup_dice: float
    disc_dice: float
    accuracy: float
    mean_vcdr: float | None
    suspect_count: int
    n: int
    undefined_vcdr: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in SUMMARY_FIELDS}


def aggregate(reports: Sequence[CdrReport]) -> Summary:
    """Field-wise means; images with undefined vCDR are left out of the vCDR mean and counted."""
    if not reports:
        raise ContractError("aggregate needs at least one report")
    vcdrs = [r.vcdr for r in reports if r.vcdr is not None]
    return Summary(
        cup_dice=float(np.mean([r.cup_dice for r in reports])),
        disc_dice=float(np.mean([r.disc_dice for r in reports])),
        accuracy=float(np.mean([r.pixel_accuracy for r in reports])),
        mean_vcdr=float(np.mean(vcdrs)) if vcdrs else None,
        suspect_count=sum(bool(r.glaucoma_suspect) for r in reports),
        n=len(reports),
        undefined_vcdr=len(reports) - len(vcdrs),
    )


def write_reports_csv(reports: Iterable[CdrReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerow(r.row())


def read_reports_csv(path: str | Path) -> list[CdrReport]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(CdrReport(
                id=row["id"],
                disc_dice=float(row["disc_dice"]),
                cup_dice=float(row["cup_dice"]),
                pixel_accuracy=float(row["accuracy"]),
                vcdr=float(row["vcdr"]) if row["vcdr"] else None,
                glaucoma_suspect=bool(int(row["flag"])),
            ))
    return out


def write_summary_json(summary: Summary, path: str | Path) -> None:
    data = summary.to_json()
    if data["mean_vcdr"] is not None and math.isnan(data["mean_vcdr"]):
        data["mean_vcdr"] = None
    Path(path).write_text(json.dumps(data, indent=2) + "\n")
