"""Synthetic fundus phantoms, dataset I/O, disc localisation, cropping and splitting.

On-disk dataset layout (written by :func:`write_dataset`, read by
:func:`read_dataset`)::

    <root>/manifest.txt        # "# id<TAB>image<TAB>mask<TAB>glaucoma" then one row per sample
    <root>/images/<id>.png     # 8-bit RGB
    <root>/masks/<id>.png      # 8-bit grayscale, values per LabelMap

:func:`load_refuge_dir` reads the same ``images/`` + ``masks/`` pairing without
a manifest, matching files by stem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ContractError
from .metrics import BACKGROUND, CUP_LABEL, DISC_LABEL, SegMask
from .polar import PolarImage, PolarMask, PolarSpec, to_polar
from .tensor import rng

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class LabelMap:
    """Raw grey value used for each class in mask files."""

    background: int = 255
    disc: int = 128
    cup: int = 0

    def encode(self, labels: np.ndarray) -> np.ndarray:
        raw = np.empty(labels.shape, dtype=np.uint8)
        raw[labels == BACKGROUND] = self.background
        raw[labels == DISC_LABEL] = self.disc
        raw[labels == CUP_LABEL] = self.cup
        return raw

    def decode(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw)
        labels = np.zeros(raw.shape, dtype=np.uint8)
        known = np.zeros(raw.shape, dtype=bool)
        for value, label in ((self.background, BACKGROUND), (self.disc, DISC_LABEL), (self.cup, CUP_LABEL)):
            hit = raw == value
            labels[hit] = label
            known |= hit
        if not known.all():
            bad = sorted(int(v) for v in np.unique(raw[~known]))
            raise ContractError(f"mask contains unmapped values {bad[:8]}")
        return labels


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    mask: SegMask
    glaucoma: bool | None = None
    cdr: float | None = None  # generator's intended vertical CDR, phantoms only

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.labels.shape:
            raise ContractError(f"sample {self.id}: image {self.image.shape[:2]} and mask {self.mask.labels.shape} differ")


# ------------------------------------------------------------------ phantoms


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 256
    disc_radius: tuple[float, float] = (38.0, 46.0)  # vertical semi-axis, px
    disc_aspect: tuple[float, float] = (0.88, 1.0)  # horizontal / vertical semi-axis
    cdr_range: tuple[float, float] = (0.3, 0.8)
    cdr_margin: float = 0.05  # keeps every phantom this far from the 0.5 decision boundary
    cdr: float | None = None  # fixed CDR for every phantom; overrides cdr_range and glaucoma_fraction
    glaucoma_fraction: float = 0.1
    cup_aspect: tuple[float, float] = (0.9, 1.05)
    cup_offset: float = 0.08  # max horizontal cup shift, fraction of disc width
    center_jitter: float = 40.0
    center: tuple[float, float] | None = None  # fixed disc centre (x, y) overrides jitter
    vessel_count: int = 6
    vessel_width: tuple[float, float] = (1.5, 3.5)
    noise_amplitude: float = 0.04
    gradient_amplitude: float = 0.15
    edge_blur: float = 1.2
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.cdr_range
        if self.cdr is not None and not 0 < self.cdr < 1:
            raise ContractError(f"cdr must lie inside (0, 1), got {self.cdr}")
        if not (0 < lo < hi < 1):
            raise ContractError(f"cdr_range must lie inside (0, 1), got {self.cdr_range}")
        if not (lo < 0.5 - self.cdr_margin and 0.5 + self.cdr_margin < hi):
            raise ContractError("cdr_range must straddle 0.5 by more than cdr_margin")
        if not 0 <= self.glaucoma_fraction <= 1:
            raise ContractError("glaucoma_fraction must be in [0, 1]")
        reach = self.disc_radius[1] + (0 if self.center is not None else self.center_jitter)
        if reach >= self.image_size / 2 and self.center is None:
            raise ContractError("disc does not fit inside the image at maximum jitter")


def is_glaucoma_index(index: int, fraction: float) -> bool:
    """Exactly ``floor(n * fraction)`` of the first ``n`` indices are glaucomatous."""
    return math.floor((index + 1) * fraction + 1e-9) > math.floor(index * fraction + 1e-9)


def _ellipse(h: int, w: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _smooth_noise(gen: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = gen.standard_normal((cells + 1, cells + 1))
    return ndimage.zoom(coarse, size / (cells + 1), order=3)[:size, :size]


def _vessel_layer(gen: np.random.Generator, size: int, cx: float, cy: float, cfg: PhantomConfig) -> np.ndarray:
    """Opacity map in [0, 1] of curved vessels radiating from near the disc centre."""
    layer = np.zeros((size, size))
    for _ in range(cfg.vessel_count):
        angle = gen.uniform(0, 2 * np.pi)
        bend = gen.uniform(-0.012, 0.012)
        width = gen.uniform(*cfg.vessel_width)
        x, y = cx, cy
        track = np.zeros((size, size), dtype=bool)
        for _ in range(int(size * 1.5)):
            xi, yi = int(round(x)), int(round(y))
            if not (0 <= xi < size and 0 <= yi < size):
                break
            track[yi, xi] = True
            x += np.cos(angle)
            y += np.sin(angle)
            angle += bend
        dist = ndimage.distance_transform_edt(~track)
        layer = np.maximum(layer, np.clip(width / 2 + 0.5 - dist, 0, 1))
    return layer


def gen_phantom(cfg: PhantomConfig, index: int) -> Sample:
    """Deterministic synthetic fundus crop with exact disc/cup ground truth."""
    cfg.validate()
    gen = np.random.Generator(np.random.Philox(key=[cfg.seed, index]))
    size = cfg.image_size
    glaucoma = is_glaucoma_index(index, cfg.glaucoma_fraction)
    lo, hi = cfg.cdr_range
    if cfg.cdr is not None:
        cdr = cfg.cdr
        glaucoma = cdr > 0.5
    elif glaucoma:
        cdr = gen.uniform(0.5 + cfg.cdr_margin, hi)
    else:
        cdr = gen.uniform(lo, 0.5 - cfg.cdr_margin)

    disc_ry = gen.uniform(*cfg.disc_radius)
    disc_rx = disc_ry * gen.uniform(*cfg.disc_aspect)
    cup_ry = cdr * disc_ry
    cup_rx = min(cup_ry * gen.uniform(*cfg.cup_aspect), 0.92 * disc_rx)
    room = max(disc_rx - cup_rx - 1.0, 0.0)
    offset = gen.uniform(-1, 1) * min(cfg.cup_offset * disc_rx, room)
    if cfg.center is not None:
        cx, cy = cfg.center
    else:
        cx = (size - 1) / 2 + gen.uniform(-cfg.center_jitter, cfg.center_jitter)
        cy = (size - 1) / 2 + gen.uniform(-cfg.center_jitter, cfg.center_jitter)

    disc = _ellipse(size, size, cx, cy, disc_rx, disc_ry)
    cup = _ellipse(size, size, cx + offset, cy, cup_rx, cup_ry) & disc
    labels = np.full((size, size), BACKGROUND, dtype=np.uint8)
    labels[disc] = DISC_LABEL
    labels[cup] = CUP_LABEL

    yy, xx = np.mgrid[0:size, 0:size] / size
    tilt = gen.uniform(0, 2 * np.pi)
    illum = 1.0 + cfg.gradient_amplitude * ((xx - 0.5) * np.cos(tilt) + (yy - 0.5) * np.sin(tilt)) * 2
    illum -= 0.25 * ((xx - 0.5) ** 2 + (yy - 0.5) ** 2)
    soft_disc = ndimage.gaussian_filter(disc.astype(float), cfg.edge_blur)
    soft_cup = ndimage.gaussian_filter(cup.astype(float), cfg.edge_blur)
    base = np.array([0.55, 0.22, 0.10]) * gen.uniform(0.9, 1.1)
    disc_tint = np.array([0.30, 0.35, 0.25])
    cup_tint = np.array([0.08, 0.22, 0.25])
    yy_px, xx_px = np.mgrid[0:size, 0:size]
    cup_r2 = ((xx_px - cx - offset) / cup_rx) ** 2 + ((yy_px - cy) / cup_ry) ** 2
    disc_r2 = ((xx_px - cx) / disc_rx) ** 2 + ((yy_px - cy) / disc_ry) ** 2
    # pale depression: brightness peaks at the cup centre
    cup_shade = soft_cup * (1.2 - 0.4 * np.minimum(cup_r2, 1.0))
    disc_shade = soft_disc * (1.1 - 0.2 * np.minimum(disc_r2, 1.0))
    img = (base[None, None, :] * illum[..., None]
           + disc_shade[..., None] * disc_tint
           + cup_shade[..., None] * cup_tint)
    # vessels leave the disc from a trunk beside the cup centre and are fainter over the disc
    trunk = gen.uniform(0, 2 * np.pi)
    vx = cx + offset + 0.3 * cup_rx * np.cos(trunk)
    vy = cy + 0.3 * cup_ry * np.sin(trunk)
    vessels = _vessel_layer(gen, size, vx, vy, cfg) * (1.0 - 0.7 * soft_disc)
    img *= 1.0 - 0.45 * vessels[..., None] * np.array([0.6, 1.0, 1.0])
    texture = _smooth_noise(gen, size, 12)
    img += cfg.noise_amplitude * (texture * (1.0 - 0.6 * soft_disc))[..., None]
    img += 0.5 * cfg.noise_amplitude * gen.standard_normal(img.shape)
    # quantise to 8 bits so PNG storage is lossless
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    return Sample(f"phantom_{cfg.seed}_{index:05d}", img.astype(np.float32), SegMask(labels), glaucoma, float(cdr))


def gen_dataset(cfg: PhantomConfig, count: int) -> list[Sample]:
    return [gen_phantom(cfg, i) for i in range(count)]


# ------------------------------------------------------------------ file I/O


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_mask(path: str | Path, label_map: LabelMap) -> SegMask:
    with Image.open(path) as im:
        raw = np.asarray(im.convert("L"))
    return SegMask(label_map.decode(raw))


def write_mask(path: str | Path, mask: SegMask, label_map: LabelMap) -> None:
    Image.fromarray(label_map.encode(mask.labels), mode="L").save(path, format="PNG")


def write_dataset(samples: Sequence[Sample], out_dir: str | Path, label_map: LabelMap = LabelMap()) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = ["# id\timage\tmask\tglaucoma"]
    for s in samples:
        img_rel, mask_rel = f"images/{s.id}.png", f"masks/{s.id}.png"
        write_image(out / img_rel, s.image)
        write_mask(out / mask_rel, s.mask, label_map)
        flag = "" if s.glaucoma is None else str(int(s.glaucoma))
        lines.append(f"{s.id}\t{img_rel}\t{mask_rel}\t{flag}")
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_dataset(path: str | Path, label_map: LabelMap = LabelMap()) -> list[Sample]:
    """Load every sample listed in a manifest (``path`` is the file or its directory)."""
    manifest = Path(path)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    root = manifest.parent
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ContractError(f"{manifest}:{lineno}: expected 4 tab-separated fields")
        sid, img, msk, flag = parts
        glaucoma = None if flag == "" else bool(int(flag))
        samples.append(Sample(sid, read_image(root / img), read_mask(root / msk, label_map), glaucoma))
    return samples


class LoadResult(NamedTuple):
    samples: list[Sample]
    errors: list[tuple[str, str]]  # (file, reason)


def load_refuge_dir(path: str | Path, label_map: LabelMap = LabelMap()) -> LoadResult:
    """Pair ``images/<stem>.*`` with ``masks/<stem>.*``; every unusable file is reported."""
    root = Path(path)
    images = {p.stem: p for p in sorted((root / "images").glob("*")) if p.suffix.lower() in IMAGE_SUFFIXES}
    masks = {p.stem: p for p in sorted((root / "masks").glob("*")) if p.suffix.lower() in IMAGE_SUFFIXES}
    samples: list[Sample] = []
    errors: list[tuple[str, str]] = []
    for stem in sorted(set(images) | set(masks)):
        if stem not in masks:
            errors.append((str(images[stem]), "no matching mask"))
            continue
        if stem not in images:
            errors.append((str(masks[stem]), "no matching image"))
            continue
        try:
            image = read_image(images[stem])
        except Exception as exc:  # noqa: BLE001 - any decoder failure is a per-file error
            errors.append((str(images[stem]), f"unreadable image: {exc}"))
            continue
        try:
            mask = read_mask(masks[stem], label_map)
        except ContractError as exc:
            errors.append((str(masks[stem]), str(exc)))
            continue
        except Exception as exc:  # noqa: BLE001
            errors.append((str(masks[stem]), f"unreadable mask: {exc}"))
            continue
        if image.shape[:2] != mask.labels.shape:
            errors.append((str(masks[stem]), "image and mask sizes differ"))
            continue
        samples.append(Sample(stem, image, mask))
    return LoadResult(samples, errors)


# ----------------------------------------------------------- localisation


class DiscLocation(NamedTuple):
    cx: float
    cy: float
    fallback: bool = False


def localize_disc(image: np.ndarray) -> DiscLocation:
    """Centroid of the brightest blob in the smoothed green channel.

    The green channel is box-blurred (radius ``size / 32``) and thresholded at
    its 99th percentile; the connected component with the highest mean
    intensity wins. A uniform image falls back to the image centre with
    ``fallback=True``.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    green = image[..., 1] if image.ndim == 3 else image
    radius = max(1, int(round(max(h, w) / 32)))
    smooth = ndimage.uniform_filter(green.astype(np.float64), size=2 * radius + 1, mode="nearest")
    centre = DiscLocation((w - 1) / 2, (h - 1) / 2, True)
    if np.ptp(smooth) < 1e-9:
        return centre
    thresh = np.percentile(smooth, 99)
    blobs, count = ndimage.label(smooth >= thresh)
    if count == 0:
        return centre
    ids = np.arange(1, count + 1)
    means = ndimage.mean(smooth, blobs, ids)
    best = ids[int(np.argmax(means))]
    cy, cx = ndimage.center_of_mass(blobs == best)
    return DiscLocation(float(cx), float(cy), False)


def disc_centroid(mask: SegMask) -> tuple[float, float]:
    ys, xs = np.nonzero(mask.disc)
    if ys.size == 0:
        raise ContractError("mask has no disc pixels")
    return float(xs.mean()), float(ys.mean())


# ----------------------------------------------------------------- cropping


def crop_origin(shape: tuple[int, int], center: tuple[float, float], size: int) -> tuple[int, int]:
    """Top-left (x0, y0) of a ``size`` crop centred on ``center``, clamped into the image."""
    h, w = shape
    if size > h or size > w:
        raise ContractError(f"crop size {size} exceeds image {h}x{w}")
    half = (size - 1) / 2
    x0 = int(np.clip(math.floor(center[0] - half + 0.5), 0, w - size))
    y0 = int(np.clip(math.floor(center[1] - half + 0.5), 0, h - size))
    return x0, y0


def crop(sample: Sample, origin: tuple[int, int], size: int) -> tuple[np.ndarray, SegMask]:
    x0, y0 = origin
    return sample.image[y0:y0 + size, x0:x0 + size], SegMask(sample.mask.labels[y0:y0 + size, x0:x0 + size])


def disc_crops(sample: Sample, crop_size: int, n_crops: int = 5, jitter: int = 0, seed: int = 0,
               center: tuple[float, float] | None = None) -> list[tuple[np.ndarray, SegMask]]:
    """One crop on the disc centre (ground truth by default) plus ``n_crops - 1`` jittered ones."""
    h, w = sample.mask.labels.shape
    if crop_size > h or crop_size > w:
        raise ContractError(f"crop size {crop_size} exceeds image {h}x{w}")
    if n_crops < 1:
        raise ContractError("n_crops must be >= 1")
    if center is None:
        center = disc_centroid(sample.mask)
    gen = rng(seed)
    out = [crop(sample, crop_origin((h, w), center, crop_size), crop_size)]
    for _ in range(n_crops - 1):
        dx, dy = gen.integers(-jitter, jitter + 1, size=2) if jitter > 0 else (0, 0)
        c = (center[0] + float(dx), center[1] + float(dy))
        out.append(crop(sample, crop_origin((h, w), c, crop_size), crop_size))
    return out


# ---------------------------------------------------------------- splitting


def split(samples: Sequence, train_fraction: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle then cut; ``|train| = round(fraction * n)`` kept within [1, n - 1]."""
    n = len(samples)
    if not 0 < train_fraction < 1:
        raise ContractError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if n < 2:
        raise ContractError(f"need at least 2 samples to split, got {n}")
    n_train = min(max(int(math.floor(train_fraction * n + 0.5)), 1), n - 1)
    order = rng(seed).permutation(n)
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


# ------------------------------------------------------------------ polar


@dataclass(frozen=True)
class PolarRule:
    """How a square crop becomes a polar image: centred, radius half the crop side."""

    size: int = 64
    image_interp: str = "bilinear"

    def spec_for(self, crop_size: int) -> PolarSpec:
        c = (crop_size - 1) / 2
        return PolarSpec((c, c), crop_size / 2, self.size, self.size)


def to_polar_dataset(crops: Sequence[tuple[np.ndarray, SegMask]], rule: PolarRule = PolarRule()
                     ) -> list[tuple[PolarImage, PolarMask]]:
    out = []
    for image, mask in crops:
        h, w = image.shape[:2]
        if h != w:
            raise ContractError(f"polar conversion needs square crops, got {h}x{w}")
        spec = rule.spec_for(h)
        out.append((to_polar(image, spec, rule.image_interp), to_polar(mask.labels, spec, "nearest")))
    return out


def standardize(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Zero-mean, unit-variance per image and channel of an (M, C, H, W) stack.

    Applied to every network input (training and inference) so optimisation
    does not depend on the overall brightness of a fundus crop.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=(2, 3), keepdims=True)
    std = x.std(axis=(2, 3), keepdims=True)
    return (x - mean) / (std + eps)


def polar_input(polar: PolarImage) -> np.ndarray:
    """One polar RGB image as a standardized network input (3, S, S)."""
    return standardize(np.moveaxis(np.asarray(polar.data, dtype=np.float64), -1, 0)[None])[0]


def polar_arrays(pairs: Sequence[tuple[PolarImage, PolarMask]]) -> tuple[np.ndarray, np.ndarray]:
    """Stack polar pairs into network inputs (M, 3, S, S) and targets (M, 2, S, S).

    Inputs are standardized (see :func:`standardize`). Target channel 0 is
    disc-or-cup, channel 1 is cup.
    """
    x = np.stack([polar_input(p) for p, _ in pairs])
    labels = np.stack([m.data for _, m in pairs])
    y = np.stack([labels >= DISC_LABEL, labels == CUP_LABEL], axis=1).astype(np.float64)
    return x, y
