"""Cartesian <-> polar resampling about a disc centre.

Rows of the polar image index radius and columns index angle, so concentric
structures (cup inside disc inside background) become horizontal bands.
Pixel centres sit at integer coordinates; ``x`` is the column and ``y`` the
row. Polar sample ``(r, t)`` reads the source at::

    rho = (r + 0.5) / R * radius
    phi = 2 * pi * (t + 0.5) / Theta
    (x, y) = (cx + rho * cos(phi), cy + rho * sin(phi))

Samples falling outside the source take the background value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

INTERPOLATIONS = ("bilinear", "nearest")


@dataclass(frozen=True)
class PolarSpec:
    center: tuple[float, float]
    radius: float
    radial_samples: int = 400
    angular_samples: int = 400

    def validate(self, height: int | None = None, width: int | None = None) -> None:
        if not self.radius > 0:
            raise ContractError(f"polar radius must be positive, got {self.radius}")
        if self.radial_samples < 2 or self.angular_samples < 2:
            raise ContractError("polar grid needs at least 2 radial and 2 angular samples")
        if height is not None and width is not None:
            cx, cy = self.center
            if not (0 <= cx <= width - 1 and 0 <= cy <= height - 1):
                raise ContractError(f"polar centre {self.center} outside a {height}x{width} image")


@dataclass
class PolarImage:
    """Resampled intensities, shape (R, Theta) or (R, Theta, channels)."""

    data: np.ndarray
    spec: PolarSpec


@dataclass
class PolarMask(PolarImage):
    """Resampled integer labels, always nearest-neighbour."""


def _is_label_array(a: np.ndarray) -> bool:
    return np.issubdtype(a.dtype, np.integer) or a.dtype == bool


def _sample(src: np.ndarray, x: np.ndarray, y: np.ndarray, interp: str, background) -> np.ndarray:
    """Sample ``src`` (H, W[, C]) at float coordinates with constant-background borders."""
    h, w = src.shape[:2]
    extra = src.shape[2:]
    if interp == "nearest":
        xi = np.floor(x + 0.5).astype(np.int64)
        yi = np.floor(y + 0.5).astype(np.int64)
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out = np.empty(x.shape + extra, dtype=src.dtype)
        out[...] = background
        out[inside] = src[yi[inside], xi[inside]]
        return out

    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    padded = np.empty((h + 2, w + 2) + extra, dtype=np.float64)
    padded[...] = background
    padded[1:-1, 1:-1] = src
    # shift into padded coordinates and clip so far-away points read background
    x0p = np.clip(x0 + 1, 0, w + 1)
    y0p = np.clip(y0 + 1, 0, h + 1)
    x1p = np.clip(x0 + 2, 0, w + 1)
    y1p = np.clip(y0 + 2, 0, h + 1)
    if extra:
        fx = fx[..., None]
        fy = fy[..., None]
    out = (
        padded[y0p, x0p] * (1 - fx) * (1 - fy)
        + padded[y0p, x1p] * fx * (1 - fy)
        + padded[y1p, x0p] * (1 - fx) * fy
        + padded[y1p, x1p] * fx * fy
    )
    return out


def polar_grid(spec: PolarSpec) -> tuple[np.ndarray, np.ndarray]:
    """Cartesian (x, y) sample coordinates for every polar pixel, each (R, Theta)."""
    r = (np.arange(spec.radial_samples) + 0.5) / spec.radial_samples * spec.radius
    phi = 2 * np.pi * (np.arange(spec.angular_samples) + 0.5) / spec.angular_samples
    cx, cy = spec.center
    x = cx + r[:, None] * np.cos(phi)[None, :]
    y = cy + r[:, None] * np.sin(phi)[None, :]
    return x, y


def to_polar(image: np.ndarray, spec: PolarSpec, interp: str = "bilinear", background=0) -> PolarImage:
    """Resample a Cartesian image or label mask onto the polar grid of ``spec``.

    Integer or boolean inputs are treated as label masks: they must use
    nearest interpolation and come back as a :class:`PolarMask`.
    """
    image = np.asarray(image)
    if interp not in INTERPOLATIONS:
        raise ContractError(f"interp must be one of {INTERPOLATIONS}, got {interp!r}")
    if image.ndim not in (2, 3):
        raise ContractError(f"to_polar expects (H, W) or (H, W, C), got shape {image.shape}")
    spec.validate(*image.shape[:2])
    x, y = polar_grid(spec)
    if _is_label_array(image):
        if interp != "nearest":
            raise ContractError("label masks must be resampled with nearest interpolation")
        return PolarMask(_sample(image, x, y, "nearest", background), spec)
    data = _sample(image.astype(np.float64, copy=False), x, y, interp, background)
    return PolarImage(data, spec)


def from_polar(polar: PolarImage, out_height: int, out_width: int, interp: str | None = None, background=0) -> np.ndarray:
    """Map a polar image back onto an ``out_height x out_width`` Cartesian grid.

    Pixels farther than ``spec.radius`` from the centre get ``background``.
    Angle wraps around; radius is clamped to the first/last row. Masks always
    use nearest interpolation.
    """
    spec = polar.spec
    data = np.asarray(polar.data)
    is_mask = isinstance(polar, PolarMask) or _is_label_array(data)
    if interp is None:
        interp = "nearest" if is_mask else "bilinear"
    if interp not in INTERPOLATIONS:
        raise ContractError(f"interp must be one of {INTERPOLATIONS}, got {interp!r}")
    if is_mask and interp != "nearest":
        raise ContractError("label masks must be resampled with nearest interpolation")
    spec.validate()
    n_r, n_t = spec.radial_samples, spec.angular_samples
    cx, cy = spec.center
    yy, xx = np.mgrid[0:out_height, 0:out_width].astype(np.float64)
    dx = xx - cx
    dy = yy - cy
    rho = np.hypot(dx, dy)
    phi = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    r = rho / spec.radius * n_r - 0.5
    t = phi / (2 * np.pi) * n_t - 0.5
    inside = rho <= spec.radius

    extra = data.shape[2:]
    out = np.empty((out_height, out_width) + extra, dtype=data.dtype if is_mask else np.float64)
    out[...] = background
    r = r[inside]
    t = t[inside]
    if interp == "nearest":
        ri = np.clip(np.floor(r + 0.5).astype(np.int64), 0, n_r - 1)
        ti = np.mod(np.floor(t + 0.5).astype(np.int64), n_t)
        out[inside] = data[ri, ti]
        return out

    r = np.clip(r, 0, n_r - 1)
    r0 = np.minimum(np.floor(r).astype(np.int64), n_r - 2)
    fr = r - r0
    t0f = np.floor(t)
    ft = t - t0f
    t0 = np.mod(t0f.astype(np.int64), n_t)
    t1 = np.mod(t0 + 1, n_t)
    src = data.astype(np.float64, copy=False)
    if extra:
        fr = fr[..., None]
        ft = ft[..., None]
    out[inside] = (
        src[r0, t0] * (1 - fr) * (1 - ft)
        + src[r0, t1] * (1 - fr) * ft
        + src[r0 + 1, t0] * fr * (1 - ft)
        + src[r0 + 1, t1] * fr * ft
    )
    return out
