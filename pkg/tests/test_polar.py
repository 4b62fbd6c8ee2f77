from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mblstm.data import PhantomConfig, disc_centroid, gen_phantom
from mblstm.errors import ContractError
from mblstm.polar import PolarMask, PolarSpec, from_polar, polar_grid, to_polar
from mblstm.verify import polar_roundtrip_agreement


def centered_spec(n: int, radius: float, R: int = 32, theta: int = 64) -> PolarSpec:
    return PolarSpec(((n - 1) / 2, (n - 1) / 2), radius, R, theta)


def test_grid_follows_mapping():
    spec = PolarSpec((10.0, 12.0), 8.0, 4, 8)
    x, y = polar_grid(spec)
    rho = (2 + 0.5) / 4 * 8.0
    phi = 2 * np.pi * (5 + 0.5) / 8
    assert x[2, 5] == pytest.approx(10 + rho * np.cos(phi))
    assert y[2, 5] == pytest.approx(12 + rho * np.sin(phi))


@pytest.mark.parametrize("interp", ["bilinear", "nearest"])
def test_constant_image_gives_constant_polar(interp):
    img = np.full((41, 41, 3), 0.7)
    polar = to_polar(img, centered_spec(41, 18), interp)
    assert polar.data.shape == (32, 64, 3)
    assert np.allclose(polar.data, 0.7)


def test_out_of_bounds_takes_background():
    img = np.ones((21, 21))
    polar = to_polar(img, centered_spec(21, 20), "bilinear", background=0.0)
    assert np.allclose(polar.data[0], 1.0)  # innermost ring fully inside
    assert polar.data[-1].min() == 0.0  # outer ring leaves the 21x21 image


def test_centered_circle_fills_top_half_of_rows():
    n, radius, R = 129, 60.0, 40
    yy, xx = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    circle = (np.hypot(xx - c, yy - c) <= 0.5 * radius).astype(np.uint8)
    polar = to_polar(circle, centered_spec(n, radius, R, 64), "nearest")
    fg_rows = np.flatnonzero(polar.data.all(axis=1))
    bg_rows = np.flatnonzero((polar.data == 0).all(axis=1))
    # rows 0 .. R/2-1 foreground, rest background, allowing one row of boundary jitter
    assert fg_rows.max() >= R // 2 - 2 and fg_rows.min() == 0
    assert bg_rows.min() <= R // 2 + 1 and bg_rows.max() == R - 1
    assert np.array_equal(fg_rows, np.arange(fg_rows.max() + 1))


def test_labels_stay_labels():
    mask = (np.random.default_rng(0).random((30, 30)) < 0.5)
    polar = to_polar(mask, centered_spec(30, 14), "nearest")
    assert isinstance(polar, PolarMask)
    assert set(np.unique(polar.data)) <= {0, 1}
    with pytest.raises(ContractError):
        to_polar(mask.astype(np.uint8), centered_spec(30, 14), "bilinear")


def test_spec_validation():
    with pytest.raises(ContractError):
        to_polar(np.zeros((10, 10)), PolarSpec((5, 5), 0.0))
    with pytest.raises(ContractError):
        to_polar(np.zeros((10, 10)), PolarSpec((5, 5), 4.0, 1, 8))
    with pytest.raises(ContractError):
        to_polar(np.zeros((10, 10)), PolarSpec((12, 5), 4.0))


@pytest.mark.parametrize("interp", ["bilinear", "nearest"])
def test_constant_round_trip(interp):
    img = np.full((40, 40), 0.3)
    spec = centered_spec(40, 19)
    back = from_polar(to_polar(img, spec, interp), 40, 40, interp)
    yy, xx = np.mgrid[0:40, 0:40]
    inside = np.hypot(xx - 19.5, yy - 19.5) <= 19
    assert np.allclose(back[inside], 0.3)
    assert np.all(back[~inside] == 0)


def test_phantom_round_trip_at_default_resolution():
    for i in range(10):
        s = gen_phantom(PhantomConfig(), i)
        spec = PolarSpec(disc_centroid(s.mask), 64.0)
        assert polar_roundtrip_agreement(s.mask.labels, spec) >= 0.99


def test_phantom_round_trip_at_desk_resolution_frozen():
    # 64x64 polar grid over a 64 px radius: coarser, frozen at its measured floor
    worst = min(polar_roundtrip_agreement(gen_phantom(PhantomConfig(), i).mask.labels,
                                          PolarSpec(disc_centroid(gen_phantom(PhantomConfig(), i).mask), 64.0, 64, 64))
                for i in range(10))
    assert worst >= 0.985


def test_top_rows_polar_mask_inverts_to_disc_area():
    R, radius, n = 400, 50.0, 121
    data = np.zeros((R, 400), dtype=np.uint8)
    data[: R // 2 + 1] = 1  # rows 0 .. R/2 inclusive
    spec = centered_spec(n, radius, R, 400)
    back = from_polar(PolarMask(data, spec), n, n)
    area = int(back.sum())
    expected = np.pi * (radius / 2) ** 2
    assert abs(area - expected) / expected < 0.03


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 3))
def test_rot90_shifts_columns(seed, k):
    """Rotation by k quarter turns about a grid-symmetric centre is a circular column shift."""
    img = np.random.default_rng(seed).integers(0, 3, (33, 33)).astype(np.uint8)
    spec = PolarSpec((16.0, 16.0), 15.0, 20, 64)
    p = to_polar(img, spec, "nearest").data
    q = to_polar(np.rot90(img, k), spec, "nearest").data
    assert np.array_equal(q, np.roll(p, -16 * k, axis=1))


def test_phantom_labels_form_radial_bands():
    """Along every angle the labels only step down: cup, then disc, then background."""
    cfg = PhantomConfig(cup_offset=0.0)
    for i in range(5):
        s = gen_phantom(cfg, i)
        spec = PolarSpec(disc_centroid(s.mask), 60.0, 64, 64)
        polar = to_polar(s.mask.labels, spec, "nearest").data.astype(int)
        assert np.all(np.diff(polar, axis=0) <= 0)
