# %% [markdown]
# # Polar view of the optic disc
#
# A phantom fundus crop is unwrapped around the disc centre. In polar form the
# cup, the disc rim and the background become horizontal bands stacked from
# the top row (centre) to the bottom row (crop edge), which is the layout the
# segmentation network sees.

# %%
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from mblstm.data import PhantomConfig, PolarRule, disc_crops, gen_phantom, to_polar_dataset
from mblstm.figures import colorize
from mblstm.metrics import SegMask
from mblstm.polar import PolarMask, from_polar

OUT = Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)

# %% one phantom, one disc-centred crop
sample = gen_phantom(PhantomConfig(seed=0), 3)
crop_img, crop_mask = disc_crops(sample, crop_size=128, n_crops=1)[0]
print("phantom", sample.id, "cdr", round(sample.cdr, 3), "glaucoma", sample.glaucoma)

# %% unwrap at the desk resolution and at the default 400 x 400 grid
for size in (64, 400):
    (polar_img, polar_mask), = to_polar_dataset([(crop_img, crop_mask)], PolarRule(size=size))
    rows_disc = (polar_mask.data >= 1).sum(axis=0)
    rows_cup = (polar_mask.data == 2).sum(axis=0)
    print(f"{size:3d} grid: disc band {rows_disc.min()}..{rows_disc.max()} rows, "
          f"cup band {rows_cup.min()}..{rows_cup.max()} rows")

# %% nearest-neighbour round trip back to the crop
spec = PolarRule(size=400).spec_for(128)
back = from_polar(PolarMask(polar_mask.data, spec), 128, 128, "nearest")
yy, xx = np.mgrid[0:128, 0:128]
inside = np.hypot(xx - spec.center[0], yy - spec.center[1]) < 0.9 * spec.radius
agree = (back[inside] == crop_mask.labels[inside]).mean()
print(f"round-trip agreement inside 0.9 radius: {agree:.4f}")

# %% save a strip: crop, crop labels, polar image, polar labels
polar_rgb = np.round(np.clip(polar_img.data, 0, 1) * 255).astype(np.uint8)
tiles = [
    np.round(crop_img * 255).astype(np.uint8),
    colorize(crop_mask),
    np.asarray(Image.fromarray(polar_rgb).resize((128, 128), Image.NEAREST)),
    np.asarray(Image.fromarray(colorize(SegMask(polar_mask.data))).resize((128, 128), Image.NEAREST)),
]
Image.fromarray(np.concatenate(tiles, axis=1)).save(OUT / "polar_strip.png")
print("wrote", OUT / "polar_strip.png")
