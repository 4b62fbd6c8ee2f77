# %% [markdown]
# # A short desk training run
#
# Generates a small phantom set, trains the desk network for a couple of
# epochs, scores the held-out images in Cartesian space and writes one
# input / ground truth / prediction panel. The full desk preset
# (`mblstm train --preset desk`) uses 200 images and 6 epochs.

# %%
from __future__ import annotations

from pathlib import Path

from mblstm import tensor as T
from mblstm.data import PhantomConfig, gen_dataset, split
from mblstm.figures import segmentation_panel
from mblstm.metrics import glaucoma_flag, vertical_cdr
from mblstm.network import NetworkConfig, build
from mblstm.trainer import EvalOptions, TrainConfig, build_training_set, evaluate, segment_image, train

OUT = Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)
T.set_precision("single")

# %% data: 40 phantoms, 10% glaucoma, 80/20 split, 5 jittered crops per training image
samples = gen_dataset(PhantomConfig(glaucoma_fraction=0.1, seed=0), 40)
train_set, val_set = split(samples, 0.8, seed=0)
options = EvalOptions()
data = build_training_set(train_set, options.crop_size, 5, 8, options.rule)
print("training arrays", data[0].shape, data[1].shape, "validation images", len(val_set))

# %% train
model = build(NetworkConfig(depth=2, base_channels=8, input_size=options.rule.size))
model, log = train(model, data, TrainConfig(epochs=2), validation=val_set, eval_options=options,
                   progress=lambda e: print(f"epoch {e.epoch}  loss {e.train_loss:.4f}  "
                                            f"val cup {e.val_cup_dice:.4f}  disc {e.val_disc_dice:.4f}  "
                                            f"acc {e.val_accuracy:.4f}  {e.seconds:.0f}s"))

# %% per-image reports on the validation images
reports, summary = evaluate(model, val_set, options)
for r in reports:
    vcdr = "undef" if r.vcdr is None else f"{r.vcdr:.3f}"
    print(f"{r.id}  disc {r.disc_dice:.3f}  cup {r.cup_dice:.3f}  vcdr {vcdr}  suspect {r.glaucoma_suspect}")
print("summary", summary.to_json())

# %% segment one full image and save the panel
s = val_set[0]
mask, origin = segment_image(model, s.image, options)
print("crop origin", origin, "predicted vcdr", round(vertical_cdr(mask), 3),
      "flag", glaucoma_flag(vertical_cdr(mask)), "true cdr", round(s.cdr, 3))
segmentation_panel(s.image, mask, s.mask, OUT / "segmentation_panel.png")
print("wrote", OUT / "segmentation_panel.png")
