# %% [markdown]
# # The network and its gradients
#
# Builds the desk-size network, checks the side-output averaging and
# parameter bookkeeping, then compares analytic gradients against central
# finite differences for a handful of operations.

# %%
from __future__ import annotations

import numpy as np

from mblstm import tensor as T
from mblstm.network import NetworkConfig, build, forward, predict_mask
from mblstm.verify import GRADIENT_CASES, gradient_errors

# %% parameter counts for a few shapes
for depth, c0 in [(2, 4), (2, 8), (3, 8), (4, 32)]:
    on = build(NetworkConfig(depth=depth, base_channels=c0, input_size=2 ** depth * 4)).count()
    off = build(NetworkConfig(depth=depth, base_channels=c0, input_size=2 ** depth * 4,
                              blstm_levels=(False,) * depth)).count()
    print(f"depth {depth}  C0 {c0:2d}  params {on:>10,d}  without BLSTM skips {off:>10,d}")

# %% one forward pass through the desk network
model = build(NetworkConfig(depth=2, base_channels=8, input_size=64))
x = T.randn((2, 3, 64, 64), seed=1)
sides, avg = forward(model, x)
print("side outputs", [s.shape for s in sides], "average", avg.shape)
print("max |avg - mean(sides)|", np.abs(avg.data - np.mean([s.data for s in sides], axis=0)).max())
mask = predict_mask(avg.data[0])
print("untrained mask classes", np.unique(mask.labels), "cup inside disc", bool(np.all(mask.disc[mask.cup])))

# %% finite-difference checks, three seeds each (double precision)
for name in ["conv2d", "maxpool2", "sigmoid", "convlstm_step", "skip_fuse", "dice_loss"]:
    errs = gradient_errors(name, seeds=range(3))
    print(f"{name:16s} worst relative error {max(errs):.2e}")
print(len(GRADIENT_CASES), "cases in total; `mblstm verify --suite gradients` runs all of them over 20 seeds")

# %% an injected 1% gradient fault is caught
errs = gradient_errors("conv2d", seeds=range(3), perturb=0.01)
print(f"perturbed conv2d worst relative error {max(errs):.2e}")
