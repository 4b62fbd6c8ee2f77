"""Optic disc and cup segmentation with a polar-space U-Net whose skips are bidirectional ConvLSTMs."""

from __future__ import annotations

from . import tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabelMap, PhantomConfig, PolarRule, Sample, disc_crops, gen_dataset, gen_phantom, \
    load_refuge_dir, localize_disc, split, to_polar_dataset
from .errors import CheckpointError, ContractError, DimensionError, MblstmError, NumericAbort, NumericError, \
    UndefinedCdrError
from .metrics import SegMask, aggregate, cup_dice, dice, disc_dice, glaucoma_flag, pixel_accuracy, report, \
    vertical_cdr
from .network import ModelParams, NetworkConfig, build, forward, predict_mask
from .polar import PolarSpec, from_polar, to_polar
from .trainer import EvalOptions, TrainConfig, dice_loss, evaluate, segment_image, train

__version__ = "0.1.0"
