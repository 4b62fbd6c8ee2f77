"""Dice-loss training, evaluation in Cartesian space, and the ablation harness."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import PolarRule, Sample, crop, crop_origin, disc_centroid, disc_crops, localize_disc, polar_arrays, \
    polar_input, to_polar_dataset
from .errors import ContractError, DimensionError, NumericAbort, NumericError
from .metrics import BACKGROUND, CUP_LABEL, DISC_LABEL, CdrReport, SegMask, Summary, aggregate, dice, report
from .network import ModelParams, NetworkConfig, build, forward, predict_mask
from .polar import PolarMask, from_polar, to_polar
from .tensor import Tensor

TRAINLOG_COLUMNS = ("epoch", "train_loss", "val_cup_dice", "val_disc_dice", "val_accuracy")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_on: str = "average_only"  # or "average_plus_sides"
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.loss_on not in ("average_only", "average_plus_sides"):
            raise ContractError(f"loss_on must be 'average_only' or 'average_plus_sides', got {self.loss_on!r}")


def dice_loss(probs: Tensor, targets: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft dice loss ``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`` averaged over batch and channels."""
    if probs.shape != targets.shape:
        raise DimensionError(f"dice_loss: probs {probs.shape} and targets {targets.shape} differ")
    inter = T.spatial_sum(T.mul(probs, targets))
    num = T.add_scalar(T.scale(inter, 2.0), smooth)
    den = T.add_scalar(T.add(T.spatial_sum(probs), T.spatial_sum(targets)), smooth)
    return T.add_scalar(T.scale(T.mean_all(T.div(num, den)), -1.0), 1.0)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= (self.lr * p.grad).astype(p.data.dtype)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_cup_dice: float | None = None
    val_disc_dice: float | None = None
    val_accuracy: float | None = None
    seconds: float = field(default=0.0, compare=False)

    def row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [str(self.epoch), fmt(self.train_loss), fmt(self.val_cup_dice), fmt(self.val_disc_dice),
                fmt(self.val_accuracy)]


@dataclass
class TrainLog:
    """One entry per completed epoch. Wall-clock time is kept but excluded from CSV and equality."""

    entries: list[EpochLog] = field(default_factory=list)
    steps: int = 0

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAINLOG_COLUMNS)
        for e in self.entries:
            writer.writerow(e.row())
        return buf.getvalue()

    def to_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.csv_text())

    @property
    def seconds(self) -> float:
        return sum(e.seconds for e in self.entries)


# --------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalOptions:
    rule: PolarRule = PolarRule()
    crop_size: int = 128
    center: str = "localize"  # "localize" (inference) or "gt" (ground-truth disc centroid)
    threshold: float = 0.5
    largest_component: bool = True
    fill_holes: bool = True
    batch_size: int = 16


def postprocess(mask: SegMask, largest_component: bool = True, fill_holes: bool = True) -> SegMask:
    """Keep the largest disc and cup blobs, fill holes, and re-impose cup inside disc."""

    def clean(region: np.ndarray) -> np.ndarray:
        if largest_component and region.any():
            blobs, count = ndimage.label(region)
            if count > 1:
                sizes = ndimage.sum_labels(region, blobs, np.arange(1, count + 1))
                region = blobs == (1 + int(np.argmax(sizes)))
        if fill_holes:
            region = ndimage.binary_fill_holes(region)
        return region

    disc = clean(mask.disc)
    cup = clean(mask.cup & disc) & disc
    labels = np.full(mask.labels.shape, BACKGROUND, dtype=np.uint8)
    labels[disc] = DISC_LABEL
    labels[cup] = CUP_LABEL
    return SegMask(labels)


def predict_probs(model: ModelParams, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Averaged network output for a stack of inputs (M, 3, S, S), without recording a graph."""
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            _, avg = forward(model, Tensor(x[i:i + batch_size]))
            out.append(avg.data)
    return np.concatenate(out) if out else np.zeros((0, 2) + x.shape[2:])


def _crop_center(sample: Sample, mode: str) -> tuple[float, float]:
    if mode == "gt":
        return disc_centroid(sample.mask)
    if mode == "localize":
        loc = localize_disc(sample.image)
        return loc.cx, loc.cy
    raise ContractError(f"center mode must be 'gt' or 'localize', got {mode!r}")


def _probs_from_mask(labels: np.ndarray) -> np.ndarray:
    return np.stack([labels >= DISC_LABEL, labels == CUP_LABEL]).astype(np.float64)


def evaluate(model: ModelParams | None, samples: Sequence[Sample], options: EvalOptions = EvalOptions(),
             oracle: bool = False) -> tuple[list[CdrReport], Summary]:
    """Segment each sample in polar space, map back to Cartesian crops and score against ground truth.

    ``oracle=True`` skips the network and feeds the ground-truth polar mask
    through the same threshold / inverse-transform / post-processing path, which
    measures how much the polar round trip alone costs.
    """
    if not samples:
        raise ContractError("evaluate needs at least one sample")
    if model is None and not oracle:
        raise ContractError("evaluate needs a model unless oracle=True")
    size = options.crop_size
    spec = options.rule.spec_for(size)
    crops = []
    for s in samples:
        origin = crop_origin(s.mask.labels.shape, _crop_center(s, options.center), size)
        crops.append(crop(s, origin, size))

    pairs = to_polar_dataset(crops, options.rule)
    if oracle:
        probs = np.stack([_probs_from_mask(m.data) for _, m in pairs])
    else:
        x, _ = polar_arrays(pairs)
        probs = predict_probs(model, x, options.batch_size)

    reports = []
    for s, (_, gt_crop), p in zip(samples, crops, probs):
        polar_pred = predict_mask(p, options.threshold)
        cart = from_polar(PolarMask(polar_pred.labels, spec), size, size, "nearest", BACKGROUND)
        pred = postprocess(SegMask(cart), options.largest_component, options.fill_holes)
        reports.append(report(s.id, pred, gt_crop))
    return reports, aggregate(reports)


def segment_image(model: ModelParams, image: np.ndarray, options: EvalOptions = EvalOptions()
                  ) -> tuple[SegMask, tuple[int, int]]:
    """Full-size Cartesian mask for one fundus image, plus the crop origin used."""
    h, w = image.shape[:2]
    loc = localize_disc(image)
    size = options.crop_size
    x0, y0 = crop_origin((h, w), (loc.cx, loc.cy), size)
    patch = image[y0:y0 + size, x0:x0 + size]
    spec = options.rule.spec_for(size)
    polar = to_polar(patch, spec, options.rule.image_interp)
    x = polar_input(polar)[None]
    probs = predict_probs(model, x, 1)[0]
    polar_pred = predict_mask(probs, options.threshold)
    cart = from_polar(PolarMask(polar_pred.labels, spec), size, size, "nearest", BACKGROUND)
    local = postprocess(SegMask(cart), options.largest_component, options.fill_holes)
    full = np.full((h, w), BACKGROUND, dtype=np.uint8)
    full[y0:y0 + size, x0:x0 + size] = local.labels
    return SegMask(full), (x0, y0)


# ----------------------------------------------------------------- training


def build_training_set(samples: Sequence[Sample], crop_size: int, n_crops: int, jitter: int, rule: PolarRule,
                       seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth-centred jittered crops of every sample, in polar form, as network arrays."""
    pairs = []
    for i, s in enumerate(samples):
        crops = disc_crops(s, crop_size, n_crops, jitter, seed=seed * 100003 + i)
        pairs.extend(to_polar_dataset(crops, rule))
    return polar_arrays(pairs)


def _loss(model: ModelParams, xb: Tensor, yb: Tensor, loss_on: str) -> tuple[Tensor, Tensor]:
    sides, avg = forward(model, xb)
    loss = dice_loss(avg, yb)
    if loss_on == "average_plus_sides":
        total = loss
        for s in sides:
            total = T.add(total, dice_loss(s, yb))
        loss = T.scale(total, 1.0 / (1 + len(sides)))
    return loss, avg


def train(model: ModelParams, data, cfg: TrainConfig, validation: Sequence[Sample] | None = None,
          eval_options: EvalOptions = EvalOptions(), checkpoint_dir: str | Path | None = None,
          progress: Callable[[EpochLog], None] | None = None) -> tuple[ModelParams, TrainLog]:
    """Optimise ``model`` in place on polar training data.

    ``data`` is either a pair of arrays ``(inputs (M,3,S,S), targets (M,2,S,S))``
    or a list of ``(PolarImage, PolarMask)`` pairs. Batches are drawn from a
    seeded shuffle per epoch, so the run is a pure function of its seeds.
    """
    cfg.validate()
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray):
        x_all, y_all = data
    else:
        x_all, y_all = polar_arrays(list(data))
    if len(x_all) == 0:
        raise ContractError("train needs a non-empty training set")
    x_all = np.asarray(x_all, dtype=T.dtype())
    y_all = np.asarray(y_all, dtype=T.dtype())

    params = model.parameters()
    if cfg.optimizer == "adam":
        opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    else:
        opt = SGD(params, cfg.learning_rate)
    shuffle = T.rng(cfg.seed)
    log = TrainLog()
    model.zero_grad()

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = shuffle.permutation(len(x_all))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            try:
                loss, _ = _loss(model, Tensor(x_all[idx]), Tensor(y_all[idx]), cfg.loss_on)
            except NumericError as exc:
                raise NumericAbort(f"epoch {epoch}, step {log.steps + 1}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise NumericAbort(f"epoch {epoch}, step {log.steps + 1}: loss is {value}; parameters left at last good step")
            T.backward(loss)
            opt.step()
            model.zero_grad()
            log.steps += 1
            losses.append(value * len(idx))

        entry = EpochLog(epoch, float(np.sum(losses) / len(x_all)))
        if validation:
            _, summary = evaluate(model, validation, eval_options)
            entry.val_cup_dice = summary.cup_dice
            entry.val_disc_dice = summary.disc_dice
            entry.val_accuracy = summary.accuracy
        entry.seconds = time.perf_counter() - started
        log.entries.append(entry)
        if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch_{epoch:04d}")
        if progress is not None:
            progress(entry)
    return model, log


def training_dice(model: ModelParams, x: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> tuple[float, float]:
    """Hard (thresholded) disc and cup dice of the model on polar training arrays."""
    probs = predict_probs(model, np.asarray(x, dtype=T.dtype()))
    pred = probs >= threshold
    pred[:, 1] &= pred[:, 0]
    target = np.asarray(y) >= 0.5
    return dice(pred[:, 0], target[:, 0]), dice(pred[:, 1], target[:, 1])


def ablation(train_data, validation: Sequence[Sample], net_cfg: NetworkConfig, train_cfg: TrainConfig,
             eval_options: EvalOptions = EvalOptions()) -> dict[str, tuple[Summary, TrainLog]]:
    """Train BLSTM-on and BLSTM-off arms with identical data, seeds and budget."""
    arms = {}
    for name, flag in (("blstm_on", True), ("blstm_off", False)):
        cfg = replace(net_cfg, blstm_levels=(flag,) * net_cfg.depth)
        model, log = train(build(cfg), train_data, train_cfg)
        _, summary = evaluate(model, validation, eval_options)
        arms[name] = (summary, log)
    return arms
