"""Self-verification suites behind ``mblstm verify``.

Each suite is a function returning a :class:`SuiteResult`; :data:`SUITES`
maps the public names to them in run order. The brute-force metric oracle
lives here too, since it must stay independent of :mod:`mblstm.metrics`.
"""

from __future__ import annotations

import hashlib
import tempfile
import time
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import PhantomConfig, PolarRule, disc_centroid, gen_dataset, gen_phantom, write_dataset
from .errors import UndefinedCdrError
from .gradcheck import check_gradients
from .layers import ConvLstmParams, SkipFusionParams, bidirectional_run, convlstm_step, skip_fuse
from .metrics import SegMask, cup_dice, disc_dice, pixel_accuracy, vertical_cdr
from .network import NetworkConfig, build, forward, predict_mask
from .polar import PolarSpec, from_polar, to_polar
from .tensor import Tensor
from .trainer import EvalOptions, TrainConfig, build_training_set, dice_loss, evaluate, train, training_dice

GRAD_SEEDS = 20
GRAD_TOL = 1e-4
NETWORK_GRAD_TOL = 1e-3
LSTM_SAMPLE = 0.15  # fraction of coordinates probed per seed; 20 seeds still cover every tensor


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


# ------------------------------------------------------------ gradient cases
#
# A case builder takes a seed and returns (loss_fn, inputs, sample, tol). The
# loss reads every output through fixed random weights so no gradient is
# trivially uniform.


def _readout(y: Tensor, gen: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(gen.standard_normal(y.shape))
    return lambda out: T.sum_all(T.mul(out, weights))


def _leaf(gen: np.random.Generator, shape, low: float | None = None) -> Tensor:
    """Random leaf; with ``low`` the magnitudes are kept at least that far from zero."""
    values = gen.standard_normal(shape)
    if low is not None:
        values = np.sign(values) * (low + np.abs(values))
        values[values == 0] = low
    return Tensor(values, requires_grad=True)


def _unary_case(op: Callable[[Tensor], Tensor], shape=(2, 3, 6, 6), low: float | None = None):
    def build_case(seed: int):
        gen = T.rng(seed)
        x = _leaf(gen, shape, low)
        read = _readout(op(x), gen)
        return (lambda: read(op(x))), [x], None, GRAD_TOL
    return build_case


def _conv_case(stride: int, pad: int, bias: bool = True):
    def build_case(seed: int):
        gen = T.rng(seed)
        x = _leaf(gen, (2, 3, 5, 5))
        w = _leaf(gen, (4, 3, 3, 3))
        b = _leaf(gen, (1, 4, 1, 1)) if bias else None
        fn = lambda: T.conv2d(x, w, b, stride=stride, pad=pad)
        read = _readout(fn(), gen)
        return (lambda: read(fn())), [x, w] + ([b] if bias else []), None, GRAD_TOL
    return build_case


def _maxpool_case(seed: int):
    gen = T.rng(seed)
    # distinct values 0.01 apart so no perturbation flips the argmax
    values = (gen.permutation(2 * 3 * 6 * 6).astype(np.float64) * 0.01).reshape(2, 3, 6, 6)
    x = Tensor(values, requires_grad=True)
    read = _readout(T.maxpool2(x), gen)
    return (lambda: read(T.maxpool2(x))), [x], None, GRAD_TOL


def _binary_case(op: Callable[[Tensor, Tensor], Tensor], positive_rhs: bool = False):
    def build_case(seed: int):
        gen = T.rng(seed)
        x = _leaf(gen, (2, 3, 4, 4))
        y = _leaf(gen, (2, 3, 4, 4), low=0.5 if positive_rhs else None)
        if positive_rhs:
            y.data = np.abs(y.data)
        read = _readout(op(x, y), gen)
        return (lambda: read(op(x, y))), [x, y], None, GRAD_TOL
    return build_case


def _structural_case(seed: int):
    gen = T.rng(seed)
    a = _leaf(gen, (2, 2, 4, 4))
    b = _leaf(gen, (2, 3, 4, 4))
    fn = lambda: T.spatial_sum(T.slice_channels(T.concat_channels([a, b]), 1, 4))
    read = _readout(fn(), gen)
    return (lambda: read(fn())), [a, b], None, GRAD_TOL


def _lstm_params(gen: np.random.Generator, cin: int, hidden: int) -> ConvLstmParams:
    p = ConvLstmParams.init(gen, cin, hidden)
    for t in p.tensors().values():
        if t.data.shape[0] == 1:  # biases start at zero; randomise them too
            t.data = gen.standard_normal(t.shape) * 0.5
    return p


def _convlstm_case(seed: int):
    gen = T.rng(seed)
    p = _lstm_params(gen, 2, 3)
    x1, x2 = _leaf(gen, (1, 2, 5, 5)), _leaf(gen, (1, 2, 5, 5))

    def fn():
        h, c = convlstm_step(p, x1)
        h, c = convlstm_step(p, x2, h, c)
        return T.add(h, c)

    read = _readout(fn(), gen)
    return (lambda: read(fn())), [x1, x2] + list(p.tensors().values()), LSTM_SAMPLE, GRAD_TOL


def _bidirectional_case(seed: int):
    gen = T.rng(seed)
    fwd, bwd = _lstm_params(gen, 2, 3), _lstm_params(gen, 2, 3)
    x1, x2 = _leaf(gen, (1, 2, 5, 5)), _leaf(gen, (1, 2, 5, 5))
    fn = lambda: T.concat_channels(list(bidirectional_run(fwd, bwd, [x1, x2])))
    read = _readout(fn(), gen)
    inputs = [x1, x2] + list(fwd.tensors().values()) + list(bwd.tensors().values())
    return (lambda: read(fn())), inputs, LSTM_SAMPLE, GRAD_TOL


def _skip_fuse_case(seed: int):
    gen = T.rng(seed)
    p = SkipFusionParams.init(gen, 2, 3, 2)
    p.fuse_b.data = np.full(p.fuse_b.shape, 0.3)  # keep most units off the ReLU kink
    enc, dec = _leaf(gen, (1, 2, 5, 5)), _leaf(gen, (1, 2, 5, 5))
    fn = lambda: skip_fuse(p, enc, dec)
    read = _readout(fn(), gen)
    return (lambda: read(fn())), [enc, dec] + list(p.tensors().values()), LSTM_SAMPLE, GRAD_TOL


def _dice_case(seed: int):
    gen = T.rng(seed)
    probs = Tensor(gen.uniform(0.05, 0.95, (1, 2, 4, 4)), requires_grad=True)
    targets = Tensor((gen.random((1, 2, 4, 4)) < 0.5).astype(np.float64))
    return (lambda: dice_loss(probs, targets)), [probs], None, GRAD_TOL


def _network_case(seed: int):
    gen = T.rng(seed)
    model = build(NetworkConfig(depth=2, base_channels=4, input_size=16, seed=seed))
    # Zero-initialised biases put ReLU inputs exactly on the kink wherever the
    # upstream features are all zero; random biases move the probe off it.
    for name, t in model.tensors.items():
        if name.endswith(".b") or "skip" in name and ".b_" in name:
            t.data = gen.standard_normal(t.shape) * 0.1
    x = Tensor(gen.standard_normal((1, 3, 16, 16)))
    y = Tensor((gen.random((1, 2, 16, 16)) < 0.4).astype(np.float64))
    fn = lambda: dice_loss(forward(model, x)[1], y)
    return fn, model.parameters(), 0.01, NETWORK_GRAD_TOL


GRADIENT_CASES: dict[str, Callable] = {
    "conv2d": _conv_case(1, 1),
    "conv2d_valid_nobias": _conv_case(1, 0, bias=False),
    "conv2d_stride2": _conv_case(2, 1),
    "relu": _unary_case(T.relu, low=0.05),
    "sigmoid": _unary_case(T.sigmoid),
    "tanh": _unary_case(T.tanh),
    "maxpool2": _maxpool_case,
    "avgpool_down2": _unary_case(lambda x: T.avgpool_down(x, 2), (2, 3, 8, 8)),
    "avgpool_down4": _unary_case(lambda x: T.avgpool_down(x, 4), (2, 3, 8, 8)),
    "upsample2_nearest": _unary_case(T.upsample2_nearest, (2, 3, 3, 3)),
    "add": _binary_case(T.add),
    "sub": _binary_case(T.sub),
    "mul": _binary_case(T.mul),
    "div": _binary_case(T.div, positive_rhs=True),
    "concat_slice_sum": _structural_case,
    "convlstm_step": _convlstm_case,
    "bidirectional_run": _bidirectional_case,
    "skip_fuse": _skip_fuse_case,
    "dice_loss": _dice_case,
    "network": _network_case,
}


def gradient_errors(name: str, seeds=range(GRAD_SEEDS), perturb: float = 0.0) -> list[float]:
    """Worst relative error of one case for each seed (double precision)."""
    errors = []
    with T.precision("double"):
        for seed in seeds:
            loss_fn, inputs, sample, _ = GRADIENT_CASES[name](seed)
            errors.append(check_gradients(loss_fn, inputs, sample=sample, seed=seed, perturb=perturb,
                                          pooled=name == "network"))
    return errors


def suite_gradients(perturb: float = 0.0, seeds: int = GRAD_SEEDS) -> SuiteResult:
    failing = []
    worst = {}
    for name, builder in GRADIENT_CASES.items():
        tol = NETWORK_GRAD_TOL if name == "network" else GRAD_TOL
        errs = gradient_errors(name, range(seeds), perturb)
        worst[name] = max(errs)
        if worst[name] >= tol:
            failing.append(name)
    if failing:
        detail = "gradient check failed for " + ", ".join(f"{n} (rel err {worst[n]:.2e})" for n in failing)
        return SuiteResult("gradients", False, detail)
    top = max(worst, key=worst.get)
    return SuiteResult("gradients", True, f"{len(worst)} ops x {seeds} seeds, worst {top} {worst[top]:.2e}")


# ------------------------------------------------------------- polar round trip


def polar_roundtrip_agreement(mask: np.ndarray, spec: PolarSpec, inner: float = 0.9) -> float:
    """Fraction of pixels strictly inside ``inner * radius`` that survive a nearest/nearest round trip."""
    polar = to_polar(mask, spec, "nearest")
    back = from_polar(polar, mask.shape[0], mask.shape[1], "nearest")
    yy, xx = np.mgrid[0:mask.shape[0], 0:mask.shape[1]]
    cx, cy = spec.center
    inside = np.hypot(xx - cx, yy - cy) < inner * spec.radius
    return float((back[inside] == mask[inside]).mean())


def suite_polar(count: int = 50, radius: float = 64.0) -> SuiteResult:
    cfg = PhantomConfig()
    worst = 1.0
    for i in range(count):
        s = gen_phantom(cfg, i)
        spec = PolarSpec(disc_centroid(s.mask), radius)
        worst = min(worst, polar_roundtrip_agreement(s.mask.labels, spec))
    return SuiteResult("polar_roundtrip", worst >= 0.99, f"min agreement {worst:.4f} over {count} phantoms")


# ------------------------------------------------------------- metric oracle


def _pixels(labels: np.ndarray, classes) -> set[tuple[int, int]]:
    return {(r, c) for r in range(labels.shape[0]) for c in range(labels.shape[1]) if int(labels[r, c]) in classes}


def brute_dice(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return float(Fraction(2 * len(a & b), len(a) + len(b)))


def brute_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    """Set-based reference: every quantity from explicit pixel coordinate sets."""
    disc_p, disc_g = _pixels(pred, {1, 2}), _pixels(gt, {1, 2})
    cup_p, cup_g = _pixels(pred, {2}), _pixels(gt, {2})
    same = sum(1 for r in range(pred.shape[0]) for c in range(pred.shape[1]) if pred[r, c] == gt[r, c])

    def span(points):
        rows = {r for r, _ in points}
        return 0 if not rows else max(rows) - min(rows) + 1

    return {
        "disc_dice": brute_dice(disc_p, disc_g),
        "cup_dice": brute_dice(cup_p, cup_g),
        "accuracy": float(Fraction(same, pred.size)),
        "vcdr": None if not disc_p else float(Fraction(span(cup_p), span(disc_p))),
    }


def random_label_mask(gen: np.random.Generator, size: int = 16) -> np.ndarray:
    """Random 3-class field; densities vary so empty regions and dense ones both occur."""
    p_disc, p_cup = gen.uniform(0, 1), gen.uniform(0, 1)
    disc = gen.random((size, size)) < p_disc * gen.choice([0.0, 0.2, 1.0])
    cup = disc & (gen.random((size, size)) < p_cup)
    return (disc.astype(np.uint8) + cup.astype(np.uint8))


def suite_metrics(count: int = 100, seed: int = 0) -> SuiteResult:
    gen = T.rng(seed)
    mismatches = 0
    for _ in range(count):
        pred, gt = SegMask(random_label_mask(gen)), SegMask(random_label_mask(gen))
        ref = brute_metrics(pred.labels, gt.labels)
        try:
            vcdr = vertical_cdr(pred)
        except UndefinedCdrError:
            vcdr = None
        got = {"disc_dice": disc_dice(pred, gt), "cup_dice": cup_dice(pred, gt),
               "accuracy": pixel_accuracy(pred, gt), "vcdr": vcdr}
        mismatches += got != ref
    return SuiteResult("metric_oracles", mismatches == 0, f"{count - mismatches}/{count} masks match exactly")


# ------------------------------------------------------------- oracle evaluation


def suite_oracle_eval(count: int = 40, rule: PolarRule = PolarRule()) -> SuiteResult:
    samples = gen_dataset(PhantomConfig(), count)
    _, summary = evaluate(None, samples, EvalOptions(rule=rule), oracle=True)
    ok = summary.cup_dice >= 0.98 and summary.disc_dice >= 0.98
    return SuiteResult("oracle_eval", ok, f"cup dice {summary.cup_dice:.4f}, disc dice {summary.disc_dice:.4f}")


# ------------------------------------------------------------- architecture invariants


def suite_invariants() -> SuiteResult:
    problems = []
    with T.precision("double"), T.no_grad():
        model = build(NetworkConfig(depth=3, base_channels=4, input_size=16, seed=1))
        x = T.randn((2, 3, 16, 16), seed=5)
        sides, avg = forward(model, x)
        mean = np.mean([s.data for s in sides], axis=0)
        if np.max(np.abs(avg.data - mean)) > 1e-12:
            problems.append("average differs from mean of side outputs")
        if not (np.all(avg.data > 0) and np.all(avg.data < 1)):
            problems.append("outputs leave (0, 1)")
        gen = T.rng(7)
        for probs in [avg.data[0], avg.data[1]] + [gen.random((2, 8, 8)) for _ in range(20)]:
            m = predict_mask(probs)
            if np.any(m.cup & ~m.disc):
                problems.append("predicted cup outside disc")
                break

        fwd, bwd = ConvLstmParams.init(gen, 2, 3), ConvLstmParams.init(gen, 2, 3)
        seq = [T.randn((1, 2, 5, 5), seed=s) for s in (11, 12)]
        a_f, a_b = bidirectional_run(fwd, bwd, seq)
        b_f, b_b = bidirectional_run(bwd, fwd, seq[::-1])
        if not (np.array_equal(a_f.data, b_b.data) and np.array_equal(a_b.data, b_f.data)):
            problems.append("direction swap is not symmetric")

    with T.precision("single"), tempfile.TemporaryDirectory() as tmp:
        model = build(NetworkConfig(depth=2, base_channels=4, input_size=16, seed=3))
        save_checkpoint(model, Path(tmp) / "ck")
        loaded = load_checkpoint(Path(tmp) / "ck")
        same = all(np.array_equal(t.data.astype(np.float32), loaded[n].data) for n, t in model.tensors.items())
        with T.no_grad():
            x = T.randn((1, 3, 16, 16), seed=2)
            same = same and np.array_equal(forward(model, x)[1].data, forward(loaded, x)[1].data)
        if not same:
            problems.append("checkpoint round trip not bit-exact")
    return SuiteResult("invariants", not problems, "; ".join(problems) or "avg=mean, cup in disc, swap symmetry, "
                                                                        "checkpoint round trip")


# ------------------------------------------------------------- determinism


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _tiny_run(out: Path) -> str:
    cfg = PhantomConfig(seed=4)
    samples = gen_dataset(cfg, 4)
    write_dataset(samples, out / "data")
    x, y = build_training_set(samples[:2], 128, 1, 0, PolarRule(16))
    with T.precision("single"):
        model, log = train(build(NetworkConfig(depth=2, base_channels=2, input_size=16)), (x, y),
                           TrainConfig(epochs=2, batch_size=1))
        save_checkpoint(model, out / "ck")
    (out / "log.csv").write_text(log.csv_text())
    return _tree_digest(out)


def suite_determinism() -> SuiteResult:
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        same = _tiny_run(Path(a)) == _tiny_run(Path(b))
    return SuiteResult("determinism", same, "dataset, TrainLog and checkpoint bytes " + ("match" if same else "differ"))


# ------------------------------------------------------------- overfit sanity


@dataclass
class OverfitResult:
    disc_dice: float
    cup_dice: float
    losses: list[float]

    def window_means(self, width: int = 20) -> list[float]:
        return [float(np.mean(self.losses[i:i + width])) for i in range(0, len(self.losses), width)]


def overfit_one(index: int = 0, iterations: int = 200, seed: int = 0, polar_size: int = 64,
                base_channels: int = 8) -> OverfitResult:
    """Train the desk architecture on one phantom crop for ``iterations`` single-image steps."""
    sample = gen_phantom(PhantomConfig(), index)
    x, y = build_training_set([sample], 128, 1, 0, PolarRule(polar_size))
    with T.precision("single"):
        model = build(NetworkConfig(depth=2, base_channels=base_channels, input_size=polar_size, seed=seed))
        model, log = train(model, (x, y), TrainConfig(epochs=iterations, batch_size=1, seed=seed))
        disc, cup = training_dice(model, x, y)
    return OverfitResult(disc, cup, [e.train_loss for e in log.entries])


def suite_overfit() -> SuiteResult:
    r = overfit_one()
    ok = min(r.disc_dice, r.cup_dice) >= 0.95 and r.losses[-1] < 0.1
    return SuiteResult("overfit", ok, f"disc dice {r.disc_dice:.4f}, cup dice {r.cup_dice:.4f}, "
                                      f"final loss {r.losses[-1]:.4f} after {len(r.losses)} steps")


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "gradients": suite_gradients,
    "polar_roundtrip": suite_polar,
    "metric_oracles": suite_metrics,
    "oracle_eval": suite_oracle_eval,
    "invariants": suite_invariants,
    "determinism": suite_determinism,
    "overfit": suite_overfit,
}


def run_suites(names=None, perturb_grad: float = 0.0, report: Callable[[SuiteResult], None] | None = None
               ) -> list[SuiteResult]:
    results = []
    for name in names or SUITES:
        started = time.perf_counter()
        fn = SUITES[name]
        result = fn(perturb=perturb_grad) if name == "gradients" else fn()
        result.seconds = time.perf_counter() - started
        results.append(result)
        if report is not None:
            report(result)
    return results
