"""Command-line entry point: ``mblstm <command> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error,
3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import nullcontext
from pathlib import Path

from . import config as C
from . import tensor as T
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .data import LabelMap, PhantomConfig, PolarRule, gen_dataset, read_dataset, read_image, read_mask, split, \
    write_dataset, write_mask
from .errors import CheckpointError, MblstmError, NumericAbort, UndefinedCdrError
from .figures import segmentation_panel
from .metrics import glaucoma_flag, vertical_cdr, write_reports_csv, write_summary_json
from .network import build
from .trainer import EvalOptions, ablation, build_training_set, evaluate, segment_image, train

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    """Bad flags or inputs detected after argument parsing."""


def _say(*parts) -> None:
    print(*parts, flush=True)


def _note(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _threads(n: int | None):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _run_config(args) -> C.RunConfig:
    overrides = {
        "learning_rate": getattr(args, "lr", None),
        "seed": getattr(args, "seed", None),
        "epochs": getattr(args, "epochs", None),
        "threads": getattr(args, "threads", None),
        "loss_on": getattr(args, "loss_on", None),
    }
    if getattr(args, "no_blstm", False):
        overrides["blstm"] = False
    return C.resolve(getattr(args, "preset", None), getattr(args, "config", None), overrides)


def _load_samples(path: str):
    try:
        samples = read_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    if not samples:
        raise UsageError(f"dataset {path} is empty")
    return samples


def _checkpoint_meta(cfg: C.RunConfig) -> dict[str, str]:
    return {"crop_size": str(cfg.crop_size), "polar_size": str(cfg.polar_size), "center": cfg.center,
            "threshold": str(cfg.threshold), "precision": cfg.precision}


def _eval_options_from(model) -> EvalOptions:
    meta = getattr(model, "meta", {})
    try:
        return EvalOptions(rule=PolarRule(int(meta.get("polar_size", model.config.input_size))),
                           crop_size=int(meta.get("crop_size", 128)), center=meta.get("center", "localize"),
                           threshold=float(meta.get("threshold", 0.5)))
    except ValueError as exc:
        raise CheckpointError(f"checkpoint meta is malformed: {exc}") from exc


def _load_model(path, expected=None):
    """Load a checkpoint in the precision it was trained in."""
    _, meta, _ = read_manifest(path)
    precision = meta.get("precision", "single")
    if precision not in ("single", "double"):
        raise CheckpointError(f"checkpoint meta has unknown precision {precision!r}")
    T.set_precision(precision)
    return load_checkpoint(path, expected)


def _metric_line(summary) -> str:
    return f"cup_dice {summary.cup_dice:.4f}  disc_dice {summary.disc_dice:.4f}  accuracy {summary.accuracy:.4f}"


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    if not 0 <= args.glaucoma_fraction <= 1:
        raise UsageError("--glaucoma-fraction must be in [0, 1]")
    cfg = PhantomConfig(glaucoma_fraction=args.glaucoma_fraction, seed=args.seed)
    samples = gen_dataset(cfg, args.count)
    write_dataset(samples, args.out)
    n_glaucoma = sum(bool(s.glaucoma) for s in samples)
    _say(f"wrote {len(samples)} samples to {args.out}: {n_glaucoma} glaucoma "
         f"({n_glaucoma / len(samples):.1%} prevalence)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    samples = _load_samples(args.data)
    if len(samples) < 2:
        raise UsageError("training needs at least 2 samples (train and validation splits)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    T.set_precision(cfg.precision)
    train_set, val_set = split(samples, cfg.train_fraction, cfg.seed)
    data = build_training_set(train_set, cfg.crop_size, cfg.crops_per_image, cfg.jitter, cfg.polar_rule(), cfg.seed)
    _note(f"train {len(train_set)} images ({len(data[0])} polar crops), validate {len(val_set)} images")
    (out / "run.cfg").write_text(cfg.to_text())
    model = build(cfg.network())
    model.meta = _checkpoint_meta(cfg)

    def progress(e):
        _note(f"epoch {e.epoch:3d}  loss {e.train_loss:.4f}  val cup {e.val_cup_dice:.4f}  "
              f"disc {e.val_disc_dice:.4f}  acc {e.val_accuracy:.4f}  ({e.seconds:.0f}s)")

    try:
        with _threads(cfg.threads):
            model, log = train(model, data, cfg.train_config(), validation=val_set,
                               eval_options=cfg.eval_options(), checkpoint_dir=out / "checkpoints",
                               progress=progress)
    except NumericAbort:
        # parameters still hold the last finite step
        save_checkpoint(model, out / "checkpoint_last_good")
        raise
    save_checkpoint(model, out / "checkpoint")
    log.to_csv(out / "trainlog.csv")
    last = log.entries[-1]
    _say(f"cup_dice {last.val_cup_dice:.4f}  disc_dice {last.val_disc_dice:.4f}  accuracy {last.val_accuracy:.4f}")
    return EXIT_OK


def cmd_segment(args) -> int:
    expected = _run_config(args).network() if (args.preset or args.config) else None
    model = _load_model(args.checkpoint, expected)
    image_path = Path(args.image)
    if not image_path.is_file():
        raise UsageError(f"image not found: {image_path}")
    try:
        image = read_image(image_path)
    except OSError as exc:
        raise UsageError(f"cannot read image {image_path}: {exc}") from exc
    options = _eval_options_from(model)
    if min(image.shape[:2]) < options.crop_size:
        raise UsageError(f"image {image.shape[1]}x{image.shape[0]} is smaller than the {options.crop_size} px crop")
    mask, origin = segment_image(model, image, options)
    write_mask(args.out, mask, LabelMap())
    try:
        vcdr = vertical_cdr(mask)
        _say(f"vcdr {vcdr:.4f}  glaucoma_suspect {str(glaucoma_flag(vcdr)).lower()}")
    except UndefinedCdrError:
        _say("vcdr undefined (no disc found)  glaucoma_suspect false")
    if args.emit_figure:
        gt = read_mask(args.mask, LabelMap()) if args.mask else None
        segmentation_panel(image, mask, gt, args.emit_figure)
    return EXIT_OK


def cmd_eval(args) -> int:
    samples = _load_samples(args.data)
    if args.oracle:
        options = EvalOptions(rule=PolarRule(args.polar_size), crop_size=args.crop_size)
        reports, summary = evaluate(None, samples, options, oracle=True)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint unless --oracle is given")
        model = _load_model(args.checkpoint)
        reports, summary = evaluate(model, samples, _eval_options_from(model))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports_csv(reports, out / "reports.csv")
    write_summary_json(summary, out / "summary.json")
    _say(_metric_line(summary))
    vcdr = "undefined" if summary.mean_vcdr is None else f"{summary.mean_vcdr:.4f}"
    _say(f"mean_vcdr {vcdr}  suspects {summary.suspect_count}/{summary.n}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suites
    if args.list:
        for name in SUITES:
            _say(name)
        return EXIT_OK
    names = args.suite or None
    for n in names or []:
        if n not in SUITES:
            raise UsageError(f"unknown suite {n!r}; see --list")
    perturb = 0.01 if args.perturb_grad else 0.0
    results = run_suites(names, perturb, report=lambda r: _say(r.line()))
    failed = [r.name for r in results if not r.passed]
    if failed:
        _say("FAILED: " + ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    samples = _load_samples(args.data)
    T.set_precision(cfg.precision)
    train_set, val_set = split(samples, cfg.train_fraction, cfg.seed)
    data = build_training_set(train_set, cfg.crop_size, cfg.crops_per_image, cfg.jitter, cfg.polar_rule(), cfg.seed)
    with _threads(cfg.threads):
        arms = ablation(data, val_set, cfg.network(), cfg.train_config(), cfg.eval_options())
    result = {name: {"summary": s.to_json(), "final_train_loss": log.entries[-1].train_loss}
              for name, (s, log) in arms.items()}
    on, off = arms["blstm_on"][0], arms["blstm_off"][0]
    result["difference_on_minus_off"] = {
        "cup_dice": on.cup_dice - off.cup_dice, "disc_dice": on.disc_dice - off.disc_dice,
        "accuracy": on.accuracy - off.accuracy,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(result, indent=2) + "\n")
    for name, (s, _) in arms.items():
        _say(f"{name:9s}  {_metric_line(s)}")
    return EXIT_OK


# ----------------------------------------------------------------- parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(C.PRESETS), default=None, help="named configuration (default: desk)")
    p.add_argument("--config", help="key = value config file; overrides the preset")
    p.add_argument("--seed", type=int, help="seed for init, split, crops and shuffling")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mblstm", description="Optic disc/cup segmentation with BLSTM skips.")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--glaucoma-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="crop, polar-transform, split and train")
    p.add_argument("--data", required=True, help="dataset directory (with manifest.txt)")
    p.add_argument("--out", required=True, help="output directory for checkpoint and TrainLog")
    _add_run_flags(p)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss-on", choices=("average_only", "average_plus_sides"))
    p.add_argument("--no-blstm", action="store_true", help="plain concatenation skips at every level")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment one fundus image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output mask PNG")
    p.add_argument("--preset", choices=sorted(C.PRESETS), default=None,
                   help="expected architecture; a mismatching checkpoint is rejected")
    p.add_argument("--config", help="config file describing the expected architecture")
    p.add_argument("--mask", help="ground-truth mask, shown in the figure")
    p.add_argument("--emit-figure", help="write an input / ground truth / prediction panel PNG")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score a checkpoint (or the oracle) on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="directory for reports.csv and summary.json")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="feed ground truth through the polar round trip")
    p.add_argument("--polar-size", type=int, default=64, help="oracle mode only")
    p.add_argument("--crop-size", type=int, default=128, help="oracle mode only")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the self-verification suites")
    p.add_argument("--list", action="store_true", help="print suite names and exit")
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    p.add_argument("--perturb-grad", action="store_true", help="inject a 1%% analytic-gradient fault")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", help="train BLSTM-on and BLSTM-off arms on identical data")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("train", "ablate") and args.preset is None and args.config is None:
        args.preset = "desk"
    try:
        with _threads(args.threads):
            return args.func(args)
    except NumericAbort as exc:
        _note(f"error: numeric abort: {exc}")
        return EXIT_NUMERIC
    except (UsageError, MblstmError, OSError) as exc:
        _note(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
