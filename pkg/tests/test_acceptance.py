"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Criteria 5 and 9 train the desk preset end to end through the command line
and take several minutes each on one core.
"""

from __future__ import annotations

import csv
import json
import time

import pytest

from mblstm import verify as V
from mblstm.cli import main
from mblstm.data import LabelMap, PhantomConfig, gen_phantom, read_mask, write_image
from mblstm.metrics import glaucoma_flag, vertical_cdr


@pytest.fixture
def emit(capsys):
    def _emit(number: int, title: str, passed: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}", flush=True)
    return _emit


def timed(fn, *args, **kwargs):
    started = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - started


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    assert main(["gen-data", "--count", "200", "--glaucoma-fraction", "0.1", "--seed", "0",
                 "--out", str(root / "data")]) == 0
    return root


def test_c1_gradient_integrity(emit):
    r, secs = timed(V.suite_gradients)
    ok = r.passed and secs < 120
    emit(1, "gradient integrity", ok, f"{r.detail}; {secs:.1f}s (limit 120s)")
    assert ok


def test_c2_polar_round_trip(emit):
    r, secs = timed(V.suite_polar, 50)
    ok = r.passed and secs < 30
    emit(2, "polar round trip", ok, f"{r.detail} (need >= 0.99); {secs:.1f}s (limit 30s)")
    assert ok


def test_c3_metric_oracles(emit):
    r, secs = timed(V.suite_metrics, 100)
    ok = r.passed and secs < 10
    emit(3, "metric oracles", ok, f"{r.detail}; {secs:.1f}s (limit 10s)")
    assert ok


def test_c4_oracle_evaluation_bound(emit):
    r, secs = timed(V.suite_oracle_eval)
    ok = r.passed and secs < 60
    emit(4, "oracle evaluation bound", ok, f"{r.detail} (need >= 0.98); {secs:.1f}s (limit 60s)")
    assert ok


def test_c5_desk_training(emit, desk_data):
    out = desk_data / "run"
    code, secs = timed(main, ["train", "--data", str(desk_data / "data"), "--out", str(out), "--preset", "desk"])
    with open(out / "trainlog.csv") as fh:
        last = list(csv.DictReader(fh))[-1]
    cup, disc, acc = (float(last[k]) for k in ("val_cup_dice", "val_disc_dice", "val_accuracy"))
    ok = code == 0 and cup >= 0.85 and disc >= 0.90 and acc >= 0.97 and secs < 15 * 60
    emit(5, "desk training", ok, f"val cup {cup:.4f} (>= 0.85), disc {disc:.4f} (>= 0.90), "
                                 f"accuracy {acc:.4f} (>= 0.97); {secs / 60:.1f} min (limit 15 min)")
    assert ok


def test_c6_overfit_sanity(emit):
    r = V.overfit_one(iterations=200)
    windows = r.window_means(20)
    settling = all(b <= a + 1e-3 for a, b in zip(windows, windows[1:]))
    ok = min(r.disc_dice, r.cup_dice) >= 0.95 and r.losses[-1] < 0.1 and settling
    emit(6, "overfit sanity", ok, f"training disc dice {r.disc_dice:.4f}, cup dice {r.cup_dice:.4f} (>= 0.95); "
                                  f"final loss {r.losses[-1]:.4f} (< 0.1); 20-step window means "
                                  f"{'non-increasing' if settling else 'rise'}")
    assert ok


def test_c7_architecture_invariants(emit):
    r = V.suite_invariants()
    emit(7, "architecture invariants", r.passed, r.detail)
    assert r.passed


def test_c8_determinism(emit):
    r = V.suite_determinism()
    emit(8, "determinism", r.passed, r.detail)
    assert r.passed


def test_c9_ablation_harness(emit, desk_data):
    out = desk_data / "ablation"
    code = main(["ablate", "--data", str(desk_data / "data"), "--out", str(out), "--preset", "desk"])
    result = json.loads((out / "ablation.json").read_text())
    fields = {"cup_dice", "disc_dice", "accuracy", "mean_vcdr", "suspect_count", "n"}
    arms_ok = all(set(result[arm]["summary"]) == fields for arm in ("blstm_on", "blstm_off"))
    ok = code == 0 and arms_ok and result["blstm_on"]["summary"]["n"] == result["blstm_off"]["summary"]["n"]
    diff = result["difference_on_minus_off"]
    on, off = result["blstm_on"]["summary"], result["blstm_off"]["summary"]
    emit(9, "ablation harness", ok,
         f"on cup {on['cup_dice']:.4f} disc {on['disc_dice']:.4f}; off cup {off['cup_dice']:.4f} "
         f"disc {off['disc_dice']:.4f}; on minus off cup {diff['cup_dice']:+.4f}, disc {diff['disc_dice']:+.4f}")
    assert ok


def test_c5_trained_model_flags_high_cdr(desk_data, tmp_path):
    # depends on the desk checkpoint written by test_c5_desk_training
    checkpoint = desk_data / "run" / "checkpoint"
    if not (checkpoint / "manifest.txt").is_file():
        pytest.skip("desk training did not produce a checkpoint")
    for i in range(3):
        image = tmp_path / f"cdr07_{i}.png"
        write_image(image, gen_phantom(PhantomConfig(cdr=0.7, seed=11), i).image)
        assert main(["segment", "--checkpoint", str(checkpoint), "--image", str(image),
                     "--out", str(tmp_path / f"m{i}.png"), "--preset", "desk"]) == 0
        assert glaucoma_flag(vertical_cdr(read_mask(tmp_path / f"m{i}.png", LabelMap())))
