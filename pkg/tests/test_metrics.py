from __future__ import annotations

import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mblstm.errors import ContractError, UndefinedCdrError
from mblstm.metrics import (REPORT_COLUMNS, SUMMARY_FIELDS, CdrReport, SegMask, aggregate, cup_dice, dice,
                            disc_dice, glaucoma_flag, pixel_accuracy, read_reports_csv, report, vertical_cdr,
                            write_reports_csv, write_summary_json)
from mblstm.verify import brute_metrics, random_label_mask

regions = hnp.arrays(bool, st.tuples(st.integers(1, 8), st.integers(1, 8)))
label_masks = hnp.arrays(np.uint8, st.tuples(st.integers(1, 10), st.integers(1, 10)), elements=st.integers(0, 2))


def region(shape, cells):
    a = np.zeros(shape, bool)
    for r, c in cells:
        a[r, c] = True
    return a


# ------------------------------------------------------------------ dice


def test_dice_identical_disjoint_partial():
    a = region((4, 4), [(0, 0), (0, 1), (1, 0), (1, 1)])
    b = region((4, 4), [(2, 2), (3, 3)])
    assert dice(a, a) == 1.0
    assert dice(a, b) == 0.0
    c = region((4, 4), [(0, 0), (0, 1), (3, 0), (3, 1)])
    assert dice(a, c) == 0.5


def test_dice_both_empty_is_one_and_shape_error():
    z = np.zeros((3, 3), bool)
    assert dice(z, z) == 1.0
    with pytest.raises(ContractError):
        dice(z, np.zeros((3, 4), bool))


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_dice_properties(data):
    a = data.draw(regions)
    b = data.draw(hnp.arrays(bool, a.shape))
    d = dice(a, b)
    assert 0.0 <= d <= 1.0
    assert d == dice(b, a)
    if a.any():
        assert dice(a, a) == 1.0


def test_disc_dice_includes_cup():
    gt = SegMask(np.array([[0, 1, 2, 2]]))
    pred = SegMask(np.array([[0, 2, 2, 1]]))
    assert disc_dice(pred, gt) == 1.0
    assert cup_dice(pred, gt) == 0.5


# ------------------------------------------------------------------ accuracy


def test_pixel_accuracy_examples():
    m = np.zeros((4, 4), np.uint8)
    m[1:3, 1:3] = 1
    assert pixel_accuracy(SegMask(m), SegMask(m)) == 1.0
    wrong = m.copy()
    wrong[0, 0] = 2
    assert pixel_accuracy(SegMask(wrong), SegMask(m)) == 0.9375
    z = SegMask(np.zeros((4, 4)))
    assert pixel_accuracy(z, z) == 1.0
    with pytest.raises(ContractError):
        pixel_accuracy(z, SegMask(np.zeros((4, 5))))


# ------------------------------------------------------------------ vertical CDR


def test_vcdr_extent_example():
    m = np.zeros((30, 30), np.uint8)
    m[5:26, 10:20] = 1
    m[10:21, 12:18] = 2
    assert vertical_cdr(SegMask(m)) == pytest.approx(11 / 21, abs=0)


def test_vcdr_no_cup_and_no_disc():
    m = np.zeros((10, 10), np.uint8)
    m[2:6, 2:6] = 1
    assert vertical_cdr(SegMask(m)) == 0.0
    with pytest.raises(UndefinedCdrError):
        vertical_cdr(SegMask(np.zeros((10, 10))))


@settings(max_examples=60, deadline=None)
@given(label_masks.filter(lambda m: (m > 0).any()), st.integers(0, 5), st.integers(0, 5))
def test_vcdr_invariant_to_horizontal_shift_and_padding(m, shift, pad):
    base = vertical_cdr(m)
    shifted = np.roll(np.pad(m, ((0, 0), (0, shift))), shift, axis=1)
    padded = np.pad(m, ((0, 0), (pad, pad)))
    assert vertical_cdr(shifted) == base
    assert vertical_cdr(padded) == base


@settings(max_examples=60, deadline=None)
@given(label_masks.filter(lambda m: (m > 0).any()), st.data())
def test_flag_monotone_in_cup_growth(m, data):
    # grow the cup inside the existing disc: its row span can only widen
    disc = m > 0
    extra = data.draw(hnp.arrays(bool, m.shape)) & disc
    grown = m.copy()
    grown[extra] = 2
    assert vertical_cdr(grown) >= vertical_cdr(m)
    if glaucoma_flag(vertical_cdr(m)):
        assert glaucoma_flag(vertical_cdr(grown))


def test_glaucoma_flag_boundary():
    assert glaucoma_flag(0.6) is True
    assert glaucoma_flag(0.5) is False
    assert glaucoma_flag(0.0) is False


# ------------------------------------------------------------------ brute-force oracle


def test_metrics_match_set_oracle():
    gen = np.random.default_rng(11)
    for _ in range(50):
        pred, gt = SegMask(random_label_mask(gen, 12)), SegMask(random_label_mask(gen, 12))
        ref = brute_metrics(pred.labels, gt.labels)
        r = report("x", pred, gt)
        assert (r.disc_dice, r.cup_dice, r.pixel_accuracy, r.vcdr) == (
            ref["disc_dice"], ref["cup_dice"], ref["accuracy"], ref["vcdr"])


# ------------------------------------------------------------------ aggregation


def rep(i, disc=1.0, cup=1.0, acc=1.0, vcdr=0.4, flag=False):
    return CdrReport(str(i), disc, cup, acc, vcdr, flag)


def test_aggregate_single_and_mean():
    s = aggregate([rep(0, disc=0.7, cup=0.6, acc=0.95, vcdr=0.55, flag=True)])
    assert (s.disc_dice, s.cup_dice, s.accuracy, s.mean_vcdr, s.suspect_count, s.n) == (0.7, 0.6, 0.95, 0.55, 1, 1)
    s2 = aggregate([rep(0, disc=0.8), rep(1, disc=1.0)])
    assert s2.disc_dice == pytest.approx(0.9)


def test_aggregate_copies_and_empty():
    r = rep(0, disc=0.83, cup=0.71, acc=0.97, vcdr=0.61, flag=True)
    s = aggregate([r] * 7)
    assert s.disc_dice == pytest.approx(0.83) and s.cup_dice == pytest.approx(0.71)
    assert s.accuracy == pytest.approx(0.97) and s.mean_vcdr == pytest.approx(0.61)
    assert s.suspect_count == 7
    with pytest.raises(ContractError):
        aggregate([])


def test_report_with_empty_prediction():
    gt = np.zeros((8, 8), np.uint8)
    gt[2:6, 2:6] = 1
    r = report("e", SegMask(np.zeros((8, 8))), SegMask(gt))
    assert r.disc_dice == 0.0 and r.vcdr is None and r.glaucoma_suspect is False
    s = aggregate([r, rep(1, vcdr=0.3)])
    assert s.mean_vcdr == 0.3 and s.undefined_vcdr == 1


# ------------------------------------------------------------------ serialisation


def test_csv_round_trip_and_columns(tmp_path):
    reports = [rep(0, 0.91, 0.8, 0.99, 0.52, True), rep(1, 0.5, 0.25, 0.9, None, False)]
    path = tmp_path / "r.csv"
    write_reports_csv(reports, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == REPORT_COLUMNS == ("id", "disc_dice", "cup_dice", "accuracy", "vcdr", "flag")
    assert rows[1] == ["0", "0.910000", "0.800000", "0.990000", "0.520000", "1"]
    assert rows[2][4] == ""
    back = read_reports_csv(path)
    assert [r.id for r in back] == ["0", "1"]
    assert back[0].vcdr == 0.52 and back[1].vcdr is None and back[0].glaucoma_suspect


def test_summary_json_fields(tmp_path):
    path = tmp_path / "s.json"
    write_summary_json(aggregate([rep(0), rep(1, vcdr=0.6, flag=True)]), path)
    data = json.loads(path.read_text())
    assert tuple(data) == SUMMARY_FIELDS
    assert data["n"] == 2 and data["suspect_count"] == 1
    assert data["mean_vcdr"] == pytest.approx(0.5)


def test_segmask_rejects_bad_labels():
    with pytest.raises(ContractError):
        SegMask(np.full((2, 2), 3))
    with pytest.raises(ContractError):
        SegMask(np.zeros(4))
