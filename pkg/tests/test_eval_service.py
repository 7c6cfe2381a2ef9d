import csv
import itertools
import time

import numpy as np
import pytest

from app.core.exceptions import CurveError, InvalidArgumentError, ShapeMismatchError
from app.schemas.report import CASE_COLUMNS, CaseResult, ClassMetric
from app.services.eval_service import (
    MemTimeCurve,
    auc_mem_time,
    build_report,
    dsc,
    evaluate_case,
    format_accuracy_table,
    format_efficiency_table,
    nsd,
    profile_case,
    surface,
    write_report_csv,
)
from app.services.volume_service import LabelMap
from tests.helpers import blocks, random_labels


# --- DSC ---

def test_dsc_examples():
    pred = LabelMap(np.array([[[1, 1, 0, 0]]], dtype=np.uint8))
    gt = LabelMap(np.array([[[1, 0, 1, 0]]], dtype=np.uint8))
    assert dsc(pred, gt, 1) == pytest.approx(0.5)
    assert dsc(gt, gt, 1) == 1.0
    assert dsc(pred, gt, 7) == 1.0

    disjoint = LabelMap(np.array([[[0, 0, 0, 1]]], dtype=np.uint8))
    assert dsc(pred, disjoint, 1) == 0.0

    with pytest.raises(ShapeMismatchError):
        dsc(pred, LabelMap(np.zeros((1, 1, 3), np.uint8)), 1)


# --- NSD ---

def _brute_nsd(pred, gt, class_id, tol):
    sp = np.argwhere(surface(pred.data == class_id))
    sg = np.argwhere(surface(gt.data == class_id))
    spacing = np.asarray(pred.spacing)

    def near(src, dst):
        return sum(
            1 for a in src if min(np.sqrt((((a - b) * spacing) ** 2).sum()) for b in dst) <= tol
        )

    return (near(sp, sg) + near(sg, sp)) / (len(sp) + len(sg))


def test_nsd_matches_all_pairs_oracle():
    rng = np.random.default_rng(0)
    for spacing in [(1.0, 1.0, 1.0), (1.0, 1.0, 2.0)]:
        for _ in range(5):
            pred = LabelMap(random_labels(rng, (8, 9, 10), [1], 0.3), spacing)
            gt = LabelMap(random_labels(rng, (8, 9, 10), [1], 0.3), spacing)
            assert nsd(pred, gt, 1, 1.5) == pytest.approx(_brute_nsd(pred, gt, 1, 1.5))
            assert nsd(pred, gt, 1, 1.5) == pytest.approx(nsd(gt, pred, 1, 1.5))


def test_nsd_special_cases():
    cube = blocks((12, 12, 12), {1: ((2, 2, 2), (6, 6, 6))})
    shifted = blocks((12, 12, 12), {1: ((2, 2, 3), (6, 6, 7))})
    far = blocks((12, 12, 12), {1: ((8, 8, 8), (11, 11, 11))})

    assert nsd(cube, cube, 1, 1.0) == 1.0
    assert nsd(cube, shifted, 1, 1.0) == 1.0
    assert nsd(cube, far, 1, 1.0) == 0.0
    assert nsd(cube, cube, 5, 1.0) == 1.0
    assert nsd(cube, LabelMap(np.zeros((12, 12, 12), np.uint8)), 1, 1.0) == 0.0

    with pytest.raises(ShapeMismatchError):
        nsd(cube, LabelMap(cube.data, (1.0, 1.0, 2.0)), 1, 1.0)
    with pytest.raises(InvalidArgumentError):
        nsd(cube, cube, 1, 0.0)


def test_evaluate_case_marks_both_empty():
    cube = blocks((8, 8, 8), {1: ((2, 2, 2), (5, 5, 5))})
    metrics = evaluate_case(cube, cube, [1, 14], 1.0)
    assert [m.class_id for m in metrics] == [1, 14]
    assert [m.both_empty for m in metrics] == [False, True]
    assert all(m.dsc == 1.0 and m.nsd == 1.0 for m in metrics)


# --- Curva memória-tempo ---

def test_auc_closed_forms():
    assert auc_mem_time(MemTimeCurve([(0.0, 300.0), (2.5, 300.0)])) == pytest.approx(750.0)
    assert auc_mem_time(MemTimeCurve([(0.0, 0.0), (1.0, 2.0)])) == pytest.approx(1.0)


def test_auc_matches_trapezoid_oracle_and_concat_is_additive():
    rng = np.random.default_rng(1)
    times = np.cumsum(rng.uniform(0.01, 1.0, 10))
    mems = rng.uniform(0, 4000, 10)
    samples = list(zip(times.tolist(), mems.tolist()))

    expected = sum((t1 - t0) * (m0 + m1) / 2 for (t0, m0), (t1, m1) in zip(samples, samples[1:]))
    assert auc_mem_time(MemTimeCurve(samples)) == pytest.approx(expected)

    left, right = MemTimeCurve(samples[:5]), MemTimeCurve(samples[4:])
    joined = left.concat(right)
    assert joined.samples == samples
    assert auc_mem_time(joined) == pytest.approx(auc_mem_time(left) + auc_mem_time(right))
    assert joined.max_mem == pytest.approx(max(mems))


def test_invalid_curves():
    for samples in ([(0.0, 1.0)], [(0.0, 1.0), (0.0, 2.0)], [(0.0, 1.0), (1.0, -1.0)]):
        with pytest.raises(CurveError):
            auc_mem_time(MemTimeCurve(samples))
    with pytest.raises(CurveError):
        MemTimeCurve([(0.0, 1.0), (1.0, 1.0)]).concat(MemTimeCurve([(2.0, 1.0), (3.0, 1.0)]))


# --- Profiling ---

def test_profile_case_measures_sleep():
    runtime, curve = profile_case(lambda: time.sleep(0.5), interval_s=0.02, source="rss", case_id="c1")
    assert 0.5 <= runtime <= 0.8
    curve.validate()
    assert len(curve.samples) >= 2
    assert curve.samples[0][0] == 0.0
    assert curve.samples[-1][0] == pytest.approx(runtime, abs=0.05)
    assert curve.max_mem > 0


def test_profile_case_failure_keeps_partial_measurements():
    def boom():
        time.sleep(0.05)
        raise RuntimeError("falhou")

    with pytest.raises(RuntimeError) as info:
        profile_case(boom, interval_s=0.01, source="rss")
    assert info.value.runtime_s >= 0.05
    assert len(info.value.curve.samples) >= 2


# --- Relatório ---

def _rows():
    return [
        CaseResult(
            case_id="0001", image_size="(16, 16, 16)", runtime_s=11.76, max_mem_mb=3220.0, auc_mb_s=30000.0,
            metrics=[ClassMetric(class_id=1, dsc=0.5, nsd=0.6), ClassMetric(class_id=14, dsc=1.0, nsd=1.0, both_empty=True)],
        ),
        CaseResult(
            case_id="0002", image_size="(16, 16, 16)", runtime_s=16.0, max_mem_mb=5000.0, auc_mb_s=60000.0,
            metrics=[ClassMetric(class_id=1, dsc=1.0, nsd=1.0), ClassMetric(class_id=14, dsc=0.2, nsd=0.4)],
        ),
    ]


def test_report_aggregates_and_flags():
    report = build_report(_rows(), time_tolerance_s=15.0, memory_tolerance_mb=4096.0)
    cases = report.by_case()

    assert not cases["0001"].time_flag and not cases["0001"].memory_flag
    assert cases["0002"].time_flag and cases["0002"].memory_flag
    assert report.flagged_cases == ["0002"]

    liver = report.class_summary(1)
    assert liver.name == "Liver"
    assert liver.dsc_mean == pytest.approx(0.75) and liver.dsc_sd == pytest.approx(0.25)
    assert report.organ_dsc_mean == pytest.approx(0.75)
    assert report.tumor_dsc_mean == pytest.approx(0.6)
    assert report.class_summary(14).both_empty_cases == 1
    assert report.runtime_mean_s == pytest.approx((11.76 + 16.0) / 2)


def test_report_csv_and_tables(tmp_path):
    report = build_report(_rows())
    path = tmp_path / "out" / "metrics.csv"
    write_report_csv(report, str(path))

    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == CASE_COLUMNS + ["dsc_1", "nsd_1", "dsc_14", "nsd_14"]
    assert [r[0] for r in rows[1:]] == ["0001", "0002"]
    assert rows[2][5:7] == ["1", "1"]

    accuracy = format_accuracy_table(report)
    assert "Liver" in accuracy and "75.00" in accuracy and "Tumor" in accuracy
    efficiency = format_efficiency_table(report)
    assert "11.76" in efficiency and "time,memory" in efficiency


def test_report_of_oracle_predictions_is_perfect():
    rng = np.random.default_rng(2)
    rows = []
    for i in range(3):
        label = LabelMap(random_labels(rng, (8, 8, 8), [1, 2, 14], 0.4))
        rows.append(CaseResult(case_id=f"{i:04d}", metrics=evaluate_case(label, label, [1, 2, 3, 14], 1.0)))
    report = build_report(rows)
    assert all(s.dsc_mean == 1.0 and s.nsd_mean == 1.0 for s in report.classes)
    assert report.runtime_mean_s is None


def test_surface_of_solid_cube():
    cube = np.zeros((5, 5, 5), dtype=bool)
    cube[1:4, 1:4, 1:4] = True
    border = surface(cube)
    assert border.sum() == 26 and not border[2, 2, 2]
    for idx in itertools.product(range(5), repeat=3):
        if border[idx]:
            assert cube[idx]
