import numpy as np
import pytest

from app.core.exceptions import EmptyForegroundError, InvalidArgumentError, InvalidStatsError
from app.services.volume_service import (
    BBox,
    LabelMap,
    NormStats,
    Volume,
    bbox_of_foreground,
    body_box,
    clip_and_normalize,
    compute_foreground_stats,
    crop,
    full_frame_box,
    load_label,
    load_volume,
    resample_image,
    resample_label,
    restore_to_canvas,
    save_label,
    save_volume,
    scale_bbox,
)


# --- Tipos ---

def test_volume_rejects_non_finite_and_bad_spacing():
    with pytest.raises(InvalidArgumentError):
        Volume(np.full((2, 2, 2), np.nan))
    with pytest.raises(InvalidArgumentError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(InvalidArgumentError):
        Volume(np.zeros((2, 2)))


def test_label_map_checks_class_range():
    with pytest.raises(InvalidArgumentError):
        LabelMap(np.full((2, 2, 2), 15))
    with pytest.raises(InvalidArgumentError):
        LabelMap(np.full((2, 2, 2), 0.5))
    assert LabelMap(np.full((1, 1, 1), 14.0)).data.dtype == np.uint8


def test_bbox_invariants():
    with pytest.raises(InvalidArgumentError):
        BBox((0, 0, 0), (0, 1, 1), (2, 2, 2))
    with pytest.raises(InvalidArgumentError):
        BBox((0, 0, 0), (3, 1, 1), (2, 2, 2))
    assert BBox((1, 0, 0), (2, 2, 2), (2, 2, 2)).extent == (1, 2, 2)


# --- Reamostragem ---

def test_resample_constant_volume_stays_constant():
    v = Volume(np.full((5, 7, 3), 7.0))
    out = resample_image(v, (11, 2, 6))

    assert out.shape == (11, 2, 6)
    assert np.allclose(out.data, 7.0)


def test_resample_identity_is_bitwise_copy():
    v = Volume(np.random.default_rng(1).normal(size=(4, 5, 6)), (2.0, 1.0, 0.5))
    out = resample_image(v, v.shape)

    assert np.array_equal(out.data, v.data)
    assert out.spacing == v.spacing
    assert out.data is not v.data


def test_resample_ramp_matches_trilinear_oracle():
    ramp = np.broadcast_to(np.arange(8, dtype=np.float32)[:, None, None], (8, 3, 3)).copy()
    out = resample_image(Volume(ramp, (1.0, 1.0, 1.0)), (4, 3, 3))

    # centro do voxel alvo i cai em (i + 0.5) * 2 - 0.5 no grid de origem
    expected = np.clip((np.arange(4) + 0.5) * 2 - 0.5, 0, 7)
    assert np.allclose(out.data[:, 1, 1], expected, atol=1e-5)
    assert out.spacing == (2.0, 1.0, 1.0)


def test_resample_rejects_bad_target():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(InvalidArgumentError):
        resample_image(v, (0, 2, 2))
    with pytest.raises(InvalidArgumentError):
        resample_label(LabelMap(np.zeros((2, 2, 2))), (2, 2))


def test_resample_label_checker_matches_nearest_oracle():
    checker = (np.indices((4, 4, 4)).sum(axis=0) % 2).astype(np.uint8) * 3
    out = resample_label(LabelMap(checker), (7, 3, 5))

    for z, y, x in np.ndindex(7, 3, 5):
        src = tuple(min(int((i + 0.5) * s / t), s - 1) for i, s, t in zip((z, y, x), (4, 4, 4), (7, 3, 5)))
        assert out.data[z, y, x] == checker[src]


def test_resample_label_never_adds_classes():
    rng = np.random.default_rng(2)
    for _ in range(20):
        data = rng.choice(np.array([0, 2, 9, 14], dtype=np.uint8), size=tuple(rng.integers(2, 9, 3)))
        out = resample_label(LabelMap(data), tuple(rng.integers(1, 12, 3)))
        assert set(np.unique(out.data)) <= set(np.unique(data))


# --- Normalização ---

def test_foreground_stats_match_sort_oracle():
    values = np.arange(1000, dtype=np.float32).reshape(10, 10, 10)
    label = LabelMap(np.ones((10, 10, 10)))
    stats = compute_foreground_stats([(Volume(values), label)])

    ordered = np.sort(values.ravel().astype(np.float64))
    rank = 0.005 * (ordered.size - 1)
    lo = ordered[int(np.floor(rank))] + (rank - np.floor(rank)) * (ordered[int(np.ceil(rank))] - ordered[int(np.floor(rank))])
    assert stats.clip_lo == pytest.approx(lo)
    assert stats.mean == pytest.approx(499.5)
    assert stats.std == pytest.approx(np.std(ordered))


def test_foreground_stats_constant_floor_and_order_independence():
    v = Volume(np.full((3, 3, 3), 5.0))
    label = LabelMap(np.ones((3, 3, 3)))
    stats = compute_foreground_stats([(v, label)])
    assert (stats.clip_lo, stats.clip_hi, stats.mean) == (5.0, 5.0, 5.0)
    assert 0 < stats.std <= 1e-8

    rng = np.random.default_rng(3)
    a = (Volume(rng.normal(size=(4, 4, 4))), LabelMap(rng.integers(0, 3, (4, 4, 4))))
    b = (Volume(rng.normal(size=(4, 4, 4))), LabelMap(rng.integers(0, 3, (4, 4, 4))))
    ab, ba = compute_foreground_stats([a, b]), compute_foreground_stats([b, a])
    assert ab.mean == pytest.approx(ba.mean)
    assert ab.clip_hi == pytest.approx(ba.clip_hi)


def test_foreground_stats_without_foreground():
    with pytest.raises(EmptyForegroundError):
        compute_foreground_stats([(Volume(np.ones((2, 2, 2))), LabelMap(np.zeros((2, 2, 2))))])


def test_clip_and_normalize_per_voxel():
    rng = np.random.default_rng(4)
    v = Volume(rng.normal(0, 100, (3, 3, 3)))
    stats = NormStats(clip_lo=-50.0, clip_hi=80.0, mean=10.0, std=20.0)
    out = clip_and_normalize(v, stats)

    for idx in np.ndindex(3, 3, 3):
        expected = (min(max(float(v.data[idx]), -50.0), 80.0) - 10.0) / 20.0
        assert out.data[idx] == pytest.approx(expected, abs=1e-5)

    with pytest.raises(InvalidStatsError):
        clip_and_normalize(v, NormStats(0.0, 1.0, 0.0, 0.0))


# --- Caixas ---

def test_bbox_of_single_voxel_and_empty():
    data = np.zeros((6, 6, 6), dtype=np.uint8)
    assert bbox_of_foreground(LabelMap(data), 0.0) is None

    data[2, 3, 4] = 1
    box = bbox_of_foreground(LabelMap(data), 0.0)
    assert (box.lo, box.hi) == ((2, 3, 4), (3, 4, 5))


def test_bbox_of_two_blobs_matches_exhaustive_scan():
    data = np.zeros((20, 20, 20), dtype=np.uint8)
    data[2:5, 3:6, 4:7] = 1
    data[12:15, 10:18, 9:11] = 2
    box = bbox_of_foreground(LabelMap(data), 0.1)

    coords = np.argwhere(data > 0)
    for axis in range(3):
        a, b = coords[:, axis].min(), coords[:, axis].max() + 1
        pad = int(np.ceil(0.1 * (b - a) - 1e-9))
        assert box.lo[axis] == max(0, a - pad)
        assert box.hi[axis] == min(20, b + pad)


def test_bbox_contains_every_foreground_voxel():
    rng = np.random.default_rng(5)
    for _ in range(20):
        data = (rng.random((7, 8, 9)) > 0.97).astype(np.uint8)
        box = bbox_of_foreground(LabelMap(data), 0.0)
        if box is None:
            continue
        for idx in np.argwhere(data):
            assert all(lo <= i < hi for i, lo, hi in zip(idx, box.lo, box.hi))


def test_body_box_falls_back_to_full_frame():
    v = Volume(np.full((4, 4, 4), -1000.0))
    assert body_box(v, -500.0) == full_frame_box((4, 4, 4))


def test_scale_bbox_exact_and_identity():
    box = BBox((0, 0, 0), (64, 64, 64), (128, 128, 128))
    assert scale_bbox(box, (128,) * 3, (512,) * 3).hi == (256, 256, 256)
    assert scale_bbox(box, (128,) * 3, (128,) * 3) == box


def test_scale_bbox_odd_ratio_covers_source_voxels():
    box = BBox((10, 0, 37), (50, 1, 100), (100, 100, 100))
    out = scale_bbox(box, (100,) * 3, (37,) * 3)

    assert out.lo == (3, 0, 13)
    assert out.hi == (19, 1, 37)
    # todo voxel de origem dentro da caixa cai num voxel alvo dentro da caixa escalada
    for axis in range(3):
        for i in range(box.lo[axis], box.hi[axis]):
            j = int((i + 0.5) * 37 / 100)
            assert out.lo[axis] <= j < out.hi[axis]


def test_crop_and_restore_round_trip():
    rng = np.random.default_rng(6)
    data = rng.integers(0, 5, (9, 8, 7)).astype(np.uint8)
    label = LabelMap(data)
    box = BBox((2, 1, 3), (7, 8, 5), (9, 8, 7))

    cropped = crop(label, box)
    assert np.array_equal(cropped.data, data[2:7, 1:8, 3:5])

    restored = restore_to_canvas(cropped, box, (9, 8, 7))
    expected = np.zeros_like(data)
    expected[2:7, 1:8, 3:5] = data[2:7, 1:8, 3:5]
    assert np.array_equal(restored.data, expected)


def test_restore_full_frame_and_empty():
    label = LabelMap(np.random.default_rng(7).integers(0, 3, (4, 4, 4)))
    assert np.array_equal(restore_to_canvas(label, full_frame_box((4, 4, 4)), (4, 4, 4)).data, label.data)

    empty = LabelMap(np.zeros((2, 2, 2)))
    out = restore_to_canvas(empty, BBox((1, 1, 1), (3, 3, 3), (5, 5, 5)), (5, 5, 5))
    assert out.shape == (5, 5, 5) and not out.data.any()


def test_crop_and_restore_reject_out_of_frame():
    with pytest.raises(InvalidArgumentError):
        crop(Volume(np.zeros((3, 3, 3))), BBox((0, 0, 0), (4, 4, 4), (4, 4, 4)))
    with pytest.raises(InvalidArgumentError):
        restore_to_canvas(LabelMap(np.zeros((2, 2, 2))), BBox((0, 0, 0), (2, 2, 2), (4, 4, 4)), (3, 3, 3))


def test_volume_and_label_io(tmp_path):
    v = Volume(np.random.default_rng(8).normal(size=(3, 4, 5)), (0.8, 0.8, 2.5))
    save_volume(v, str(tmp_path / "v.svol"))
    back = load_volume(str(tmp_path / "v.svol"))
    assert np.array_equal(back.data, v.data) and back.spacing == v.spacing

    l = LabelMap(np.full((2, 2, 2), 14))
    save_label(l, str(tmp_path / "l.svol"))
    assert np.array_equal(load_label(str(tmp_path / "l.svol")).data, l.data)
