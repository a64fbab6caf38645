import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aoct.cloud import PointCloud, UnitTransform, normalize_pointcloud
from aoct.extract import (
    ALineBoundary,
    boundary_from_intensity,
    boundary_from_mask,
    pointcloud_from_scan,
)
from aoct.geometry import DomainError, ScanConfig, normalize_intensity
from aoct.phantom import NoiseParams, Phantom, phantom_sdf, simulate_scan

CFG600 = ScanConfig(n_columns=4, f_samp=4.0, frame_height=600, d_max=6.0, n_frames=2)


def _column(cfg, rows):
    m = np.zeros((cfg.frame_height, cfg.n_columns), dtype=np.uint8)
    for r in rows:
        m[r, 0] = 1
    return m


def test_mask_center_of_pixel():
    b = boundary_from_mask(_column(CFG600, range(300)), CFG600)
    assert b.d_tiss[0] == pytest.approx(299.5 * 0.01)
    assert np.isnan(b.d_tiss[1:]).all()


def test_mask_gap_merge():
    rows = list(range(100)) + list(range(103, 300))
    b = boundary_from_mask(_column(CFG600, rows), CFG600)
    assert b.d_tiss[0] == pytest.approx(299.5 * 6 / 600)
    assert not b.low_confidence[0]


def test_mask_gap_too_wide_keeps_longest_run():
    rows = list(range(40)) + list(range(45, 300))
    b = boundary_from_mask(_column(CFG600, rows), CFG600, gap=3)
    assert b.d_tiss[0] == pytest.approx(299.5 * 0.01)
    assert b.low_confidence[0]


def test_mask_run_must_start_near_catheter():
    b = boundary_from_mask(_column(CFG600, range(200, 300)), CFG600)
    assert np.isnan(b.d_tiss[0])


def test_empty_mask_is_all_absent():
    b = boundary_from_mask(np.zeros((600, 4)), CFG600)
    assert np.isnan(b.d_tiss).all()


def test_mask_shape_mismatch():
    with pytest.raises(DomainError):
        boundary_from_mask(np.zeros((10, 4)), CFG600)


def _reference_mask_boundary(col, K, gap, px):
    """Loop implementation of the run-merge rule."""
    runs = []
    r = 0
    H = len(col)
    while r < H:
        if col[r]:
            s = r
            while r < H and col[r]:
                r += 1
            runs.append([s, r - 1])
        else:
            r += 1
    merged = []
    for s, e in runs:
        if merged and s - merged[-1][1] - 1 <= gap:
            merged[-1][1] = e
        else:
            merged.append([s, e])
    best = None
    for s, e in merged:
        if s < K and (best is None or e - s > best[1] - best[0]):
            best = (s, e)
    return math.nan if best is None else (best[1] + 0.5) * px


@given(arrays(np.uint8, (48, 6), elements=st.integers(0, 1)), st.integers(0, 5), st.integers(1, 48))
def test_mask_matches_reference(mask, gap, K):
    cfg = ScanConfig(n_columns=6, f_samp=6.0, frame_height=48)
    b = boundary_from_mask(mask, cfg, start_rows=K, gap=gap)
    for j in range(6):
        ref = _reference_mask_boundary(mask[:, j], K, gap, cfg.pixel_size)
        if math.isnan(ref):
            assert math.isnan(b.d_tiss[j])
        else:
            assert b.d_tiss[j] == pytest.approx(ref, abs=1e-15)


def test_intensity_recovers_noiseless_band(stenosed, small_cfg):
    scan = simulate_scan(stenosed, small_cfg, NoiseParams.noiseless())
    for i in range(small_cfg.n_frames):
        frame, _ = normalize_intensity(scan.frames[i])
        b = boundary_from_intensity(frame, small_cfg, i)
        assert np.all(np.abs(b.d_tiss - scan.boundaries[i]) <= small_cfg.pixel_size + 1e-12)


def test_intensity_empty_and_zero_threshold(small_cfg):
    empty = np.zeros((small_cfg.frame_height, small_cfg.n_columns))
    assert np.isnan(boundary_from_intensity(empty, small_cfg).d_tiss).all()
    b = boundary_from_intensity(empty, small_cfg, threshold=0.0)
    np.testing.assert_array_equal(b.d_tiss, 0.0)


def test_intensity_median_filter_removes_spike(small_cfg):
    H, N = small_cfg.frame_height, small_cfg.n_columns
    frame = np.zeros((H, N))
    frame[60:, :] = 1.0
    frame[20:, 7] = 1.0
    raw = boundary_from_intensity(frame, small_cfg)
    smooth = boundary_from_intensity(frame, small_cfg, median_width=5)
    assert raw.d_tiss[7] < raw.d_tiss[6]
    assert smooth.d_tiss[7] == pytest.approx(raw.d_tiss[6])


def test_cloud_single_ring():
    cfg = ScanConfig(n_columns=16, f_samp=16.0, n_frames=1, z_start=2.0, v_cath=0.0 + 1e-9)
    pc = pointcloud_from_scan([ALineBoundary(0, np.full(16, 3.0))], cfg)
    assert len(pc) == 16
    np.testing.assert_allclose(np.hypot(pc.points[:, 0], pc.points[:, 1]), 3.0, atol=1e-12)
    np.testing.assert_array_equal(pc.provenance[:, 1], np.arange(16))


def test_cloud_from_truth_lies_on_tube(small_cfg):
    scan = simulate_scan(Phantom(), small_cfg)
    pc = pointcloud_from_scan([ALineBoundary(i, d) for i, d in enumerate(scan.boundaries)], small_cfg)
    assert len(pc) == small_cfg.n_frames * small_cfg.n_columns
    assert np.abs(np.hypot(pc.points[:, 0], pc.points[:, 1]) - 3.0).max() < 1e-9


def test_cloud_from_masks_within_half_pixel(awkward, small_cfg):
    scan = simulate_scan(awkward, small_cfg, NoiseParams.noiseless())
    bs = [boundary_from_mask(m, small_cfg, i) for i, m in enumerate(scan.masks)]
    pc = pointcloud_from_scan(bs, small_cfg)
    assert np.abs(phantom_sdf(awkward, pc.points)).max() <= small_cfg.pixel_size / 2 + 1e-9


def test_cloud_skips_absent_and_rejects_duplicates(small_cfg):
    d = np.full(small_cfg.n_columns, 2.0)
    d[::2] = np.nan
    pc = pointcloud_from_scan([ALineBoundary(1, d)], small_cfg)
    assert len(pc) == small_cfg.n_columns // 2
    empty = pointcloud_from_scan([ALineBoundary(0, np.full(small_cfg.n_columns, np.nan))], small_cfg)
    assert len(empty) == 0
    with pytest.raises(DomainError):
        pointcloud_from_scan([ALineBoundary(1, d), ALineBoundary(1, d)], small_cfg)


# -- normalization


def test_normalize_antipodal_pair():
    pts = np.array([[5.0, 0, 0], [-5.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
    _, tf = normalize_pointcloud(PointCloud(pts))
    np.testing.assert_allclose(tf.center, 0.0)
    assert tf.scale == pytest.approx(5.25)


def test_normalize_rejects_degenerate():
    with pytest.raises(DomainError):
        normalize_pointcloud(PointCloud(np.ones((10, 3))))
    with pytest.raises(DomainError):
        normalize_pointcloud(PointCloud(np.eye(3)))


@given(arrays(float, (20, 3), elements=st.floats(-100, 100)))
def test_normalize_round_trip(pts):
    if np.ptp(pts, axis=0).max() < 1e-3:
        return
    unit, tf = normalize_pointcloud(PointCloud(pts))
    assert np.linalg.norm(unit.points, axis=1).max() <= 1.0 + 1e-12
    back = tf.to_world(unit.points)
    assert np.abs(back - pts).max() <= 1e-12 * max(1.0, np.abs(pts).max())


def test_transform_serialization():
    tf = UnitTransform(np.array([1.0, 2.0, 3.0]), 4.5)
    again = UnitTransform.from_dict(tf.to_dict())
    np.testing.assert_array_equal(again.center, tf.center)
    assert again.scale == tf.scale
