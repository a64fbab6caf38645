import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aoct.extract import boundary_from_mask
from aoct.geometry import DomainError, ScanConfig, aline_pose, sample_time, to_cartesian, to_cylindrical
from aoct.phantom import (
    ConfigError,
    NoiseParams,
    Phantom,
    Stenosis,
    cast_aline,
    cast_alines,
    phantom_radius,
    phantom_sdf,
    simulate_scan,
)

TUBE = Phantom()


def test_radius_plain():
    assert phantom_radius(TUBE, 10.0, 1.0) == 3.0


def test_radius_at_waist():
    ph = Phantom(stenoses=(Stenosis(20.0, 0.5, 1.0),))
    assert phantom_radius(ph, 20.0, 0.3) == pytest.approx(1.5)
    assert phantom_radius(ph, 21.0, 0.3) == pytest.approx(3 * (1 - 0.5 * math.exp(-0.5)))
    assert phantom_radius(ph, 21.0, 0.3) == pytest.approx(2.0902, abs=1e-4)


def test_radius_elliptic_axes():
    ph = Phantom(ellipticity=0.5, ellipse_angle=0.0)
    # unit major axis along theta = 0, minor axis along theta = pi/2
    assert phantom_radius(ph, 1.0, 0.0) == pytest.approx(3.0)
    assert phantom_radius(ph, 1.0, math.pi / 2) == pytest.approx(1.5)


def test_radius_outside_domain():
    with pytest.raises(DomainError):
        phantom_radius(TUBE, -0.1, 0.0)
    with pytest.raises(DomainError):
        phantom_radius(TUBE, TUBE.length + 1, 0.0)


@pytest.mark.parametrize("r,expected", [(2.0, -1.0), (3.0, 0.0), (4.5, 1.5)])
def test_sdf_tube(r, expected):
    assert phantom_sdf(TUBE, [r, 0.0, 5.0]) == pytest.approx(expected, abs=1e-15)


def test_sdf_capped_ends():
    ph = Phantom(capped=True, length=10.0)
    assert phantom_sdf(ph, [0.0, 0.0, -2.0]) == pytest.approx(2.0)
    assert phantom_sdf(ph, [0.0, 0.0, 5.0]) == pytest.approx(-3.0)


def _brute_sdf(ph, p, n=1500):
    """Distance by dense sampling plus local refinement of the closest sample."""
    from scipy.optimize import minimize

    zs = np.linspace(max(p[2] - 8, 0), min(p[2] + 8, ph.length), n)
    th = np.linspace(0, 2 * math.pi, 720, endpoint=False)
    Z, T = np.meshgrid(zs, th, indexing="ij")
    cx, cy = ph.centerline_offset

    def surf(z, t):
        r = ph.base_radius * (1 - sum(s.depth * np.exp(-0.5 * ((z - s.z0) / s.width) ** 2) for s in ph.stenoses))
        b = ph.ellipticity
        psi = t - ph.ellipse_angle
        r = r * b / np.sqrt(b * b + (1 - b * b) * np.sin(psi) ** 2)
        return np.stack([cx + r * np.sin(t), cy + r * np.cos(t), z], -1)

    S = surf(Z, T)
    d2 = ((S - p) ** 2).sum(-1)
    i = np.unravel_index(np.argmin(d2), d2.shape)
    res = minimize(lambda x: ((surf(x[0], x[1]) - p) ** 2).sum(), [Z[i], T[i]], method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-24, "maxiter": 4000})
    return math.sqrt(res.fun)


@pytest.mark.parametrize("p", [[0.5, 0.2, 23.0], [1.0, 1.0, 22.0], [2.5, -1.0, 24.5], [-0.3, 0.1, 23.3]])
def test_sdf_stenosed_matches_brute_force(awkward, p):
    p = np.array(p)
    assert abs(phantom_sdf(awkward, p)) == pytest.approx(_brute_sdf(awkward, p), abs=1e-6)


def test_sdf_sign(awkward):
    assert phantom_sdf(awkward, [0.3, -0.2, 23.0]) < 0
    assert phantom_sdf(awkward, [5.0, 0.0, 23.0]) > 0


def test_cast_planar_and_tilted():
    cfg = ScanConfig()
    assert cast_aline(TUBE, 0.3, cfg) == pytest.approx(3.0)
    tilted = cfg.with_(phi_cath=math.pi / 3)
    assert cast_aline(TUBE, 0.3, tilted) == pytest.approx(2 * math.sqrt(3), abs=1e-12)


def test_cast_at_waist():
    ph = Phantom(stenoses=(Stenosis(20.0, 0.5, 1.0),))
    cfg = ScanConfig(z_start=20.0)
    d = cast_aline(ph, 0.0, cfg)
    assert d == pytest.approx(1.5, abs=1e-9)
    theta, z = aline_pose(0.0, cfg)
    assert d == pytest.approx(phantom_radius(ph, z, theta), abs=1e-9)


def test_cast_no_wall_is_reported():
    cfg = ScanConfig(d_max=2.0)
    assert cast_aline(TUBE, 0.0, cfg) is None


def test_cast_catheter_outside_lumen():
    ph = Phantom(stenoses=(Stenosis(20.0, 0.5, 1.0),), centerline_offset=(1.6, 0.0))
    with pytest.raises(DomainError):
        cast_alines(ph, [0.0], ScanConfig(z_start=20.0))


@given(t=st.floats(0, 3.0), phi=st.floats(0.6, math.pi - 0.6))
def test_hits_lie_on_wall(t, phi):
    ph = Phantom(stenoses=(Stenosis(23.0, 0.4, 1.5),), ellipticity=0.8, ellipse_angle=0.4,
                 centerline_offset=(0.3, -0.2))
    cfg = ScanConfig(z_start=22.0, n_columns=64, f_samp=64.0, n_frames=4, phi_cath=phi)
    d = cast_alines(ph, [t], cfg)[0]
    theta, z = aline_pose(t, cfg)
    v = np.array([math.sin(phi) * math.sin(theta), math.sin(phi) * math.cos(theta), -math.cos(phi)])
    p = np.array([0.0, 0.0, z]) + d * v
    assert abs(phantom_sdf(ph, p)) < 1e-6


def test_phantom_diagnostics():
    bad = Phantom(base_radius=-1, stenoses=(Stenosis(1, 0.6, 1), Stenosis(2, 0.5, 0)))
    msgs = bad.diagnostics()
    assert any("base_radius" in m for m in msgs)
    assert any("width" in m for m in msgs)
    assert any("sum" in m for m in msgs)
    assert Phantom(centerline_offset=(3.0, 0.0)).diagnostics()


# -- simulate_scan


def test_noiseless_tube_scan():
    cfg = ScanConfig(n_frames=3, n_columns=32, f_samp=32.0, frame_height=600)
    scan = simulate_scan(TUBE, cfg, NoiseParams.noiseless())
    assert np.all(scan.masks.sum(axis=1) == 300)
    np.testing.assert_allclose(scan.boundaries, 3.0, rtol=0, atol=0)
    assert scan.frames.shape == (3, 600, 32) and scan.frames.dtype == np.uint8


def test_stenosis_minimum_near_waist():
    cfg = ScanConfig(n_frames=20, n_columns=32, f_samp=32.0, frame_height=256, v_cath=1.0, z_start=15.0)
    ph = Phantom(stenoses=(Stenosis(24.3, 0.4, 2.0),))
    scan = simulate_scan(ph, cfg, NoiseParams.noiseless())
    frame = np.unravel_index(np.nanargmin(scan.boundaries), scan.boundaries.shape)[0]
    t = sample_time(np.arange(cfg.n_frames), np.zeros(cfg.n_frames, int), cfg)
    z = aline_pose(t + 0.5 * cfg.n_columns / cfg.f_samp, cfg)[1]
    assert frame in np.argsort(np.abs(z - 24.3))[:2]


def test_scan_consistency_oracle(awkward, small_cfg):
    scan = simulate_scan(awkward, small_cfg.with_(phi_cath=1.2))
    cfg = scan.cfg
    f, c = np.meshgrid(np.arange(cfg.n_frames), np.arange(cfg.n_columns), indexing="ij")
    pts = to_cartesian(to_cylindrical(f.ravel(), c.ravel(), scan.boundaries.ravel(), cfg))
    assert np.abs(phantom_sdf(awkward, pts)).max() < 1e-6


def test_mask_boundary_duality(awkward, small_cfg):
    scan = simulate_scan(awkward, small_cfg, NoiseParams.noiseless())
    half = small_cfg.pixel_size / 2
    for i in range(small_cfg.n_frames):
        b = boundary_from_mask(scan.masks[i], small_cfg, i)
        assert np.all(np.abs(b.d_tiss - scan.boundaries[i]) <= half + 1e-12)


def test_scan_determinism(stenosed, small_cfg):
    a = simulate_scan(stenosed, small_cfg, NoiseParams(mask_jitter_px=1.0, mask_dropout=0.1), seed=7)
    b = simulate_scan(stenosed, small_cfg, NoiseParams(mask_jitter_px=1.0, mask_dropout=0.1), seed=7)
    c = simulate_scan(stenosed, small_cfg, NoiseParams(mask_jitter_px=1.0, mask_dropout=0.1), seed=8)
    for name in ("frames", "masks", "teacher_masks", "boundaries"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.frames.tobytes() != c.frames.tobytes()


def test_coverage_violation():
    cfg = ScanConfig(z_start=55.0)
    with pytest.raises(ConfigError, match="phantom"):
        simulate_scan(TUBE, cfg)
