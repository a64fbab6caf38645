import math

import hypothesis
import numpy as np
import pytest

from aoct.geometry import ScanConfig
from aoct.phantom import Phantom, Stenosis

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def small_cfg():
    """64 columns, 128 rows, 6 frames starting mid-phantom."""
    return ScanConfig(n_frames=6, n_columns=64, f_samp=64.0, frame_height=128, z_start=20.0, v_cath=1.0)


@pytest.fixture
def stenosed():
    return Phantom(stenoses=(Stenosis(23.0, 0.4, 1.5),))


@pytest.fixture
def awkward():
    """Elliptic, stenosed, off-centre lumen."""
    return Phantom(stenoses=(Stenosis(23.0, 0.4, 1.5),), ellipticity=0.8, ellipse_angle=0.4,
                   centerline_offset=(0.3, -0.2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1)[:, None]


def tilted(cfg, phi=math.pi / 3):
    from dataclasses import replace

    return replace(cfg, phi_cath=phi)


ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def record():
    """Store one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def _record(key: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[key] = f"{key}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE[key])
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
