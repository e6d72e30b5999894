import numpy as np
import pytest
from scipy import ndimage as ndi

from flowattack.experiments import AttackCache, synthetic_scenes


def textured(rng, h, w, sigma=1.5):
    """Smooth, contrast-stretched RGB texture in [0.1, 0.9] with correlated channels."""
    base = ndi.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    lo, hi = np.percentile(base, [2, 98])
    base = np.clip((base - lo) / (hi - lo), 0.0, 1.0)
    tint = rng.uniform(0.7, 1.0, size=3)
    img = 0.1 + 0.8 * base[..., None] * tint
    return img


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def suite20():
    return synthetic_scenes(20, 0, 64)


@pytest.fixture(scope="session")
def suite_cache():
    # Shared across test modules so identical attacks are computed once per session.
    return AttackCache()


@pytest.fixture(scope="session")
def scene32():
    from flowattack.scenegen import render, scene_suite

    return render(scene_suite(1, 7, size=32)[0])


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
