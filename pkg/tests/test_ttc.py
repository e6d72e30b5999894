import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowattack.ttc import NEUTRAL_GRAY, S_MIN, TTCMap, ttc_colormap, ttc_error, ttc_from_flow


def radial(k, h=32, w=32, cx=None, cy=None, shift=(0.0, 0.0)):
    cx = (w - 1) / 2 if cx is None else cx
    cy = (h - 1) / 2 if cy is None else cy
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return np.stack([k * (xx - cx) + shift[0], k * (yy - cy) + shift[1]], axis=-1)


@pytest.mark.parametrize("window", [3, 5, 7])
def test_expansion_field_gives_analytic_ttc(window):
    T = ttc_from_flow(radial(0.1), window)
    r = window // 2
    interior = T.ttc[r:-r, r:-r]
    assert T.valid[r:-r, r:-r].all()
    assert np.abs(interior - 10.0).max() / 10.0 < 0.01


def test_off_centre_expansion_with_translation():
    T = ttc_from_flow(radial(0.05, cx=3.0, cy=20.0, shift=(1.5, -0.5)))
    assert np.allclose(T.ttc[T.valid], 20.0, rtol=1e-6)


def test_translation_and_contraction_are_invalid():
    assert not ttc_from_flow(np.ones((16, 16, 2)) * (1.0, -2.0)).valid.any()
    T = ttc_from_flow(radial(-0.1, 16, 16))
    assert not T.valid.any()
    assert np.isnan(T.ttc).all()


def test_threshold_is_respected():
    just_below = ttc_from_flow(radial(S_MIN * 0.5, 16, 16))
    just_above = ttc_from_flow(radial(S_MIN * 2, 16, 16))
    assert not just_below.valid.any()
    assert just_above.valid.all()


def test_window_validation():
    V = radial(0.1, 8, 8)
    for bad in (1, 4, 9):
        with pytest.raises(ValueError):
            ttc_from_flow(V, bad)


def test_ttc_error_examples():
    T = ttc_from_flow(radial(0.1))
    assert ttc_error(T, T) == 0.0
    assert ttc_error(T.scaled(2.0), T) == 1.0


def brute_ttc_error(Ta, To, mask):
    vals = []
    for y in range(To.ttc.shape[0]):
        for x in range(To.ttc.shape[1]):
            if mask[y, x] and Ta.valid[y, x] and To.valid[y, x]:
                vals.append(abs(Ta.ttc[y, x] - To.ttc[y, x]) / To.ttc[y, x])
    return sum(vals) / len(vals)


def test_ttc_error_matches_loop_on_attacked_expansion():
    r = np.random.default_rng(2)
    Vo = radial(0.08)
    Va = Vo + r.normal(0, 0.05, Vo.shape)
    To, Ta = ttc_from_flow(Vo), ttc_from_flow(Va)
    mask = r.random(Vo.shape[:2]) < 0.6
    err, churn = ttc_error(Ta, To, mask, return_churn=True)
    assert err == pytest.approx(brute_ttc_error(Ta, To, mask), rel=1e-12)
    assert churn == pytest.approx(float((Ta.valid != To.valid)[mask].mean()))


@given(st.floats(0.01, 100.0), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_ttc_error_is_scale_invariant(c, seed):
    r = np.random.default_rng(seed)
    To = TTCMap(r.uniform(1, 50, (6, 6)), r.random((6, 6)) < 0.8)
    To.valid[0, 0] = True
    Ta = TTCMap(To.ttc * r.uniform(0.5, 1.5, (6, 6)), To.valid.copy())
    assert ttc_error(Ta.scaled(c), To.scaled(c)) == pytest.approx(ttc_error(Ta, To), rel=1e-9)


def test_ttc_error_without_joint_valid_pixels():
    a = TTCMap(np.full((3, 3), np.nan), np.zeros((3, 3), dtype=bool))
    with pytest.raises(ValueError, match="valid"):
        ttc_error(a, a)
    with pytest.raises(ValueError):
        ttc_error(a, TTCMap(np.ones((2, 2)), np.ones((2, 2), dtype=bool)))


def test_colormap_conventions():
    uniform = TTCMap(np.full((4, 4), 7.0), np.ones((4, 4), dtype=bool))
    img = ttc_colormap(uniform)
    assert (img == img[0, 0]).all()

    ttc = np.array([[1.0, 2.0, 4.0, 8.0, np.nan]])
    T = TTCMap(ttc, np.isfinite(ttc))
    img = ttc_colormap(T)
    np.testing.assert_array_equal(img[0, 4], NEUTRAL_GRAY)
    heat = img[0, :4].sum(axis=-1)  # the ramp is monotone in r+g+b
    assert (np.diff(heat) > 0).all(), "shorter TTC must be hotter (darker/redder)"
    assert img[0, 0, 0] > img[0, 0, 2]


def test_colormap_with_fixed_range_and_all_invalid():
    T = TTCMap(np.array([[5.0, 50.0]]), np.array([[True, True]]))
    a = ttc_colormap(T, vmin=1.0, vmax=100.0)
    b = ttc_colormap(T)
    assert not np.allclose(a, b)
    none = TTCMap(np.full((2, 2), np.nan), np.zeros((2, 2), dtype=bool))
    assert (ttc_colormap(none) == 0.5).all()
