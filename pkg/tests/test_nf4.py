import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mansu import nf4
from mansu.nf4 import CODEBOOK, build_codebook, quantize, quantize_tensor

TABLE = [-1.0, -0.6962, -0.5251, -0.3949, -0.2844, -0.1848, -0.0911, 0.0,
         0.0796, 0.1609, 0.2461, 0.3379, 0.4407, 0.5626, 0.7230, 1.0]


def oracle_quantize(u):
    """Exhaustive nearest-level search; ties go to the larger magnitude."""
    d = [abs(u - q) for q in TABLE]
    best = min(d)
    ties = [q for q, x in zip(TABLE, d) if x == best]
    return max(ties, key=abs)


def test_levels_and_spacings_match_table():
    cb = build_codebook()
    assert np.allclose(cb.levels, TABLE, atol=1e-4)
    assert np.allclose(cb.spacings, np.diff(TABLE), atol=1e-4)
    assert cb.levels[0] == -1.0 and cb.levels[7] == 0.0 and cb.levels[15] == 1.0


def test_spacing_extremes():
    cb = build_codebook()
    assert cb.min_spacing == pytest.approx(0.0796, abs=1e-4)
    assert int(np.argmin(cb.spacings)) == 7
    assert cb.max_spacing == pytest.approx(0.3038, abs=1e-4)
    assert int(np.argmax(cb.spacings)) == 0


@pytest.mark.parametrize("value,expected", [(0.0, 0.0), (1.0, 1.0), (0.12, 0.0796), (-1.0, -1.0), (5.0, 1.0)])
def test_quantize_examples(value, expected):
    assert quantize(value, 1.0) == pytest.approx(expected)


def test_quantize_012_agrees_with_exhaustive_search():
    assert oracle_quantize(0.12) == 0.0796


@pytest.mark.parametrize("scale", [0.0, -1.0, np.nan])
def test_quantize_rejects_bad_scale(scale):
    with pytest.raises(ValueError):
        quantize(0.5, scale)


def test_midpoint_ties_go_to_larger_magnitude():
    mids = CODEBOOK.midpoints
    for m, lo, hi in zip(mids, CODEBOOK.levels[:-1], CODEBOOK.levels[1:]):
        expect = hi if m >= 0 else lo
        assert quantize(m, 1.0) == expect


@given(st.floats(-1.2, 1.2, allow_nan=False), st.floats(1e-3, 10.0))
def test_quantize_matches_oracle(u, s):
    assert quantize(u * s, s) == pytest.approx(oracle_quantize(u) * s, rel=1e-12, abs=1e-15)


@given(st.floats(-1.0, 1.0))
def test_round_trip_within_half_local_width(u):
    s = 0.37
    err = abs(quantize(u * s, s) - u * s)
    assert err <= nf4.bin_width(u * s, s) / 2 + 1e-9


def test_quantize_tensor_examples():
    q, s = quantize_tensor(np.eye(2), "absmax-per-tensor")
    assert np.array_equal(q, np.eye(2))
    q, s = quantize_tensor(np.array([[0.5, -0.5]]))
    assert s.tolist() == [0.5]
    assert q.tolist() == [[0.5, -0.5]]


def test_quantize_tensor_per_element_oracle(rng):
    w = rng.normal(size=(6, 9))
    q, s = quantize_tensor(w)
    assert np.allclose(s, np.abs(w).max(axis=1))
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            assert q[i, j] == pytest.approx(oracle_quantize(w[i, j] / s[i]) * s[i], rel=1e-12)


def test_zero_channel_clamped_and_reported():
    diag = []
    q, s = quantize_tensor(np.array([[0.0, 0.0], [1.0, -2.0]]), diagnostics=diag)
    assert diag == [0]
    assert s[0] == nf4.SCALE_CLAMP
    assert np.array_equal(q[0], [0.0, 0.0])


def test_empty_tensor_rejected():
    with pytest.raises(ValueError):
        quantize_tensor(np.zeros((0, 3)))


def test_quantize_is_identity_on_codebook_points():
    s = np.array([[0.3], [2.0]])
    w = np.array(TABLE)[None, :] * s
    q, _ = quantize_tensor(w)
    assert np.array_equal(q, w)


def test_bin_width_minimum_is_scaled_min_spacing():
    s = 0.25
    widths = nf4.bin_width(np.linspace(-s, s, 20001), s)
    assert widths.min() == pytest.approx(s * 0.0796)


def test_survives_examples():
    for s in (0.01, 1.0, 7.5):
        assert nf4.survives_quantization(0.01 * s, 0.0796 * s, s)
        assert not nf4.survives_quantization(0.3 * s, 0.0, s)
    # nearest-level oracle: 0.85 -> 0.7230 but 0.87 -> 1.0 (cell edge at 0.8615)
    assert oracle_quantize(0.85) != oracle_quantize(0.87)
    assert nf4.survives_quantization(0.85, 0.02, 1.0)
    # a pair that stays inside the 0.7230 cell
    assert not nf4.survives_quantization(0.80, 0.02, 1.0)


def test_crossing_count_examples():
    assert nf4.crossing_count(0.0, 0.0, 2.0) == 0
    assert nf4.crossing_count(0.01, 0.20, 1.0) >= 2
    assert nf4.crossing_count(0.01, 0.20, 1.0) == 2
    assert nf4.crossing_count(-0.9, 0.05, 1.0) == 0
    assert nf4.crossing_count(0.2, -0.3, 1.0) == 4  # 0.1609, 0.0796, 0, -0.0911


def test_rounding_cell_contains_value():
    lo, hi = nf4.rounding_cell(0.0, 1.0)
    assert (lo, hi) == pytest.approx((-0.04555, 0.0398))
    lo, hi = nf4.rounding_cell(0.95, 1.0)
    assert hi == np.inf


@settings(max_examples=300)
@given(st.floats(-0.99, 0.99), st.floats(0.0, 1.0))
def test_update_at_least_cell_width_always_survives(u, frac):
    # the sound form of the narrow-bin guarantee: leaving the rounding cell changes Q
    lo, hi = nf4.rounding_cell(u, 1.0)
    step = (hi - u) + 1e-9 + frac * 0.1
    if np.isfinite(hi):
        assert nf4.survives_quantization(u, step, 1.0)


@settings(max_examples=300)
@given(st.floats(-0.99, 0.99), st.floats(0.0, 0.999))
def test_update_inside_cell_is_erased(u, frac):
    lo, hi = nf4.rounding_cell(u, 1.0)
    if np.isfinite(hi):
        assert not nf4.survives_quantization(u, frac * (hi - u), 1.0)


def test_quantize_pure_under_threads():
    from concurrent.futures import ThreadPoolExecutor
    x = np.linspace(-1, 1, 1001)
    ref = quantize(x, 1.0)
    with ThreadPoolExecutor(4) as pool:
        outs = list(pool.map(lambda _: quantize(x, 1.0), range(8)))
    assert all(np.array_equal(o, ref) for o in outs)
