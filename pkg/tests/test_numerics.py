import math

import ml_dtypes
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lowbit import numerics as nx

E2M1_VALUES = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]


def test_e2m1_magnitudes():
    assert nx.E2M1.magnitudes.tolist() == E2M1_VALUES
    assert nx.E2M1.max_value == 6.0


def test_e4m3_extremes():
    mags = nx.E4M3.magnitudes
    assert mags[-1] == 448.0
    assert mags[1] == 2.0**-9
    assert mags[8] == 2.0**-6
    assert len(mags) == 127


def test_binary16_matches_numpy_grid():
    mags = nx.BINARY16.magnitudes
    ref = np.arange(0x7C00, dtype=np.uint16).view(np.float16).astype(np.float64)
    np.testing.assert_array_equal(mags, ref)


@pytest.mark.parametrize("fmt,ml", [(nx.E2M1, ml_dtypes.float4_e2m1fn), (nx.E4M3, ml_dtypes.float8_e4m3fn)])
def test_decode_matches_ml_dtypes_for_every_code(fmt, ml):
    codes = np.arange(1 << fmt.bits, dtype=np.uint8)
    ours = nx.decode(codes, fmt)
    ref = codes.view(ml).astype(np.float64)
    np.testing.assert_array_equal(np.isnan(ours), np.isnan(ref))
    ok = ~np.isnan(ref)
    np.testing.assert_array_equal(ours[ok], ref[ok])
    np.testing.assert_array_equal(np.signbit(ours[ok]), np.signbit(ref[ok]))


def test_e4m3_nan_patterns():
    vals = nx.decode(np.arange(256), nx.E4M3)
    assert np.flatnonzero(np.isnan(vals)).tolist() == [0x7F, 0xFF]


@pytest.mark.parametrize("fmt", [nx.E2M1, nx.E4M3])
def test_every_finite_code_round_trips(fmt):
    codes = np.arange(1 << fmt.bits)
    vals = nx.decode(codes, fmt)
    finite = np.isfinite(vals)
    back = nx.encode(vals[finite], fmt)
    np.testing.assert_array_equal(back, codes[finite])


def test_negative_zero_keeps_sign_code():
    assert nx.encode_e2m1(-0.0) == 0x8
    assert nx.encode_e4m3(-0.0) == 0x80
    assert math.copysign(1.0, nx.decode_e2m1(0x8)) == -1.0


@pytest.mark.parametrize(
    "x,expected",
    [(0.25, 0.0), (0.75, 1.0), (1.25, 1.0), (1.75, 2.0), (2.5, 2.0), (3.5, 4.0), (5.0, 4.0), (-2.5, -2.0)],
)
def test_e2m1_ties_to_even(x, expected):
    assert nx.decode_e2m1(nx.encode_e2m1(x)) == expected


@pytest.mark.parametrize("fmt,x,expected", [(nx.E2M1, 7.0, 6.0), (nx.E2M1, -1e9, -6.0), (nx.E4M3, 1000.0, 448.0),
                                            (nx.BINARY16, 1e6, 65504.0)])
def test_overflow_saturates(fmt, x, expected):
    assert nx.round_to(np.array([x]), fmt)[0] == expected


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected(bad):
    with pytest.raises(ValueError, match="non-finite"):
        nx.encode(np.array([1.0, bad]), nx.E4M3)


def test_e4m3_encode_matches_ml_dtypes(rng):
    x = rng.standard_normal(200_000) * np.exp(rng.uniform(-12, 6, 200_000))
    x = x[np.abs(x) <= 448]
    ref = x.astype(ml_dtypes.float8_e4m3fn).astype(np.float64)
    np.testing.assert_array_equal(nx.round_to(x, nx.E4M3), ref)


def test_e2m1_encode_matches_ml_dtypes(rng):
    x = rng.uniform(-6, 6, 100_000)
    x = np.concatenate([x, np.arange(-24, 25) / 4])
    ref = x.astype(ml_dtypes.float4_e2m1fn).astype(np.float64)
    np.testing.assert_array_equal(nx.round_to(x, nx.E2M1), ref)


def test_binary16_rtne_matches_numpy(rng):
    x = rng.standard_normal(200_000) * np.exp(rng.uniform(-20, 10, 200_000))
    x = x[np.abs(x) <= 65504]
    np.testing.assert_array_equal(nx.round_to(x, nx.BINARY16), x.astype(np.float16).astype(np.float64))


@pytest.mark.parametrize("fmt", [nx.E2M1, nx.E4M3, nx.BINARY16])
def test_monotone_on_dense_grid(fmt):
    m = fmt.max_value * 1.1
    r = nx.round_to(np.linspace(-m, m, 100_001), fmt)
    assert np.all(np.diff(r) >= 0)


def test_scalar_helpers_return_scalars():
    assert isinstance(nx.encode_e2m1(1.0), int)
    assert nx.decode_e4m3(nx.encode_e4m3(448.0)) == 448.0
    assert nx.round_binary16(1.0 + 2.0**-11) == 1.0


@given(st.floats(min_value=-448, max_value=448, allow_nan=False))
def test_rtne_is_a_nearest_grid_point(x):
    r = float(nx.round_to(np.array([x]), nx.E4M3)[0])
    grid = np.concatenate([-nx.E4M3.magnitudes, nx.E4M3.magnitudes])
    assert abs(x - r) <= np.min(np.abs(grid - x))
    assert r == 0.0 or math.copysign(1.0, r) == math.copysign(1.0, x)


@given(st.floats(min_value=-6, max_value=6, allow_nan=False), st.integers(0, 2**32 - 1), st.integers(0, 1000))
def test_sr_lands_on_a_bracketing_value(x, k, offset):
    mode = nx.RoundingMode.stochastic((k, 7), stream=3)
    r = float(nx.round_to(np.array([x]), nx.E2M1, mode, offset)[0])
    mags = nx.E2M1.magnitudes
    a = abs(x)
    lo = mags[mags <= a].max()
    hi = mags[mags >= a].min()
    assert abs(r) in (lo, hi)


def test_sr_keeps_representable_values_exact():
    x = np.array(E2M1_VALUES + [-v for v in E2M1_VALUES])
    mode = nx.RoundingMode.stochastic((1, 2))
    np.testing.assert_array_equal(nx.round_to(x, nx.E2M1, mode), x)


@pytest.mark.parametrize("fmt,x", [(nx.E2M1, 2.3), (nx.E4M3, 0.0123), (nx.BINARY16, 1.0 + 2.0**-13)])
def test_sr_mean_is_unbiased(fmt, x):
    n = 200_000
    r = nx.round_to(np.full(n, x), fmt, nx.RoundingMode.stochastic((3, 4)))
    mags = fmt.magnitudes
    gap = mags[mags >= x].min() - mags[mags <= x].max()
    assert abs(r.mean() - x) <= 3 * gap / (2 * math.sqrt(n))


def test_sr_draws_depend_on_index_not_order():
    mode = nx.RoundingMode.stochastic((9, 9), stream=5)
    x = np.linspace(0.1, 5.9, 64)
    whole = nx.encode(x, nx.E2M1, mode)
    parts = np.concatenate([nx.encode(x[:20], nx.E2M1, mode, 0), nx.encode(x[20:], nx.E2M1, mode, 20)])
    np.testing.assert_array_equal(whole, parts)


def test_explicit_uniforms_force_stochastic_rounding():
    x = np.array([0.25, 0.25])
    r = nx.round_to(x, nx.E2M1, uniforms=np.array([0.49, 0.51]))
    assert r.tolist() == [0.5, 0.0]


# Philox known-answer vectors (Random123 kat_vectors, philox4x32 with 10 rounds)
@pytest.mark.parametrize(
    "counter,key,expected",
    [
        ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
        ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
        (
            (0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344),
            (0xA4093822, 0x299F31D0),
            (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1),
        ),
    ],
)
def test_philox_known_answers(counter, key, expected):
    assert tuple(int(v) for v in nx.philox4x32(counter, key, 10)) == expected


def test_philox_vectorizes_like_scalar_calls(rng):
    ctr = rng.integers(0, 2**32, (50, 4), dtype=np.uint64)
    key = rng.integers(0, 2**32, (50, 2), dtype=np.uint64)
    batch = nx.philox4x32(ctr, key, 7)
    for i in range(50):
        np.testing.assert_array_equal(batch[i], nx.philox4x32(ctr[i], key[i], 7))


def test_philox_rounds_change_output():
    outs = {tuple(nx.philox4x32((1, 2, 3, 4), (5, 6), r).tolist()) for r in (3, 4, 5, 10)}
    assert len(outs) == 4


def test_philox_next_carries_across_words():
    st0 = nx.PhiloxState(key=(1, 2), counter=(0xFFFFFFFF, 0xFFFFFFFF, 0, 0))
    block, st1 = nx.philox_next(st0)
    assert st1.counter == (0, 0, 1, 0)
    assert block == tuple(int(v) for v in nx.philox4x32(st0.counter, st0.key))
    wrap = nx.PhiloxState(counter=(0xFFFFFFFF,) * 4)
    assert nx.philox_next(wrap)[1].counter == (0, 0, 0, 0)


@pytest.mark.parametrize("bad", [dict(rounds=0), dict(key=(1,)), dict(counter=(2**32, 0, 0, 0))])
def test_philox_state_validation(bad):
    with pytest.raises(ValueError):
        nx.PhiloxState(**bad)


def test_uniforms_in_unit_interval_and_deterministic():
    u = nx.philox_uniform((1, 2), 3, np.arange(10_000, dtype=np.uint64))
    assert u.min() >= 0 and u.max() < 1
    np.testing.assert_array_equal(u, nx.philox_uniform((1, 2), 3, np.arange(10_000, dtype=np.uint64)))
    assert abs(u.mean() - 0.5) < 0.01


def test_derive_key_paths_are_distinct_and_stable():
    keys = {nx.derive_key(42, a, b) for a in range(5) for b in range(5)}
    assert len(keys) == 25
    assert nx.derive_key(42, 1) == nx.derive_key(42, 1, 0)
    assert nx.derive_key(42, 1) != nx.derive_key(43, 1)
    with pytest.raises(ValueError):
        nx.derive_key(1, 1, 2, 3)


def test_codec_tables():
    t = nx.codec_table("e2m1")
    assert len(t) == 16
    assert t[7] == (7, "0111", 6.0)
    assert t[15][2] == -6.0
    assert len(nx.codec_table(nx.E4M3)) == 256
    with pytest.raises(ValueError):
        nx.codec_table(nx.BINARY16)


def test_unknown_format_and_mode():
    with pytest.raises(ValueError):
        nx.get_format("e3m2")
    with pytest.raises(ValueError):
        nx.RoundingMode("stochastic")
