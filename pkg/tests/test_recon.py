import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spikefield.core import SpikeStream
from spikefield.recon import (
    ReconConfig, apply_mask, build_mask, reconstruct, tfi_reconstruct, tfp_reconstruct,
)
from spikefield.sim import StartupMode, encode_sequence


def stream_of(bits, phi=1.0):
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.ndim == 1:
        bits = bits.reshape(-1, 1, 1, 1)
    return SpikeStream(bits, 25, phi)


streams = st.tuples(st.integers(1, 30), st.integers(1, 5), st.integers(1, 5)).flatmap(
    lambda s: arrays(np.uint8, s + (1,), elements=st.integers(0, 1))
).map(lambda b: SpikeStream(b, 25, 1.0))


def test_config_validation():
    with pytest.raises(ValueError):
        ReconConfig(window_w=4)
    with pytest.raises(ValueError):
        ReconConfig(method="net")
    with pytest.raises(ValueError):
        ReconConfig(max_isi=0)


def test_tfp_examples():
    s = stream_of([1, 0, 1, 0, 1, 0, 1, 0, 0])
    # window of 9 centered at 4 covers all frames: 4 spikes
    assert tfp_reconstruct(s, 4, 9)[0, 0, 0] == pytest.approx(4 / 9)
    # centered at 0 with w=15: clamped to frames 0..7, 4 spikes in 8
    assert tfp_reconstruct(s, 0, 15)[0, 0, 0] == 0.5
    assert tfp_reconstruct(stream_of(np.ones(11), 2.5), 5, 7)[0, 0, 0] == 2.5


def test_tfi_examples():
    s = stream_of([1, 0, 1, 0, 1, 0, 1, 0])
    assert tfi_reconstruct(s, 3)[0, 0, 0] == 0.5
    assert tfi_reconstruct(stream_of(np.zeros(10)), 5)[0, 0, 0] == 0.0
    # spikes 5 apart but max_isi 3 on the far side
    s = stream_of([0, 1, 0, 0, 0, 0, 1, 0])
    assert tfi_reconstruct(s, 2, max_isi=3)[0, 0, 0] == 0.0
    assert tfi_reconstruct(s, 2, max_isi=5)[0, 0, 0] == pytest.approx(0.2)


def test_out_of_range_center():
    s = stream_of(np.zeros(5))
    for fn in (tfp_reconstruct, tfi_reconstruct, build_mask):
        with pytest.raises(IndexError):
            fn(s, 5)


def test_reconstruct_dispatch(rng):
    s = SpikeStream(rng.integers(0, 2, (20, 3, 3, 1), dtype=np.uint8), 25, 1.0)
    np.testing.assert_array_equal(reconstruct(s, 10, ReconConfig("tfp", 5)), tfp_reconstruct(s, 10, 5))
    np.testing.assert_array_equal(reconstruct(s, 10, ReconConfig("tfi", max_isi=4)), tfi_reconstruct(s, 10, 4))


@given(st.floats(0.01, 0.999), st.floats(0.1, 10.0), st.integers(1, 40), st.integers(0, 2**31))
def test_tfp_error_bound_constant_scene(i_rel, phi, half, seed):
    i_const = i_rel * phi
    s = encode_sequence(np.full((60, 2, 2, 1), i_const), phi, StartupMode.random(seed))
    w = 2 * half + 1
    for c in (0, 30, 59):
        lo, hi = max(0, c - half), min(60, c + half + 1)
        err = np.abs(tfp_reconstruct(s, c, w) - i_const)
        assert (err <= phi / (hi - lo) + 1e-12).all()


@given(st.floats(0.02, 1.0), st.integers(0, 2**31))
def test_tfi_interval_law(i_const, seed):
    s = encode_sequence(np.full((200, 2, 2, 1), i_const), 1.0, StartupMode.random(seed))
    allowed = {1.0 / math.floor(1.0 / i_const), 1.0 / math.ceil(1.0 / i_const)}
    for c in range(60, 140, 7):
        for v in tfi_reconstruct(s, c, max_isi=64).reshape(-1):
            assert v in allowed


def test_tfi_third_intensity():
    s = encode_sequence(np.full((100, 3, 3, 1), 0.3), 1.0, StartupMode.random(1))
    vals = {float(v) for c in range(20, 80) for v in tfi_reconstruct(s, c).reshape(-1)}
    assert vals <= {1 / 3, 1 / 4}


# -- masks ----------------------------------------------------------------------


def test_mask_examples():
    assert build_mask(stream_of([0, 1, 0]), 1, 1)[0, 0, 0] == 1
    assert build_mask(stream_of([0, 1, 0]), 0, 0)[0, 0, 0] == 0
    assert not build_mask(stream_of(np.zeros((9, 4, 4, 1))), 4, 3).any()


@given(streams, st.data())
def test_mask_zero_is_frame(s, data):
    i = data.draw(st.integers(0, s.n_frames - 1))
    np.testing.assert_array_equal(build_mask(s, i, 0), s.frame(i))


@given(streams, st.data())
def test_mask_is_or_and_monotone(s, data):
    i = data.draw(st.integers(0, s.n_frames - 1))
    n = data.draw(st.integers(0, 8))
    m = build_mask(s, i, n)
    ref = np.zeros(s.bits.shape[1:], dtype=np.uint8)
    for j in range(i - n, i + n + 1):
        if 0 <= j < s.n_frames:
            ref |= s.bits[j]
    np.testing.assert_array_equal(m, ref)
    assert (build_mask(s, i, n + 1) >= m).all()
    assert set(np.unique(m)) <= {0, 1}


def test_mask_coverage_grows_on_scene(rng):
    # a dim disk on a black background: coverage of object pixels grows with n
    yy, xx = np.mgrid[0:16, 0:16]
    disk = ((yy - 8) ** 2 + (xx - 8) ** 2 < 30).astype(float)[..., None] * 0.15
    s = encode_sequence(np.repeat(disk[None], 40, axis=0), 1.0, StartupMode.random(3))
    obj = disk[..., 0] > 0
    cover = [build_mask(s, 20, n)[..., 0][obj].mean() for n in range(8)]
    assert all(b >= a for a, b in zip(cover, cover[1:]))
    assert not build_mask(s, 20, 7)[..., 0][~obj].any()


def test_apply_mask():
    f = np.full((4, 4, 1), 0.7)
    np.testing.assert_array_equal(apply_mask(f, np.ones((4, 4, 1), np.uint8)), f)
    assert not apply_mask(f, np.zeros((4, 4, 1), np.uint8)).any()
    checker = ((np.indices((4, 4)).sum(axis=0) % 2)[..., None]).astype(np.uint8)
    np.testing.assert_array_equal(apply_mask(f, checker), 0.7 * checker)
    with pytest.raises(ValueError):
        apply_mask(f, np.ones((3, 4, 1), np.uint8))
