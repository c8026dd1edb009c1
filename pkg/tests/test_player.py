import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qoetune.core import QualityLevel, VideoManifest
from qoetune.player import PlayerEnv, affine_buffer_cap, make_buffer_cap, stall_time, step, step_arrays


def _manifest_for(download_s, seg=1.0):
    # one level whose size at 1000 kbps downloads in ``download_s`` seconds
    return VideoManifest((QualityLevel(1000, 1, download_s),), seg)


@pytest.mark.parametrize("buf,dl,stall,wait,nxt", [
    (4.0, 2.0, 0.0, 0.0, 3.0),
    (1.0, 3.0, 2.0, 0.0, 1.0),
    (10.0, 0.5, 0.0, 0.5, 10.0),
])
def test_hand_examples(buf, dl, stall, wait, nxt):
    env, out = step(PlayerEnv(buffer=buf), _manifest_for(dl), 0, 1000.0)
    assert out.download_time == dl
    assert out.stall_time == stall
    assert out.wait_time == wait
    assert env.buffer == nxt
    assert env.clock == dl + wait


def test_instant_download_from_empty():
    env, out = step(PlayerEnv(buffer=0.0), _manifest_for(1e-12), 0, 1000.0)
    assert env.buffer == pytest.approx(1.0)
    assert out.stall_time == pytest.approx(0.0, abs=1e-9)


def test_stall_time_examples():
    assert stall_time(5, 2) == 0
    assert stall_time(0, 2) == 2
    assert stall_time(1.5, 3.7) == pytest.approx(2.2)


def test_invalid_level(ladder3):
    with pytest.raises(ValueError):
        step(PlayerEnv(), ladder3, 3, 1000.0)


def test_rtt_charged_in_wait(ladder3):
    env, out = step(PlayerEnv(buffer=2.0, rtt=0.1), ladder3, 0, 1000.0)
    assert out.wait_time == pytest.approx(0.1)
    assert env.buffer == pytest.approx(1.9)


def test_fuzz_invariants():
    rng = np.random.default_rng(0)
    n = 10_000
    bmax = rng.uniform(1, 30, n)
    buf = rng.uniform(0, 1, n) * bmax
    seg = rng.uniform(0.1, 1, n) * bmax
    size = rng.uniform(0.1, 20, n)
    c = rng.uniform(50, 20000, n)
    dl, stall, wait, nb = step_arrays(buf, size, c, seg, bmax, 0.0)
    assert np.all((nb >= 0) & (nb <= bmax + 1e-12))
    assert not np.any((stall > 0) & (wait > 0))
    # monotone in bandwidth
    _, stall2, _, _ = step_arrays(buf, size, c * rng.uniform(1, 3, n), seg, bmax, 0.0)
    assert np.all(stall2 <= stall + 1e-12)


def test_batch_matches_scalar(ladder3):
    rng = np.random.default_rng(1)
    for _ in range(200):
        b = rng.uniform(0, 10)
        lvl = int(rng.integers(3))
        c = rng.uniform(100, 8000)
        env, out = step(PlayerEnv(buffer=b, rtt=0.05), ladder3, lvl, c)
        dl, stall, wait, nb = step_arrays(np.array([b]), ladder3.sizes[lvl], c, 1.0, 10.0, 0.05)
        batch = [float(np.atleast_1d(v)[0]) for v in (dl, stall, wait, nb)]
        assert [out.download_time, out.stall_time, out.wait_time, env.buffer] == batch


@given(st.lists(st.tuples(st.integers(0, 2), st.floats(50, 10000)), min_size=1, max_size=40))
@settings(max_examples=100, deadline=None)
def test_buffer_bounded_and_clock_monotone(seq):
    ladder3 = VideoManifest.from_bitrates([1000, 2000, 4000], 1.0)
    env = PlayerEnv()
    for lvl, c in seq:
        nxt, _ = step(env, ladder3, lvl, c)
        assert 0 <= nxt.buffer <= nxt.buffer_max
        assert nxt.clock >= env.clock
        env = nxt


def test_buffer_caps():
    from qoetune.core import BandwidthModel
    assert make_buffer_cap(None)() == 10.0
    assert make_buffer_cap(7.0)() == 7.0
    cap = affine_buffer_cap(base=6.0, per_mbps=-1.0, low=4.0, high=12.0)
    assert 4.0 <= cap(BandwidthModel(3000.0, 10.0)) <= 12.0
