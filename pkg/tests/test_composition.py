import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ego.composition import CCConfig, cc_due, compose, footprint
from ego.editor import make_schedule
from ego.image_energy import MatchMap, match_points


def test_empty_map_is_noop(rng):
    x = rng.standard_normal((3, 8, 8))
    np.testing.assert_array_equal(compose(x, rng.standard_normal(x.shape), MatchMap.empty((4, 4))), x)


def test_identity_map_full_overwrite(rng):
    x = rng.standard_normal((3, 16, 16))
    ref = rng.standard_normal(x.shape)
    m = np.zeros((16, 16), bool)
    m[4:12, 2:10] = True
    idx = np.flatnonzero(m[::2, ::2])
    out = compose(x, ref, MatchMap(idx, idx.copy(), (8, 8)))
    np.testing.assert_array_equal(out[:, m], ref[:, m])
    np.testing.assert_array_equal(out[:, ~m], x[:, ~m])


def test_block_copy_and_last_wins():
    x = np.zeros((1, 4, 4))
    ref = np.arange(16, dtype=float).reshape(1, 4, 4)
    # lattice 2x2, s=2: ref points 0 and 3 both map onto opt point 1
    mm = MatchMap(np.array([0, 3]), np.array([1, 1]), (2, 2))
    out = compose(x, ref, mm)
    np.testing.assert_array_equal(out[0, :2, 2:], ref[0, 2:, 2:])
    assert np.all(out[0, :, :2] == 0) and np.all(out[0, 2:, :] == 0)


def test_compose_errors(rng):
    x = rng.standard_normal((3, 8, 8))
    with pytest.raises(IndexError):
        compose(x, x, MatchMap(np.array([0]), np.array([16]), (4, 4)))
    with pytest.raises(ValueError):
        compose(x, x[:, :4], MatchMap.empty((4, 4)))
    with pytest.raises(ValueError):
        compose(x, x, MatchMap(np.array([0]), np.array([0]), (3, 3)))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4]))
def test_compose_footprint_and_idempotence(seed, s):
    rng = np.random.default_rng(seed)
    H = 16
    h = H // s
    x = rng.standard_normal((3, H, H)).astype(np.float32)
    ref = rng.standard_normal(x.shape).astype(np.float32)
    m_ori = rng.random((H, H)) < 0.3
    m_ref = rng.random((H, H)) < 0.3
    m_ori.flat[rng.integers(H * H)] = True
    m_ref.flat[rng.integers(H * H)] = True
    F1 = rng.standard_normal((4, h, h))
    F2 = rng.standard_normal((4, h, h))
    mm = match_points(F1, F2, m_ref, m_ori)
    once = compose(x, ref, mm)
    np.testing.assert_array_equal(compose(once, ref, mm), once)
    fp = footprint(m_ori, (h, h))
    np.testing.assert_array_equal(once[:, ~fp], x[:, ~fp])


def test_cc_due_examples():
    cfg = CCConfig(600, 500, 3)
    assert not cc_due(0, 601, cfg)
    assert cc_due(3, 550, cfg)
    assert not cc_due(4, 550, cfg)
    assert not cc_due(3, 499, cfg)
    assert not cc_due(3, 550, CCConfig(600, 500, 3, enabled=False))


def test_cc_due_on_default_schedule():
    cfg = CCConfig()
    ts = make_schedule(50, 980, 20).timesteps
    want = []
    for i, t in enumerate(ts):
        if 500 <= t <= 600 and i % 3 == 0:
            want.append(i)
    got = [i for i, t in enumerate(ts) if cc_due(i, int(t), cfg)]
    assert got == want
    # the default window covers t in {588, 569, 549, 529, 510} at iterations 20..24
    assert got == [21, 24]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 999), st.integers(1, 400), st.integers(0, 500), st.integers(1, 9))
def test_cc_due_never_outside_window(i, t, width, stop, k):
    cfg = CCConfig(stop + width, stop, k)
    if cc_due(i, t, cfg):
        assert cfg.t_stop <= t <= cfg.t_start


@pytest.mark.parametrize("args", [(500, 500, 3), (400, 500, 3), (600, 500, 0), (100, -1, 1)])
def test_cc_config_rejects(args):
    with pytest.raises(ValueError):
        CCConfig(*args)
