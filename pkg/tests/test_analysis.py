import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import cat
from ego.analysis import (CurveTable, SimilarityPair, background_score, count_crossings, edit_quality,
                          find_crossover, similarity, similarity_curve)
from ego.composition import compose
from ego.image_energy import MatchMap


def test_similarity_examples(rng):
    a = rng.standard_normal((5, 4, 4))
    assert similarity(a, a) == pytest.approx(1.0)
    assert similarity(a, -a) == pytest.approx(-1.0)
    b = np.zeros_like(a)
    b[0] = 1.0
    c = np.zeros_like(a)
    c[1] = 1.0
    assert abs(similarity(b, c)) < 1e-6


def test_similarity_region_and_zero_norm(rng):
    a = rng.standard_normal((3, 4, 4))
    b = a.copy()
    b[:, 2:, :] *= -1
    region = np.zeros((8, 8), bool)
    region[:4] = True  # top half at lattice resolution
    assert similarity(a, b, region) == pytest.approx(1.0)
    z = a.copy()
    z[:, 0, 0] = 0
    # the zero point is skipped, not counted as 0
    assert similarity(z, a) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        similarity(np.zeros((3, 2, 2)), a[:, :2, :2])
    with pytest.raises(ValueError):
        similarity(a, a[:2])


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (3, 3, 3), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (3, 3, 3), elements=st.floats(-1e3, 1e3)))
def test_similarity_bounded(a, b):
    try:
        s = similarity(a, b)
    except ValueError:
        return
    assert -1.0 <= s <= 1.0


def _pairs(rng, n=3):
    return [SimilarityPair(rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32),
                           rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32), cat(i % 4)) for i in range(n)]


def test_curve_t0_and_single_pair(tiny32, sched, rng):
    tab = similarity_curve(tiny32, sched, _pairs(rng), [0, 500])
    assert tab.mean_src[0] == 1.0 and tab.std_src[0] == 0.0
    one = similarity_curve(tiny32, sched, _pairs(rng, 1), [300])
    assert one.std_src[0] == 0.0 and one.std_tgt[0] == 0.0
    with pytest.raises(ValueError):
        similarity_curve(tiny32, sched, [], [0])
    with pytest.raises(ValueError):
        similarity_curve(tiny32, sched, _pairs(rng, 1), [])


def test_curve_deterministic_and_csv(tiny32, sched, rng):
    pairs = _pairs(rng, 2)
    a = similarity_curve(tiny32, sched, pairs, [100, 0, 900], seed=3)
    b = similarity_curve(tiny32, sched, pairs, [100, 0, 900], seed=3)
    assert a.to_csv() == b.to_csv()
    assert a.to_csv().splitlines()[0] == "t,mean_src,std_src,mean_tgt,std_tgt"
    np.testing.assert_array_equal(a.t, [0, 100, 900])
    back = CurveTable.from_csv(a.to_csv())
    assert back.to_csv() == a.to_csv()


def _table(src, tgt, grid=None):
    grid = np.arange(len(src)) * 100 if grid is None else np.asarray(grid)
    z = np.zeros(len(src))
    return CurveTable(grid, np.asarray(src, float), z, np.asarray(tgt, float), z)


def test_find_crossover_examples():
    with pytest.raises(ValueError, match="do not cross"):
        find_crossover(_table([1, 0.9, 0.8], [0.1, 0.2, 0.3]))
    grid = [100, 200, 300, 400, 500, 600, 700]
    src = [0.9, 0.8, 0.7, 0.6, 0.5, 0.3, 0.2]
    tgt = [0.1, 0.2, 0.3, 0.4, 0.45, 0.5, 0.6]
    assert find_crossover(_table(src, tgt, grid)) == 500
    assert count_crossings(_table(src, tgt, grid)) == 1
    with pytest.raises(ValueError):
        find_crossover(_table([1], [0]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=2, max_size=12))
def test_find_crossover_on_grid(vals):
    tab = _table([v[0] for v in vals], [v[1] for v in vals])
    try:
        t = find_crossover(tab)
    except ValueError:
        return
    assert t in tab.t.tolist()


def test_edit_quality_examples(tiny32, sched, rng):
    src = rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32)
    ref = rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32)
    m = np.zeros((16, 16), bool)
    m[4:12, 4:12] = True
    before = edit_quality(tiny32, sched, src, ref, src, m, m, cat(1))
    assert before.background == 1.0
    idx = np.flatnonzero(m[::2, ::2])
    pasted = compose(src, ref, MatchMap(idx, idx.copy(), (8, 8)))
    after = edit_quality(tiny32, sched, src, ref, pasted, m, m, cat(1))
    assert after.identity >= before.identity
    again = edit_quality(tiny32, sched, src, ref, pasted, m, m, cat(1))
    assert abs(again.identity - after.identity) < 1e-6 and again.background == after.background
    assert after.format().startswith("identity ")
    with pytest.raises(ValueError):
        edit_quality(tiny32, sched, src, ref, src, np.zeros_like(m), m, cat(1))


def test_background_score_range(rng):
    src = rng.uniform(-1, 1, (3, 8, 8))
    m = np.zeros((8, 8), bool)
    assert background_score(src, src, m) == 1.0
    assert background_score(src, src + 0.5, m) < 1.0
    assert background_score(src, src + 5, np.ones((8, 8), bool)) == 1.0
