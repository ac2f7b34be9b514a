import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from batchrl.data import CSV_HEADER, TransitionBatch, ZScore, read_episodes_csv, zscore_apply, zscore_fit


def test_zscore_examples():
    stats = zscore_fit(np.array([[0.0], [10.0]]))
    assert stats.mean[0] == 5.0 and stats.std[0] == 5.0
    assert np.array_equal(zscore_apply(stats, np.array([[0.0], [10.0]])).ravel(), [-1.0, 1.0])
    const = zscore_fit(np.full((7, 1), 3.3))
    assert np.all(zscore_apply(const, np.full((7, 1), 3.3)) == 0.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (30, 4), elements=st.floats(-1e3, 1e3)))
def test_zscore_roundtrip_and_moments(x):
    stats = ZScore.fit(x)
    z = stats.apply(x)
    assert np.allclose(stats.invert(z), x, atol=1e-9 * (1 + np.abs(x).max()))
    spread = x.std(axis=0) > 1e-6
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(z[:, spread].std(axis=0), 1.0, atol=1e-9)


def test_zscore_rejects_empty_and_serializes():
    with pytest.raises(ValueError):
        ZScore.fit(np.empty((0, 3)))
    stats = ZScore.fit(np.random.default_rng(0).normal(size=(20, 3)))
    back = ZScore.from_dict(stats.to_dict())
    assert np.array_equal(back.mean, stats.mean) and np.array_equal(back.std, stats.std)


def _batch(E=3, L=12, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.uniform(0, 100, (E, L + 1, 6))
    obs[..., 3] = np.array([10.0, 40.0, 90.0])[:E, None]
    return TransitionBatch(obs, rng.uniform(-1, 1, (E, L, 3)), rng.normal(size=(E, L)))


def test_batch_shapes_and_tuples():
    b = _batch()
    assert len(b) == 36 and b.n_episodes == 3 and b.episode_length == 12
    o, a, r, o2 = b.tuples()
    assert o.shape == (36, 6) and a.shape == (36, 3) and r.shape == (36,)
    assert np.array_equal(o[1], o2[0])
    assert np.array_equal(b.set_points, [10.0, 40.0, 90.0])
    with pytest.raises(ValueError):
        TransitionBatch(b.observations, b.actions[:, :-1], b.rewards)


def test_csv_roundtrip_is_exact(tmp_path):
    b = _batch()
    path = tmp_path / "d.csv"
    b.to_csv(path)
    lines = path.read_text().splitlines()
    assert tuple(lines[0].split(",")) == CSV_HEADER
    assert len(lines) == 1 + 3 * 13
    assert lines[13].endswith(",,,,")
    back = TransitionBatch.from_csv(path)
    for x, y in zip((back.observations, back.actions, back.rewards), (b.observations, b.actions, b.rewards)):
        assert np.array_equal(x, y)


def test_csv_reader_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        read_episodes_csv(path)
