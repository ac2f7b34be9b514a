import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from batchrl.data import TransitionBatch, ZScore
from batchrl.env import ActionDelta
from batchrl.nfq import (
    ACTIONS,
    NfqConfig,
    NfqPolicy,
    QFunction,
    QNetwork,
    QScaling,
    build_targets,
    discretize_actions,
    fit_network,
    greedy_action,
    nfq_iterate,
    scale_q_targets,
    select_best_policy,
    train_nfq,
    train_validation_split,
)

from oracles import chain_q_values
from stubs import ActionRewardModel, ConstantPolicy

QUICK = NfqConfig(max_epochs=30, patience=5)


def chain_batch(L=400, seed=0):
    """Two states encoded in v (0 or 1); any action with dv = +1 moves to state 1 and pays 1."""
    rng = np.random.default_rng(seed)
    acts = ACTIONS[rng.integers(0, 27, L)]
    s = np.zeros(L + 1)
    s[1:] = (acts[:, 0] > 0).astype(float)
    obs = np.zeros((1, L + 1, 6))
    obs[0, :, 0] = s
    obs[0, :, 3] = 50.0
    return TransitionBatch(obs, acts[None], (s[1:] == 1).astype(float)[None])


def random_batch(n=200, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.uniform(0, 100, (1, n + 1, 6))
    obs[..., 4:] = rng.uniform(0, 5, (1, n + 1, 2))
    acts = ACTIONS[rng.integers(0, 27, n)][None]
    return TransitionBatch(obs, acts, -obs[:, 1:, 4] - 3 * obs[:, 1:, 5])


def test_action_set():
    a = discretize_actions()
    assert a.shape == (27, 3) and len({tuple(x) for x in a}) == 27
    assert tuple(a[0]) == (-1, -1, -1) and tuple(a[26]) == (1, 1, 1) and tuple(a[13]) == (0, 0, 0)
    assert tuple(a[1]) == (-1, -1, 0) and tuple(a[3]) == (-1, 0, -1) and tuple(a[9]) == (0, -1, -1)


def test_q_scaling_examples():
    scaled, sc = scale_q_targets([-200.0, -100.0, -150.0])
    assert np.allclose(scaled, [0.1, 0.9, 0.5], atol=1e-15)
    assert np.all(scale_q_targets([3.0, 3.0])[0] == 0.5)
    assert QScaling(3.0, 3.0).unscale(0.7) == 3.0
    with pytest.raises(ValueError):
        QScaling.fit([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=30))
def test_q_scaling_roundtrip_and_monotone(xs):
    x = np.array(xs)
    y, sc = scale_q_targets(x)
    if sc.degenerate:
        assert np.all(y == 0.5)
        return
    assert np.all((y >= 0.1 - 1e-12) & (y <= 0.9 + 1e-12))
    assert np.allclose(sc.unscale(y), x, atol=1e-12 * max(1.0, np.abs(x).max()))
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(y[order]) >= 0)


def test_q_network_gradient_matches_finite_differences(rng):
    net = QNetwork.init(rng, scale=1.0)
    X, y = rng.normal(size=(12, 9)), rng.uniform(0.1, 0.9, 12)
    _, grads = net.loss_and_grad(X, y)
    h = 1e-6
    for name in ("W1", "b1", "W2", "b2"):
        w = getattr(net, name)
        for idx in list(np.ndindex(w.shape))[:5]:
            old = w[idx]
            w[idx] = old + h
            up, _ = net.loss_and_grad(X, y)
            w[idx] = old - h
            dn, _ = net.loss_and_grad(X, y)
            w[idx] = old
            fd = (up - dn) / (2 * h)
            assert abs(fd - grads[name][idx]) <= 1e-4 * max(abs(fd), 1e-8)


def test_sgd_epoch_reduces_loss(rng):
    net = QNetwork.init(rng)
    X = rng.normal(size=(300, 9))
    y = 0.5 + 0.3 * np.tanh(X[:, 0])
    before, _ = net.loss_and_grad(X, y)
    fitted, err = fit_network(net, X, y, NfqConfig(max_epochs=50), rng)
    after, _ = fitted.loss_and_grad(X, y)
    assert after < 0.2 * before and np.isfinite(err)
    # the input network is untouched
    assert net.loss_and_grad(X, y)[0] == before


def test_targets():
    obs = np.tile([10.0, 10.0, 10.0, 50.0, 1.0, 0.0], (1, 6, 1))
    b = TransitionBatch(obs, np.zeros((1, 5, 3)), np.ones((1, 5)))
    zero_q = QFunction(QNetwork.init(np.random.default_rng(0)), ZScore(np.zeros(9), np.ones(9)), QScaling(0.0, 0.0))
    assert np.all(build_targets(b, zero_q, 0.5) == 1.0)
    rb = random_batch()
    assert np.array_equal(build_targets(rb, zero_q, 0.0), rb.rewards.ravel())
    assert np.array_equal(build_targets(rb, None, 0.9), rb.rewards.ravel())
    bad = TransitionBatch(rb.observations, rb.actions, np.full_like(rb.rewards, np.nan))
    with pytest.raises(FloatingPointError):
        build_targets(bad, None, 0.5)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_zero_discount_is_reward_regression(seed):
    b = random_batch(seed=seed)
    rng = np.random.default_rng(seed)
    split = train_validation_split(len(b), 0.1, rng)
    Q = nfq_iterate(b, None, 0.0, QUICK, seed, split=split)
    o, a, r, _ = b.tuples()
    X = np.concatenate([o, a], axis=1)
    stats = ZScore.fit(X)
    y, _ = scale_q_targets(r)
    net0 = QNetwork.init(np.random.default_rng(seed))
    _, direct = fit_network(net0, stats.apply(X), y, QUICK, np.random.default_rng(seed + 1), split)
    assert Q.validation_mse <= 1.1 * direct


def test_chain_converges_to_analytic_q():
    q_right, q_other = chain_q_values(0.5)
    policies = train_nfq(chain_batch(), 50, 0.5, seed=1)
    table = policies[-1].q.q_table(np.array([[0, 0, 0, 50, 0, 0], [1, 0, 0, 50, 0, 0.0]]))
    right = ACTIONS[:, 0] > 0
    assert np.allclose(table[:, right], q_right, atol=1e-2)
    assert np.allclose(table[:, ~right], q_other, atol=1e-2)
    for pol in policies[-10:]:
        for s in (0.0, 1.0):
            assert pol.act(np.array([[s, 0, 0, 50, 0, 0]]))[0, 0] == 1.0


def test_greedy_action_with_stubs():
    assert greedy_action(lambda rows: np.arange(27), None, np.zeros(6)) == ActionDelta(1, 1, 1)
    assert greedy_action(lambda rows: np.zeros(27), None, np.zeros(6)) == ActionDelta(-1, -1, -1)
    neg_sq = lambda rows: -np.sum(rows[:, 6:] ** 2, axis=1)  # noqa: E731
    assert greedy_action(neg_sq, None, np.zeros(6)) == ActionDelta(0, 0, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=27, max_size=27), st.lists(st.floats(0, 100), min_size=6, max_size=6))
def test_greedy_action_is_a_discrete_triple(values, obs):
    a = greedy_action(lambda rows: np.array(values), ZScore(np.zeros(9), np.ones(9)), np.array(obs))
    assert any(np.array_equal([a.dv, a.dg, a.dh], x) for x in ACTIONS)


def test_train_nfq_is_deterministic_and_sized():
    b = random_batch(seed=3)
    a = train_nfq(b, 3, 0.9, seed=4, cfg=QUICK)
    c = train_nfq(b, 3, 0.9, seed=4, cfg=QUICK)
    assert len(a) == 3 and len(train_nfq(b, 1, 0.9, seed=4, cfg=QUICK)) == 1
    for p, q in zip(a, c):
        assert np.array_equal(p.q.net.W1, q.q.net.W1) and p.q.scaling == q.q.scaling
    assert [p.q.iteration for p in a] == [1, 2, 3]
    with pytest.raises(ValueError):
        train_nfq(b, 0)
    with pytest.raises(ValueError):
        NfqConfig(gamma=1.0)


def _const_policies(dvs):
    return [ConstantPolicy((dv, 0.0, 0.0)) for dv in dvs]


def test_select_best_policy_with_stubs():
    m = ActionRewardModel(lambda a: 100 * a[:, 0] - 100)
    hist = np.zeros((4, 3, 6))
    res = select_best_policy(_const_policies([-0.7, -0.6, -0.8]), m, hist, horizon=5)
    assert res.index == 1
    assert np.allclose(res.estimates, [-170, -160, -180])
    assert res.value == pytest.approx(-160)
    single = select_best_policy(_const_policies([0.1]), m, hist, horizon=1)
    assert single.index == 0
    assert select_best_policy(_const_policies([0.2, 0.2, 0.2]), m, hist).index == 0
    with pytest.raises(ValueError):
        select_best_policy([], m, hist)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=8))
def test_selection_returns_argmax_of_estimates(dvs):
    m = ActionRewardModel(lambda a: -np.abs(a[:, 0] - 0.3))
    res = select_best_policy(_const_policies(dvs), m, np.zeros((2, 3, 6)), horizon=3)
    assert res.index == int(np.argmax(res.estimates))
    assert res.policy is not None and res.value == res.estimates.max()


def test_policy_file_roundtrip(tmp_path):
    pol = train_nfq(random_batch(), 1, 0.9, seed=0, cfg=QUICK)[0]
    path = tmp_path / "p.json"
    pol.save(path)
    back = NfqPolicy.load(path)
    obs = random_batch(seed=8).observations[0]
    assert np.array_equal(back.act(obs), pol.act(obs))
    assert np.array_equal(pol(obs[:5], 0), pol.act(obs[4:5])[0])
    path.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        NfqPolicy.load(path)
