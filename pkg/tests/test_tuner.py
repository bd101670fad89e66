import math

import numpy as np
import pytest

from mpcctune.tuner import (
    HISTORY_COLUMNS,
    Checkpoint,
    GaussianPolicy,
    Sample,
    TrainConfig,
    acceptance_probability,
    mh_chain,
    mh_search,
    random_search,
    reflect_into,
    reward_weights,
    run_search,
    sample_batch,
    train_policy,
    wml_update,
)


def quadratic(target):
    target = np.asarray(target, dtype=np.float64)

    def evaluate(phi, seed):
        return Sample(-float(np.sum((phi - target) ** 2)))

    return evaluate


def unit_policy(dim=1, var=1.0, floor=1e-12, mean=None):
    lo, hi = np.full(dim, -10.0), np.full(dim, 10.0)
    m = np.zeros(dim) if mean is None else mean
    return GaussianPolicy(m, np.full(dim, var), lo, hi, np.full(dim, floor))


# -- policy -------------------------------------------------------------------------


def test_policy_invariants():
    with pytest.raises(ValueError):
        GaussianPolicy([0.0], [1.0], [1.0], [0.0], [1e-6])
    with pytest.raises(ValueError):
        GaussianPolicy([0.0], [1.0], [0.0], [1.0], [0.0])
    with pytest.raises(ValueError):
        GaussianPolicy([0.0, 0.0], [1.0], [0.0], [1.0], [1e-6])
    p = GaussianPolicy([5.0], [1e-20], [0.0], [1.0], [1e-6])
    assert p.mean[0] == 1.0 and p.variance[0] == 1e-6


def test_from_bounds_defaults():
    p = GaussianPolicy.from_bounds([0.0, 0.0], [4.0, 8.0])
    np.testing.assert_array_equal(p.mean, [2.0, 4.0])
    np.testing.assert_allclose(p.variance, [1.0, 4.0])
    np.testing.assert_allclose(p.with_variance(1 / 6).variance, [(4 / 6) ** 2, (8 / 6) ** 2])


def test_samples_at_floor_equal_mean():
    p = unit_policy(3, var=1e-12, mean=np.array([1.0, 2.0, 3.0]))
    X = sample_batch(p, 16)
    np.testing.assert_allclose(X, np.tile(p.mean, (16, 1)), atol=1e-5)


def test_samples_clipped_at_box_edge():
    p = GaussianPolicy([1.0, 0.0], [4.0, 4.0], [0.0, 0.0], [1.0, 1.0], [1e-6, 1e-6])
    X = sample_batch(p, 200)
    assert np.all(X >= 0.0) and np.all(X <= 1.0)


def test_empirical_mean_of_many_draws():
    p = unit_policy(1, var=4.0, mean=np.array([0.5]))
    X = sample_batch(p, 100_000)
    assert abs(X.mean() - 0.5) < 4 * 2.0 / math.sqrt(1e5)


def test_samples_depend_only_on_stream_indices():
    p = unit_policy(4)
    a = sample_batch(p, 8, master_seed=3, episode=2)
    b = sample_batch(p, 16, master_seed=3, episode=2)
    np.testing.assert_array_equal(a, b[:8])
    assert not np.array_equal(a, sample_batch(p, 8, master_seed=3, episode=3))


# -- weights and update ---------------------------------------------------------------


def test_equal_rewards_give_uniform_weights():
    np.testing.assert_allclose(reward_weights([2.0] * 5, 0.3), 0.2, atol=1e-15)


def test_softmax_example():
    np.testing.assert_allclose(reward_weights([0.0, math.log(2.0)], 1.0), [1 / 3, 2 / 3], atol=1e-12)


def test_weights_shift_invariance_and_beta_scaling():
    rng = np.random.default_rng(0)
    # rewards on a dyadic grid so that R + c is exact in floating point
    R = np.round(rng.normal(size=16) * 50 * 2 ** 20) / 2 ** 20
    np.testing.assert_array_equal(reward_weights(R, 0.05), reward_weights(R + 1000.0, 0.05))
    np.testing.assert_allclose(reward_weights(R, 0.5), reward_weights(10 * R, 0.05), atol=1e-15)
    w = reward_weights(R * 1e6, 1.0)
    assert np.all(np.isfinite(w)) and abs(w.sum() - 1) < 1e-12
    with pytest.raises(ValueError):
        reward_weights([0.0, math.nan], 1.0)


def test_wml_two_sample_example():
    p = wml_update(unit_policy(), np.array([[0.0], [4.0]]), np.array([0.25, 0.75]))
    assert abs(p.mean[0] - 3.0) < 1e-12
    assert abs(p.variance[0] - 3.0) < 1e-12


def test_wml_uniform_weights_is_ml_fit():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(10, 3))
    p = wml_update(unit_policy(3), X, np.full(10, 0.1))
    np.testing.assert_allclose(p.mean, X.mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(p.variance, X.var(axis=0), atol=1e-14)


def test_wml_point_mass():
    X = np.array([[1.0, 2.0], [3.0, -1.0]])
    p = wml_update(unit_policy(2, floor=1e-4), X, np.array([0.0, 1.0]))
    np.testing.assert_array_equal(p.mean, X[1])
    np.testing.assert_array_equal(p.variance, [1e-4, 1e-4])


def test_wml_mean_is_convex_combination():
    rng = np.random.default_rng(2)
    for _ in range(200):
        X = rng.normal(size=(16, 5)) * 3
        w = reward_weights(rng.normal(size=16) * 10, 1.0)
        p = wml_update(unit_policy(5), X, w)
        assert np.all(p.mean >= X.min(axis=0) - 1e-12) and np.all(p.mean <= X.max(axis=0) + 1e-12)


def test_wml_mean_clipped_to_box():
    pol = GaussianPolicy([0.5], [0.1], [0.0], [1.0], [1e-6])
    p = wml_update(pol, np.array([[2.0], [3.0]]), np.array([0.5, 0.5]))
    assert p.mean[0] == 1.0


def test_variance_floor_survives_repeated_updates():
    pol = unit_policy(3, floor=1e-3)
    for ep in range(100):
        X = sample_batch(pol, 16, 0, ep)
        R = -np.sum(X ** 2, axis=1)
        pol = wml_update(pol, X, reward_weights(R, 1e4))
        assert np.all(pol.variance >= 1e-3)


def test_full_update_shift_invariance_bit_identical():
    pol = unit_policy(4, var=2.0)
    X = sample_batch(pol, 16, 7, 0)
    R = np.round(-np.sum(X ** 2, axis=1) * 2 ** 30) / 2 ** 30
    a = wml_update(pol, X, reward_weights(R, 0.7))
    b = wml_update(pol, X, reward_weights(R - 123.0, 0.7))
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.variance, b.variance)


# -- training -----------------------------------------------------------------------


def synthetic_config(**kw):
    base = dict(episodes=(50,), fidelities=("simple",), beta=400.0, variance_floor=0.015, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(samples_per_episode=1)
    with pytest.raises(ValueError):
        TrainConfig(beta=0.0)
    with pytest.raises(ValueError):
        TrainConfig(episodes=(30,))
    with pytest.raises(ValueError):
        TrainConfig(episodes=(-1, 3))
    cfg = TrainConfig()
    assert cfg.total_episodes == 60 and cfg.stage_of(29) == 0 and cfg.stage_of(30) == 1


def test_synthetic_convergence():
    rng = np.random.default_rng(5)
    target = rng.uniform(0.2, 0.8, 12)
    res = train_policy([quadratic(target)], np.zeros(12), np.ones(12), synthetic_config(seed=1))
    assert np.max(np.abs(res.policy.mean - target)) < 0.05
    assert len(res.history) == 50


def test_history_records():
    target = np.full(3, 0.3)
    res = train_policy([quadratic(target)] * 2, np.zeros(3), np.ones(3),
                       synthetic_config(episodes=(4, 3), fidelities=("simple", "perturbed")))
    assert [h.stage for h in res.history] == [0] * 4 + [1] * 3
    best = [h.best_reward for h in res.history]
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
    for h in res.history:
        assert h.samples.shape == (16, 3) and h.rewards.shape == (16,)
        assert abs(h.weights.sum() - 1.0) < 1e-12
        assert tuple(h.history_row()) == HISTORY_COLUMNS
    assert res.best_reward == best[-1]
    # stage 2 starts from the stage-1 mean with the variance reset
    s1_end = res.history[3].policy
    stage2_first = res.history[4].samples
    assert np.std(stage2_first[:, 0]) > 5 * math.sqrt(s1_end.variance[0])


def test_zero_episodes_returns_initial_policy():
    res = train_policy([quadratic([0.5])], [0.0], [1.0], TrainConfig(episodes=(0,), fidelities=("simple",)))
    assert res.history == []
    assert res.policy.mean[0] == 0.5 and res.policy.variance[0] == pytest.approx(0.0625)


def test_training_is_deterministic():
    target = np.full(5, 0.7)
    cfg = synthetic_config(episodes=(10,), beta=50.0)
    a = train_policy([quadratic(target)], np.zeros(5), np.ones(5), cfg)
    b = train_policy([quadratic(target)], np.zeros(5), np.ones(5), cfg)
    for ha, hb in zip(a.history, b.history):
        np.testing.assert_array_equal(ha.samples, hb.samples)
        np.testing.assert_array_equal(ha.policy.variance, hb.policy.variance)


def test_resume_reproduces_uninterrupted_run():
    target = np.full(4, 0.2)
    cfg = synthetic_config(episodes=(6, 4), fidelities=("simple", "perturbed"), beta=50.0)
    evals = [quadratic(target)] * 2
    full = train_policy(evals, np.zeros(4), np.ones(4), cfg)
    h = full.history[6]
    ck = Checkpoint(h.policy, h.stage, h.episode, h.best_reward, h.best_phi)
    ck = Checkpoint.loads(ck.dumps())
    rest = train_policy(evals, np.zeros(4), np.ones(4), cfg, resume=ck)
    assert [r.episode for r in rest.history] == [7, 8, 9]
    np.testing.assert_array_equal(rest.policy.mean, full.policy.mean)
    assert rest.best_reward == full.best_reward


def test_checkpoint_round_trip():
    pol = GaussianPolicy([0.1, 0.2], [0.3, 0.4], [0.0, 0.0], [1.0, 1.0], [1e-6, 1e-6])
    ck = Checkpoint(pol, 1, 41, -3.5, np.array([0.5, 0.6]), {"t1": 4.0})
    d = ck.to_dict()
    assert {"mean", "variances", "bounds", "stage", "episode"} <= set(d)
    assert d["stage"] == 2
    back = Checkpoint.loads(ck.dumps())
    np.testing.assert_array_equal(back.policy.mean, pol.mean)
    np.testing.assert_array_equal(back.policy.variance, pol.variance)
    assert (back.stage, back.episode, back.best_reward) == (1, 41, -3.5)
    with pytest.raises(ValueError):
        Checkpoint.from_dict({"mean": [0.0]})


def test_bad_sample_is_absorbed():
    from mpcctune.mpcc import ParamBounds
    from mpcctune.rollout import SimConfig
    from mpcctune.track import bundled_track
    from mpcctune.tuner import RolloutEvaluator

    track = bundled_track("single_gate")
    ev = RolloutEvaluator(track, SimConfig(timeout=1.0))
    s = ev(np.full(3, np.nan), 0)  # wrong length and NaN: the episode raises
    assert s.record["crash"] and s.reward < -100
    lo, hi = ParamBounds().arrays(1)
    assert len(lo) == 6


# -- baselines ----------------------------------------------------------------------


def test_random_search_budget_one():
    res = random_search(quadratic([0.5, 0.5]), 1, [0.0, 0.0], [1.0, 1.0], seed=4)
    assert len(res.history) == 1
    np.testing.assert_array_equal(res.best_phi, res.history[0].phi)
    assert res.best_reward == res.history[0].sample.reward


def test_random_search_running_max_and_box():
    res = random_search(quadratic([0.5, 0.5]), 100, [0.0, 0.0], [1.0, 1.0], seed=4)
    best = [s.best_reward for s in res.history]
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
    assert best[-1] == max(s.sample.reward for s in res.history) == res.best_reward
    X = np.array([s.phi for s in res.history])
    assert np.all((X >= 0) & (X <= 1))
    assert res.top(3)[0].sample.reward == res.best_reward
    # a budget prefix is the shorter run
    short = random_search(quadratic([0.5, 0.5]), 40, [0.0, 0.0], [1.0, 1.0], seed=4)
    assert short.best_reward == best[39]


def test_acceptance_probability():
    assert acceptance_probability(2.0, 1.0, 0.05) == 1.0
    assert abs(acceptance_probability(0.0, math.log(2.0), 1.0) - 0.5) < 1e-12
    assert abs(acceptance_probability(-math.log(2.0) / 0.05, 0.0, 0.05) - 0.5) < 1e-12


def test_reflection_stays_in_box_and_is_identity_inside():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1000, 3)) * 5
    y = reflect_into(x, np.zeros(3), np.ones(3))
    assert np.all((y >= 0) & (y <= 1))
    np.testing.assert_allclose(reflect_into(np.array([0.3, 1.2, -0.1]), 0.0, 1.0), [0.3, 0.8, 0.1])


def test_mh_zero_scale_never_moves():
    res = mh_search(quadratic([0.2, 0.2]), 30, [0.0, 0.0], [1.0, 1.0], proposal_scales=0.0, seed=1)
    for s in res.history:
        np.testing.assert_array_equal(s.phi, [0.5, 0.5])
    with pytest.raises(ValueError):
        mh_search(quadratic([0.2]), 3, [0.0], [1.0], proposal_scales=-1.0)


def test_mh_improvements_always_accepted_and_best_monotone():
    res = mh_search(quadratic([0.2, 0.7]), 200, [0.0, 0.0], [1.0, 1.0], beta=1.0, seed=2)
    current = res.history[0].sample.reward
    for s in res.history[1:]:
        if s.sample.reward > current:
            assert s.accepted
        if s.accepted:
            current = s.sample.reward
    best = [s.best_reward for s in res.history]
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
    assert res.best_reward > res.history[0].sample.reward


def test_run_search_dispatch():
    ev = quadratic([0.5])
    assert len(run_search("random", ev, 5, [0.0], [1.0]).history) == 5
    assert len(run_search("mh", ev, 5, [0.0], [1.0]).history) == 5
    with pytest.raises(ValueError):
        run_search("bo", ev, 5, [0.0], [1.0])


def test_mh_stationary_distribution_double_well():
    # double well on [-2, 2]; the chain should sample exp(beta R) restricted to the box
    def R(x):
        return float(-4.0 * (x[0] ** 2 - 1.0) ** 2)

    chain = mh_chain(R, 100_000, [-2.0], [2.0], scales=0.8, beta=1.0, seed=3)[:, 0]
    edges = np.linspace(-2, 2, 41)
    emp, _ = np.histogram(chain, bins=edges)
    emp = emp / emp.sum()
    fine = np.linspace(-2, 2, 40 * 200 + 1)
    dens = np.exp(-4.0 * (fine ** 2 - 1.0) ** 2)
    mass = np.array([np.trapezoid(dens[i * 200:(i + 1) * 200 + 1], fine[i * 200:(i + 1) * 200 + 1]) for i in range(40)])
    mass /= mass.sum()
    assert 0.5 * np.abs(emp - mass).sum() < 0.05


def test_wml_beats_random_search_on_synthetic_quadratic():
    # matched budget of 960 evaluations, 12-D unit box, 10 seeds
    wml_d, rs_d = [], []
    for seed in range(10):
        target = np.random.default_rng(100 + seed).uniform(0.1, 0.9, 12)
        res = train_policy([quadratic(target)], np.zeros(12), np.ones(12), synthetic_config(episodes=(60,), seed=seed))
        wml_d.append(np.linalg.norm(res.policy.mean - target))
        rs = random_search(quadratic(target), 960, np.zeros(12), np.ones(12), seed=seed)
        rs_d.append(np.linalg.norm(rs.best_phi - target))
    assert np.mean(rs_d) > np.mean(wml_d)
