import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pickplace_hrl.env import EnvConfig
from pickplace_hrl.errors import ConfigurationError, ContractViolation
from pickplace_hrl.hlc import (
    HLC_OBS_DIM,
    HLC_STEP_CAP,
    GaeConfig,
    HlcTrainConfig,
    a2c_loss_and_grad,
    compute_gae,
    discounted_returns,
    hlc_policy_step,
    hlc_reward,
    new_hlc_policy,
    normalize,
    run_hlc_episode,
    train_hlc,
)
from pickplace_hrl.nn import Adam, GruPolicy, finite_difference_grad, relative_error
from pickplace_hrl.subtasks import CANONICAL_SEQUENCE, oracle_policies

CFG = EnvConfig()
ORACLES = oracle_policies(CFG)


def gae_oracle(rewards, values, gamma, lam):
    """Direct double sum: A_t = sum_l (gamma*lam)^l * delta_{t+l}, terminal bootstrap 0."""
    n = len(rewards)
    v = list(values[:n]) + [0.0]
    out = []
    for t in range(n):
        total = 0.0
        for l in range(n - t):
            delta = rewards[t + l] + gamma * v[t + l + 1] - v[t + l]
            total += (gamma * lam) ** l * delta
        out.append(total)
    return np.array(out)


def test_hlc_reward_table():
    assert hlc_reward(True, False) == 0.0
    assert hlc_reward(False, False) == 0.0
    assert hlc_reward(True, True) == 1.0
    assert hlc_reward(False, True) == 0.0


def test_gae_worked_example():
    adv = compute_gae([0, 0, 1], [0.2, 0.5, 0.8, 0.0], 0.99, 0.95)
    np.testing.assert_allclose(adv, gae_oracle([0, 0, 1], [0.2, 0.5, 0.8], 0.99, 0.95), rtol=0, atol=1e-12)


@pytest.mark.parametrize("gamma,lam", list(itertools.product([0.0, 0.5, 0.95, 1.0], repeat=2)))
def test_gae_matches_double_sum_grid(gamma, lam):
    rng = np.random.default_rng(int(gamma * 100 + lam * 10))
    for _ in range(25):
        n = int(rng.integers(1, 7))
        r, v = rng.normal(size=n), rng.normal(size=n + 1)
        np.testing.assert_allclose(compute_gae(r, v, gamma, lam), gae_oracle(r, v, gamma, lam), rtol=0, atol=1e-12)


def test_gae_hundred_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        gamma, lam = rng.uniform(0, 1, 2)
        r, v = rng.normal(size=n), rng.normal(size=n + 1)
        np.testing.assert_allclose(compute_gae(r, v, gamma, lam), gae_oracle(r, v, gamma, lam), rtol=0, atol=1e-12)


def test_gae_special_cases():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=5), rng.normal(size=6)
    v0 = v.copy()
    v0[-1] = 0.0
    np.testing.assert_allclose(compute_gae(r, v, 0.9, 0.0), r + 0.9 * v0[1:] - v0[:-1], atol=1e-15)
    np.testing.assert_allclose(compute_gae(r, v, 1.0, 1.0), np.cumsum(r[::-1])[::-1] - v[:-1], atol=1e-12)
    with pytest.raises(ContractViolation):
        compute_gae(r, v[:-1], 0.9, 0.9)
    with pytest.raises(ContractViolation):
        compute_gae(r, v, 1.1, 0.9)


def test_discounted_returns():
    np.testing.assert_allclose(discounted_returns([0, 0, 1], 0.99), [0.99 ** 2, 0.99, 1.0])


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=21))
@settings(max_examples=100, deadline=None)
def test_policy_outputs_are_distributions(xs):
    pol = new_hlc_policy(0)
    x = np.resize(np.array(xs), HLC_OBS_DIM)
    probs, value, h = hlc_policy_step(pol, x, pol.initial_hidden())
    assert np.all(probs > 0) and abs(probs.sum() - 1.0) < 1e-12
    assert np.isfinite(value) and np.all(np.isfinite(h))


def test_fresh_policy_is_near_uniform_and_sampling_reproducible():
    pol = new_hlc_policy(3)
    probs, _, _ = hlc_policy_step(pol, np.ones(HLC_OBS_DIM), pol.initial_hidden())
    np.testing.assert_allclose(probs, 1 / 3, atol=0.02)
    a = run_hlc_episode(pol, ORACLES, CFG, 17)
    b = run_hlc_episode(pol, ORACLES, CFG, 17)
    assert a.sequence == b.sequence and np.array_equal(a.observations, b.observations)


def test_trajectory_structure():
    pol = new_hlc_policy(1)
    for seed in range(40):
        tr = run_hlc_episode(pol, ORACLES, CFG, seed)
        assert 1 <= len(tr) <= 6
        assert tr.terminals.sum() == 1 and tr.terminals[-1]
        assert np.all(tr.rewards[:-1] == 0) and tr.rewards[-1] == float(tr.success)
        assert tr.env_steps <= HLC_STEP_CAP
        assert tr.observations.shape == (len(tr), HLC_OBS_DIM)
        np.testing.assert_allclose(tr.observations[:, -1], np.arange(len(tr)) / 6)


def test_forced_sequences():
    pol = new_hlc_policy(0)
    wins = [run_hlc_episode(pol, ORACLES, CFG, s, forced=CANONICAL_SEQUENCE).rewards[-1] for s in range(100)]
    assert np.mean(wins) >= 0.9
    losses = [run_hlc_episode(pol, ORACLES, CFG, s, forced=["retract"] * 6).rewards[-1] for s in range(100)]
    assert np.mean(losses) <= 0.01


def test_missing_expert_is_configuration_error():
    with pytest.raises(ConfigurationError):
        run_hlc_episode(new_hlc_policy(0), {"approach": ORACLES["approach"]}, CFG, 0)
    with pytest.raises(ConfigurationError):
        train_hlc(CFG, {**ORACLES, "retract": None}, HlcTrainConfig(max_env_steps=10))


@pytest.mark.parametrize("seed", range(5))
def test_a2c_gradient_matches_finite_differences(seed):
    pol = GruPolicy(HLC_OBS_DIM, 8, rng=np.random.default_rng(seed), head_scale=1.0)
    trajs = [run_hlc_episode(pol, ORACLES, CFG, seed * 10 + i) for i in range(3)]
    gae = GaeConfig()
    # values feed the advantages as constants: freeze them at the current parameters
    _, g, _ = a2c_loss_and_grad(pol, trajs, gae)
    frozen = [(tr, tr.values.copy()) for tr in trajs]

    def loss(p):
        probe = GruPolicy(HLC_OBS_DIM, 8, params=p)
        out, _, _ = a2c_loss_and_grad(probe, [t for t, _ in frozen], gae)
        return out

    assert relative_error(g, finite_difference_grad(loss, pol.params), floor=1e-7) < 1e-4


def test_advantage_scaling_leaves_normalized_update_unchanged():
    pol = new_hlc_policy(5)
    trajs = [run_hlc_episode(pol, ORACLES, CFG, s) for s in range(16)]
    grads = []
    for scale in (1.0, 37.0):
        scaled = []
        for tr in trajs:
            tr2 = type(tr)(**{**tr.__dict__, "rewards": tr.rewards * scale, "values": tr.values * scale})
            scaled.append(tr2)
        advs = np.concatenate([compute_gae(t.rewards, np.append(t.values, 0), 0.99, 0.95) for t in scaled])
        grads.append(normalize(advs))
    np.testing.assert_allclose(grads[0], grads[1], atol=1e-9)
    probe = []
    for scale in (1.0, 37.0):
        p = pol.copy()
        scaled = [type(t)(**{**t.__dict__, "rewards": t.rewards * scale, "values": t.values * scale}) for t in trajs]
        _, g, _ = a2c_loss_and_grad(p, scaled, GaeConfig(value_coef=0.0))
        Adam(p.n_params, lr=0.05).step(p.params, g)
        probe.append([int(np.argmax(hlc_policy_step(p, x, p.initial_hidden())[0]))
                      for x in trajs[0].observations])
    assert probe[0] == probe[1]


def test_gae_config_validation():
    with pytest.raises(ContractViolation):
        GaeConfig(gamma=1.5)
    with pytest.raises(ContractViolation):
        GaeConfig(workers=0)
    assert HlcTrainConfig(gae={"workers": 2}).gae.workers == 2


def test_training_independent_of_worker_count():
    cfg = HlcTrainConfig(max_env_steps=4000, eval_every=2, eval_episodes=10)
    one = train_hlc(CFG, ORACLES, HlcTrainConfig(**{**cfg.__dict__, "gae": GaeConfig(workers=1)}), seed=2)
    four = train_hlc(CFG, ORACLES, HlcTrainConfig(**{**cfg.__dict__, "gae": GaeConfig(workers=4)}), seed=2)
    assert one.policy.params.tobytes() == four.policy.params.tobytes()
    assert [(p.env_steps, p.success_rate, p.sequence_accuracy) for p in one.curve] == \
           [(p.env_steps, p.success_rate, p.sequence_accuracy) for p in four.curve]
