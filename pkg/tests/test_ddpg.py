from dataclasses import replace

import numpy as np
import pytest

from pickplace_hrl import env as kenv
from pickplace_hrl.ddpg import (
    Batch,
    DdpgAgent,
    DdpgConfig,
    LseTrainConfig,
    ReplayBuffer,
    Transition,
    actor_loss_and_grad,
    critic_loss_and_grad,
    critic_target,
    ddpg_update,
    sample_with_her,
    train_lse,
)
from pickplace_hrl.env import EnvConfig
from pickplace_hrl.errors import ContractViolation
from pickplace_hrl.nn import finite_difference_grad, relative_error

CFG = EnvConfig()


def random_episode(rng, T=5):
    obs = rng.normal(size=(T + 1, kenv.OBS_DIM))
    ag = rng.normal(size=(T + 1, kenv.GOAL_DIM))
    goal = np.repeat(rng.normal(size=(1, 3)), T, axis=0)
    act = rng.uniform(-1, 1, size=(T, kenv.ACTION_DIM))
    return obs, ag, goal, act


def as_transitions(obs, ag, goal, act):
    return [Transition(obs[t], act[t], ag[t], goal[t], obs[t + 1], ag[t + 1]) for t in range(len(act))]


def filled_buffer(n=20, T=5, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(T, capacity=100)
    for _ in range(n):
        buf.store_arrays(*random_episode(rng, T))
    return buf


def test_buffer_counting_and_contracts():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(50, capacity=200)
    for _ in range(100):
        buf.store_arrays(*random_episode(rng, 50))
    assert buf.n_transitions == 5000
    with pytest.raises(ContractViolation):
        buf.store_episode([])
    with pytest.raises(ContractViolation):
        buf.store_arrays(*random_episode(rng, 49))
    with pytest.raises(ContractViolation):
        sample_with_her(ReplayBuffer(5), 4, 4, rng)


def test_round_trip_without_relabeling():
    rng = np.random.default_rng(1)
    eps = [random_episode(rng) for _ in range(3)]
    buf = ReplayBuffer(5, capacity=10)
    for e in eps:
        buf.store_episode(as_transitions(*e))
    b = sample_with_her(buf, 500, 0, np.random.default_rng(2))
    assert not b.relabeled.any()
    for i in range(500):
        obs, ag, goal, act = eps[b.episode[i]]
        t = b.t[i]
        assert np.array_equal(b.obs[i], obs[t]) and np.array_equal(b.action[i], act[t])
        assert np.array_equal(b.goal[i], goal[t]) and np.array_equal(b.obs_next[i], obs[t + 1])
        assert b.reward[i] == kenv.compute_reward(ag[t + 1], goal[t])


def test_eviction_of_oldest_episode():
    rng = np.random.default_rng(3)
    buf = ReplayBuffer(5, capacity=4)
    first = random_episode(rng)
    buf.store_arrays(*first)
    for _ in range(4):
        buf.store_arrays(*random_episode(rng))
    b = sample_with_her(buf, 2000, 0, rng)
    assert not any(np.array_equal(o, first[0][0]) for o in b.obs)
    assert buf.size == 4


def test_her_rewards_exact_and_goals_from_future():
    buf = filled_buffer(50, T=10)
    rng = np.random.default_rng(4)
    b = sample_with_her(buf, 10_000, 4, rng)
    recomputed = kenv.compute_reward(b.ag_next, b.goal)
    assert np.array_equal(b.reward, recomputed)
    assert np.all(b.future_t >= b.t)
    r = b.relabeled
    assert np.array_equal(b.goal[r], buf.ag[b.episode[r], b.future_t[r] + 1])
    assert abs(r.mean() - 0.8) < 0.02


def test_relabel_to_own_next_goal_gives_zero_reward():
    buf = filled_buffer(5, T=1)
    b = sample_with_her(buf, 200, 10**9, np.random.default_rng(0))
    assert b.relabeled.all() and np.all(b.reward == 0.0)


def small_agent(seed=0, **kw):
    return DdpgAgent(DdpgConfig(hidden_dims=(16, 16), dtype="float64", **kw), seed)


def fake_batch(rng, n=8, reward=None):
    return Batch(
        obs=rng.normal(size=(n, kenv.OBS_DIM)), action=rng.uniform(-1, 1, (n, 4)), goal=rng.normal(size=(n, 3)),
        reward=-rng.uniform(0, 1, n) if reward is None else np.full(n, reward), obs_next=rng.normal(size=(n, 17)),
        ag_next=rng.normal(size=(n, 3)), done=np.zeros(n, bool), episode=np.zeros(n, int), t=np.zeros(n, int),
        future_t=np.zeros(n, int), relabeled=np.zeros(n, bool))


def test_critic_target_examples():
    rng = np.random.default_rng(0)
    agent = small_agent(gamma=0.98)
    agent.critic_target.params[:] = 0.0
    b = fake_batch(rng, reward=0.0)
    assert np.all(critic_target(b, agent) == 0.0)
    # Q_target == -10 via the output bias
    agent.critic_target.biases[-1][:] = -10.0
    b = fake_batch(rng, reward=-1.0)
    np.testing.assert_allclose(critic_target(b, agent), -10.8)
    agent.critic_target.biases[-1][:] = -1000.0
    np.testing.assert_allclose(critic_target(b, agent), -50.0, rtol=1e-12)
    assert np.all(critic_target(b, agent) == -1.0 / (1.0 - 0.98))
    g0 = DdpgAgent.__new__(DdpgAgent)
    g0.__dict__.update(agent.__dict__)
    g0.config = replace(agent.config, gamma=1e-300)
    b = fake_batch(rng)
    np.testing.assert_allclose(critic_target(b, g0), b.reward, atol=1e-12)


def test_critic_targets_within_feasible_range():
    buf = filled_buffer(20)
    agent = small_agent(1)
    agent.critic_target.biases[-1][:] = 30.0
    b = sample_with_her(buf, 256, 4, np.random.default_rng(0))
    y = critic_target(b, agent)
    assert np.all(y <= 0) and np.all(y >= -1 / (1 - 0.98))


def test_critic_gradient_vanishes_at_fixed_point():
    rng = np.random.default_rng(2)
    agent = small_agent(2)
    b = fake_batch(rng)
    x = agent.normalizer(b.obs, b.goal)
    q = agent.critic.forward(np.concatenate([x, b.action], axis=-1), cache=False)[..., 0]
    _, g = critic_loss_and_grad(agent, b, q)
    assert np.linalg.norm(g) < 1e-8


def test_critic_loss_decreases_on_frozen_batch():
    rng = np.random.default_rng(3)
    agent = small_agent(3)
    b = fake_batch(rng, n=1)
    y = critic_target(b, agent)
    losses = []
    for _ in range(100):
        loss, g = critic_loss_and_grad(agent, b, y)
        losses.append(loss)
        agent.critic_opt.step(agent.critic.params, g)
    assert losses[-1] < losses[0] * 1e-2


@pytest.mark.parametrize("seed", range(5))
def test_actor_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    agent = small_agent(seed, action_l2=0.5)
    b = fake_batch(rng)
    _, g = actor_loss_and_grad(agent, b)
    base = agent.actor.params.copy()

    def f(p):
        agent.actor.params[:] = p
        loss, _ = actor_loss_and_grad(agent, b)
        agent.actor.params[:] = base
        return loss

    assert relative_error(g, finite_difference_grad(f, base), floor=1e-6) < 1e-4


def test_ddpg_update_changes_online_nets_only():
    agent = small_agent(4)
    buf = filled_buffer(10)
    before = {k: v.copy() for k, v in agent.state_arrays().items()}
    ddpg_update(agent, sample_with_her(buf, 32, 4, np.random.default_rng(0)))
    after = agent.state_arrays()
    assert not np.array_equal(before["actor"], after["actor"])
    assert not np.array_equal(before["critic"], after["critic"])
    assert np.array_equal(before["actor_target"], after["actor_target"])
    agent.update_targets()
    np.testing.assert_allclose(agent.critic_target.params, 0.95 * before["critic_target"] + 0.05 * after["critic"])


def test_select_action_modes():
    agent = small_agent(5)
    rng = np.random.default_rng(0)
    o, g = rng.normal(size=17), rng.normal(size=3)
    assert np.array_equal(agent.select_action(o, g, False), agent.select_action(o, g, False))
    samples = np.array([agent.select_action(o, g, True, rng) for _ in range(10_000)])
    assert np.all(np.abs(samples) <= 1.0)
    uni = small_agent(5, random_eps=1.0)
    u = np.array([uni.select_action(o, g, True, rng) for _ in range(10_000)])
    n = len(u)
    # uniform on [-1, 1]: mean 0 (sd 1/sqrt(3n)), second moment 1/3 (sd sqrt(4/45/n))
    assert np.all(np.abs(u.mean(axis=0)) < 3 / np.sqrt(3 * n))
    assert np.all(np.abs((u ** 2).mean(axis=0) - 1 / 3) < 3 * np.sqrt(4 / 45 / n))


def test_train_config_validation():
    with pytest.raises(ContractViolation):
        LseTrainConfig(epoch_steps=1000, update_every=300)
    with pytest.raises(ContractViolation):
        LseTrainConfig(batch_size=0)
    assert LseTrainConfig(ddpg={"gamma": 0.9}).ddpg.gamma == 0.9


def test_zero_learning_rate_stays_at_baseline():
    cfg = LseTrainConfig(epoch_steps=600, max_env_steps=1800, eval_episodes=30, batches_per_update=2,
                         ddpg=DdpgConfig(actor_lr=0.0, critic_lr=0.0, hidden_dims=(32, 32)))
    res = train_lse(CFG, "retract", cfg, seed=0)
    assert [p.success_rate for p in res.curve] == [0.0, 0.0, 0.0]
    assert not res.converged and res.env_steps >= 1800


def test_training_is_reproducible_and_counts_prefix_steps():
    cfg = LseTrainConfig(epoch_steps=600, max_env_steps=1200, eval_episodes=10, batches_per_update=4,
                         ddpg=DdpgConfig(hidden_dims=(32, 32)))
    a = train_lse(CFG, "manipulate", cfg, seed=3)
    b = train_lse(CFG, "manipulate", cfg, seed=3)
    assert [(p.env_steps, p.success_rate) for p in a.curve] == [(p.env_steps, p.success_rate) for p in b.curve]
    assert a.agent.actor.params.tobytes() == b.agent.actor.params.tobytes()
    # manipulate episodes run 15 oracle approach steps + 10 learning steps
    assert a.curve[0].env_steps % 25 == 0


def test_running_best_envelope_nondecreasing():
    cfg = LseTrainConfig(epoch_steps=300, max_env_steps=1500, eval_episodes=10, batches_per_update=4,
                         ddpg=DdpgConfig(hidden_dims=(32, 32)))
    res = train_lse(CFG, "approach", cfg, seed=1)
    best = np.maximum.accumulate([p.success_rate for p in res.curve])
    assert np.all(np.diff(best) >= 0)
    assert np.all(np.diff([p.env_steps for p in res.curve]) > 0)
