import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duelattack import envkit, ppokit
from duelattack.ppokit import (ActorCritic, PPOConfig, RolloutBatch, clipped_objective, compute_gae, ppo_update,
                               train_loop)

SMALL = PPOConfig(n_envs=8, rollout_steps=32, minibatch_size=64, epochs=2)


def brute_force_returns(rewards, dones, gamma):
    out = np.zeros_like(rewards)
    for t in range(len(rewards)):
        g, k = 0.0, 0
        while t + k < len(rewards):
            g += gamma**k * rewards[t + k]
            if dones[t + k]:
                break
            k += 1
        out[t] = g
    return out


def test_config_validation():
    with pytest.raises(ValueError):
        PPOConfig(clip_epsilon=1.0)
    with pytest.raises(ValueError):
        PPOConfig(rollout_steps=100, n_envs=1, minibatch_size=64)
    assert PPOConfig().lr == 3e-4 and PPOConfig().rollout_steps == 2048


def test_gae_zero_rewards():
    adv, ret = compute_gae(np.zeros(5), np.zeros(6), np.zeros(5), 0.99, 0.95)
    assert not adv.any() and not ret.any()


def test_gae_return_to_go_example():
    adv, _ = compute_gae([1.0, 1.0], np.zeros(3), [0, 1], 1.0, 1.0)
    assert np.array_equal(adv, [2.0, 1.0])


def test_gae_discounted_example():
    adv, _ = compute_gae([0.0, 4.0], np.zeros(3), [0, 0], 0.5, 1.0)
    assert np.array_equal(adv, [2.0, 4.0])


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        compute_gae(np.zeros(3), np.zeros(3), np.zeros(3), 0.9, 0.9)


def test_gae_returns_are_advantage_plus_value():
    rng = np.random.default_rng(0)
    r, v, d = rng.normal(size=20), rng.normal(size=21), rng.random(20) < 0.2
    adv, ret = compute_gae(r, v, d, 0.9, 0.8)
    assert np.allclose(ret, adv + v[:-1], atol=1e-15)


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
@settings(max_examples=60, deadline=None)
def test_gae_equals_brute_force_when_lambda_one(seed, gamma):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    r, d = rng.normal(size=n), rng.random(n) < 0.15
    adv, _ = compute_gae(r, np.zeros(n + 1), d, gamma, 1.0)
    assert np.max(np.abs(adv - brute_force_returns(r, d, gamma))) < 1e-10


def test_clip_ratio_one_is_advantage():
    a = np.array([-2.0, 0.0, 3.5])
    assert np.array_equal(clipped_objective(np.zeros(3), np.zeros(3), a, 0.2), a)


def test_clip_hand_examples():
    assert clipped_objective(np.log(1.3), 0.0, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_objective(np.log(0.7), 0.0, -1.0, 0.2) == pytest.approx(-0.8)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-5, 5), st.floats(0.01, 0.99))
@settings(max_examples=200, deadline=None)
def test_clip_pessimism(lp_new, lp_old, adv, eps):
    f = clipped_objective(lp_new, lp_old, adv, eps)
    r = np.exp(lp_new - lp_old)
    assert f <= np.clip(r, 1 - eps, 1 + eps) * adv + 1e-12
    if adv >= 0:
        assert f <= r * adv + 1e-12


def bandit_batch(agent, n, rng, reward=(1.0, 0.0)):
    obs = np.ones((n, 1))
    act, logp = agent.sample(obs, rng)
    rew = np.where(act == 0, reward[0], reward[1])
    adv, ret = compute_gae(rew, np.zeros(n + 1), np.ones(n), 0.99, 0.95)
    return RolloutBatch(obs, act, logp, rew, np.zeros(n), np.ones(n), adv, ret)


def test_bandit_update_raises_good_arm_probability():
    rng = np.random.default_rng(0)
    agent = ActorCritic(1, ("discrete", 2), rng)
    p0 = agent.probs(np.ones((1, 1)))[0, 0]
    batch = bandit_batch(agent, 256, rng)
    ppo_update(agent, batch, PPOConfig(minibatch_size=64), np.random.default_rng(1))
    assert agent.probs(np.ones((1, 1)))[0, 0] > p0


def test_zero_advantage_and_entropy_leave_policy_unchanged():
    rng = np.random.default_rng(0)
    agent = ActorCritic(1, ("discrete", 2), rng)
    before = agent.policy.params.values.copy()
    batch = bandit_batch(agent, 128, rng, reward=(0.0, 0.0))
    batch.advantages = np.zeros(128)
    ppo_update(agent, batch, PPOConfig(minibatch_size=64, entropy_coef=0.0), np.random.default_rng(1))
    assert np.array_equal(agent.policy.params.values, before)


def test_approx_kl_matches_recomputation():
    rng = np.random.default_rng(3)
    agent = ActorCritic(1, ("discrete", 3), rng)
    batch = bandit_batch(agent, 256, rng)
    rep = ppo_update(agent, batch, PPOConfig(minibatch_size=64), np.random.default_rng(2))
    logp = np.array([np.log(agent.probs(o[None])[0, a]) for o, a in zip(batch.obs, batch.actions)])
    assert abs(rep.approx_kl - np.mean(batch.logp_old - logp)) < 1e-12


def test_non_finite_loss_aborts_and_restores():
    rng = np.random.default_rng(0)
    agent = ActorCritic(1, ("discrete", 2), rng)
    before = agent.policy.params.values.copy()
    batch = bandit_batch(agent, 64, rng)
    batch.returns = np.full(64, np.nan)
    with pytest.raises(ppokit.PPOError):
        ppo_update(agent, batch, PPOConfig(minibatch_size=64), np.random.default_rng(0))
    assert np.array_equal(agent.policy.params.values, before)


def test_zero_updates_leave_attacker_unchanged():
    env = envkit.PushDuel(SMALL.n_envs)
    att = ppokit.make_attacker(env, SMALL, 0)
    before = att.policy.params.values.copy()
    tel = train_loop(env, att, envkit.ScriptedPushVictim(), "baseline1", 0, SMALL)
    assert tel.rows == [] and np.array_equal(att.policy.params.values, before)


def run_small(seed):
    env = envkit.PushDuel(SMALL.n_envs)
    att = ppokit.make_attacker(env, SMALL, seed)
    tel = train_loop(env, att, envkit.ScriptedPushVictim(), "baseline2", 6, SMALL, seed=seed)
    return tel, att


def test_training_is_bit_identical_across_runs():
    (t1, a1), (t2, a2) = run_small(4), run_small(4)
    assert t1.rows == t2.rows and t1.reports == t2.reports
    assert np.array_equal(a1.policy.params.values, a2.policy.params.values)


def test_telemetry_windows_and_csv(tmp_path):
    env = envkit.PushDuel(SMALL.n_envs, max_steps=20)
    att = ppokit.make_attacker(env, SMALL, 0)
    tel = train_loop(env, att, envkit.ScriptedPushVictim(), "baseline1", 12, SMALL)
    assert tel.rows and all(r["episodes"] % ppokit.WINDOW_EPISODES == 0 for r in tel.rows)
    tel.to_csv(tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == ",".join(ppokit.TELEMETRY_COLUMNS)


def test_victim_learner_runs():
    env = envkit.PushDuel(SMALL.n_envs)
    agent = ActorCritic(11, env.spec.victim_space, np.random.default_rng(0))
    runner = ppokit.DuelRunner(env, None, envkit.ScriptedPushAttacker(), learner="victim", seed=0)
    tel = ppokit.run_ppo(runner, agent, 2, SMALL)
    assert len(tel.reports) == 2


def test_evaluate_win_rate_range_and_determinism():
    env = envkit.PushDuel(1)
    att = ppokit.make_attacker(env, SMALL, 0)
    a = ppokit.evaluate_win_rate("push_duel", envkit.ScriptedPushAttacker(), envkit.ScriptedPushVictim(), 60, 5)
    b = ppokit.evaluate_win_rate("push_duel", envkit.ScriptedPushAttacker(), envkit.ScriptedPushVictim(), 60, 5)
    assert a == b and 0.0 <= a <= 1.0
    assert 0.0 <= ppokit.evaluate_win_rate("push_duel", att, envkit.ScriptedPushVictim(), 20, 0) <= 1.0


@pytest.mark.slow
def test_sparse_reward_learns_against_low_gain_victim():
    # the default victim gains hold sparse win/loss training at zero wins; a sluggish victim lets it get a signal
    cfg = PPOConfig(n_envs=32, rollout_steps=64, minibatch_size=512)
    env = envkit.PushDuel(cfg.n_envs)
    attacker = ppokit.make_attacker(env, cfg, 0)
    victim = envkit.ScriptedPushVictim(kp=0.15, kd=0.15)
    before = ppokit.evaluate_win_rate("push_duel", attacker, victim, 500, 12345)
    train_loop(env, attacker, victim, "baseline1", 300, cfg, seed=0)
    after = ppokit.evaluate_win_rate("push_duel", attacker, victim, 500, 12345)
    assert after - before >= 0.2
