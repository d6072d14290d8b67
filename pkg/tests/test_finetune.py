import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duelattack import envkit, ppokit
from duelattack.critstate import MaskPolicy
from duelattack.finetune import (FinetuneConfig, ReplayBuffer, TransitionModel, VictimEstimator, deviations,
                                 finetune_loop, finetune_reward, total_reward, train_models)

TINY = ppokit.PPOConfig(n_envs=4, rollout_steps=32, minibatch_size=64, epochs=1)
CONT1 = envkit.ActionSpace("continuous", 1)


class MeanAttacker:
    def __init__(self, value):
        self.value = value

    def act(self, obs, rng, deterministic=False):
        return np.full((np.atleast_2d(obs).shape[0], 1), self.value)


def constant_models(p_out, pi_out):
    """1-D models whose outputs are fixed: next-obs prediction p_out (from obs 0) and action pi_out."""
    tm = TransitionModel(1, 1, 1, hidden=(4,))
    tm.net.params.values[:] = 0.0
    tm.net.params[f"b{tm.net.spec.n_layers - 1}"][...] = p_out
    ve = VictimEstimator(1, CONT1, hidden=(4,))
    ve.net.params.values[:] = 0.0
    ve.net.params[f"b{ve.net.spec.n_layers - 1}"][...] = pi_out
    return tm, ve


def test_deviation_hand_case():
    tm, ve = constant_models(0.2, 0.7)
    d_obs, d_act = deviations(tm, ve, [[0.0]], [[0.0]], [[0.0]], [[0.0]], [[0.2]], MeanAttacker(0.0))
    assert d_obs[0] == pytest.approx(0.2, abs=1e-15) and d_act[0] == pytest.approx(0.5, abs=1e-15)


def test_deviation_zero_for_perfect_models():
    tm, ve = constant_models(0.0, 0.0)  # identity dynamics, victim always acts 0
    rng = np.random.default_rng(0)
    obs = rng.normal(size=(5, 1))
    d_obs, d_act = deviations(tm, ve, obs, np.zeros((5, 1)), obs, obs, np.zeros((5, 1)), MeanAttacker(0.3))
    assert not d_obs.any() and not d_act.any()


def test_finetune_reward_examples():
    assert finetune_reward(0.2, 0.5, 0) == pytest.approx(0.3, abs=1e-15)
    assert finetune_reward(0.7, 0.1, 1) == 0.0
    assert finetune_reward(0.4, 0.4, 0) == 0.0


def test_total_reward_examples():
    assert total_reward(1.0, 0.3, 0.3) == pytest.approx(1.09, abs=1e-15)
    assert total_reward(2.5, 9.0, 0.0) == 2.5
    assert total_reward(-1.5, 0.0, 0.7) == -1.5


finite = st.floats(0, 1e6)


@given(finite, finite)
@settings(max_examples=200, deadline=None)
def test_gating(d_obs, d_act):
    assert finetune_reward(d_obs, d_act, 1) == 0.0


@given(finite, finite, st.floats(0, 10))
@settings(max_examples=200, deadline=None)
def test_sign_structure(d_obs, d_act, step):
    assert finetune_reward(d_obs + step, d_act, 0) <= finetune_reward(d_obs, d_act, 0)
    assert finetune_reward(d_obs, d_act + step, 0) >= finetune_reward(d_obs, d_act, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        FinetuneConfig(lam=-0.1)
    with pytest.raises(ValueError):
        FinetuneConfig(K=0)
    assert FinetuneConfig().lam == 0.3 and FinetuneConfig().K == 10


# -- supervised models ----------------------------------------------------------------


def synthetic_replay(rng, n, next_fn, act_fn):
    obs = rng.uniform(-1, 1, size=(n, 3))
    act_a = rng.uniform(-1, 1, size=(n, 2))
    act_v = act_fn(obs)
    rb = ReplayBuffer(n)
    rb.add(obs, act_v, act_a, next_fn(obs, act_v, act_a))
    return rb


W = np.array([[0.5, -0.3, 0.2], [0.1, 0.4, -0.6]])


def train_synthetic(next_fn, act_fn, steps):
    rng = np.random.default_rng(0)
    replay = synthetic_replay(rng, 4096, next_fn, act_fn)
    tm = TransitionModel(3, 2, 2, seed=1, hidden=(32, 32))
    ve = VictimEstimator(3, envkit.ActionSpace("continuous", 2), seed=1, hidden=(32, 32))
    lr = 3e-3
    _, _, l_p, l_pi = train_models(replay, tm, ve, steps, lr, batch=256, rng=np.random.default_rng(1))
    held = synthetic_replay(np.random.default_rng(99), 500, next_fn, act_fn)
    d = held.data
    err_p = np.abs(tm.predict(d["obs"], d["act_v"], d["act_a"]) - d["next_obs"])
    err_pi = np.abs(ve.predict(d["obs"]) - d["act_v"])
    return err_p, err_pi, l_p, l_pi


def descends_to_floor(curve, floor=1e-2, window=100, allowed=0.05):
    """Window means fall (up to ``allowed`` exceptions) until they reach ``floor``, then stay below it."""
    means = np.asarray(curve).reshape(-1, window).mean(axis=1)
    below = np.flatnonzero(means < floor)
    if below.size == 0:
        return False
    head = means[:below[0] + 1]
    rises = np.mean(np.diff(head) > 0) if head.size > 1 else 0.0
    return rises <= allowed and bool(np.all(means[below[0]:] < floor))


def test_identity_dynamics_and_linear_victim_recovered():
    err_p, err_pi, l_p, l_pi = train_synthetic(lambda o, av, aa: o.copy(), lambda o: o @ W.T, 3000)
    assert err_p.max() < 1e-2 and err_pi.max() < 1e-2
    assert descends_to_floor(l_p) and descends_to_floor(l_pi)


def test_zero_model_steps_leave_models_unchanged():
    rng = np.random.default_rng(0)
    replay = synthetic_replay(rng, 64, lambda o, av, aa: o, lambda o: o @ W.T)
    tm = TransitionModel(3, 2, 2, hidden=(8,))
    ve = VictimEstimator(3, envkit.ActionSpace("continuous", 2), hidden=(8,))
    before = tm.net.params.values.copy(), ve.net.params.values.copy()
    _, _, l_p, l_pi = train_models(replay, tm, ve, 0, 1e-3)
    assert l_p == l_pi == []
    assert np.array_equal(tm.net.params.values, before[0]) and np.array_equal(ve.net.params.values, before[1])


def test_empty_replay_is_an_error():
    with pytest.raises(ValueError):
        train_models(ReplayBuffer(4), TransitionModel(1, 1, 1), VictimEstimator(1, CONT1), 1, 1e-3)


def test_replay_ring_overwrites_oldest():
    rb = ReplayBuffer(3)
    for i in range(5):
        rb.add(np.full((1, 1), i), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    assert len(rb) == 3 and sorted(rb.data["obs"].ravel()) == [2.0, 3.0, 4.0]


# -- loop ------------------------------------------------------------------------------


class RecordRewards(ppokit.Hook):
    def __init__(self):
        self.stream = []

    def rewards(self, update, rollout, rewards):
        self.stream.append(rewards.copy())
        return rewards


def small_cfg(**kw):
    base = dict(model_steps=2, model_batch=32, model_hidden=(16,), warmup_steps=2, mask_updates=1)
    base.update(kw)
    return FinetuneConfig(**base)


def test_lambda_zero_reduces_to_plain_training():
    env_a, env_b = envkit.PushDuel(TINY.n_envs), envkit.PushDuel(TINY.n_envs)
    victim = envkit.ScriptedPushVictim()
    a = ppokit.make_attacker(env_a, TINY, 3)
    b = a.copy()
    rec = RecordRewards()
    ppokit.train_loop(env_a, a, victim, "baseline2", 5, TINY, hooks=(rec,), seed=7)
    mask = MaskPolicy(11, seed=0, hidden=(16,))
    _, tel = finetune_loop(env_b, b, victim, "baseline2", mask, None, None, small_cfg(lam=0.0, K=None), 5, seed=7,
                           config=TINY, keep_rewards=True)
    assert np.array_equal(a.policy.params.values, b.policy.params.values)
    assert len(tel.reward_stream) == len(rec.stream) == 5
    assert all(np.array_equal(x, y) for x, y in zip(tel.reward_stream, rec.stream))
    assert tel.reoptimizations == 0


@pytest.mark.parametrize("updates,K,expected", [(20, 10, 2), (7, 3, 2), (4, 5, 0)])
def test_mask_reoptimization_schedule(updates, K, expected):
    env = envkit.PushDuel(TINY.n_envs)
    att = ppokit.make_attacker(env, TINY, 0)
    mask = MaskPolicy(11, seed=0, hidden=(16,))
    _, tel = finetune_loop(env, att, envkit.ScriptedPushVictim(), "baseline1", mask, None, None,
                           small_cfg(K=K, model_steps=0), updates, seed=1, config=TINY)
    assert tel.reoptimizations == expected == updates // K
    assert [r["mask_reopt_flag"] for r in tel.rows] == [int(u % K == 0) for u in range(1, updates + 1)]


def test_finetune_telemetry_columns(tmp_path):
    env = envkit.PushDuel(TINY.n_envs)
    att = ppokit.make_attacker(env, TINY, 0)
    _, tel = finetune_loop(env, att, envkit.ScriptedPushVictim(), "baseline1", MaskPolicy(11, hidden=(16,)), None,
                           None, small_cfg(K=None), 2, config=TINY)
    tel.to_csv(tmp_path / "ft.csv")
    head = (tmp_path / "ft.csv").read_text().splitlines()[0]
    assert head == "update,win_rate,mean_R_ft,l_P,l_pi,mask_reopt_flag"
    assert all(np.isfinite(r["mean_R_ft"]) for r in tel.rows)
