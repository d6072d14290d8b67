import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duelattack import envkit, ppokit
from duelattack.critstate import (ConstraintConfig, DualState, MaskPolicy, count_perturbed, dual_update,
                                  mask_shaped_reward, penalties, penalty_g, train_mask, verify_theorem1)
from duelattack.envkit import EpisodeTrace, TraceStep

CFG = ConstraintConfig()


def trace_with_bits(bits):
    z = np.zeros(1)
    return EpisodeTrace([TraceStep(z, z, z, z, 0.0, 0.0, b) for b in bits], "none", 0)


def test_penalty_hand_values():
    assert penalty_g(0.0, 5.0, 0.0) == 0.0
    assert abs(penalty_g(5.0, 5.0, 2.0) - 20.0) < 1e-12
    assert abs(penalty_g(5.0, 5.0, -10.0) + 2.5) < 1e-12


@given(st.floats(0, 50), st.floats(0.1, 20))
@settings(max_examples=200, deadline=None)
def test_penalty_continuous_at_kink(nu, d):
    kink = -nu / d
    assert abs(penalty_g(nu, d, kink + 1e-9) - penalty_g(nu, d, kink - 1e-9)) < 1e-6


def test_penalty_rejects_non_positive_d():
    with pytest.raises(ValueError):
        penalty_g(1.0, 0.0, 1.0)


@given(st.floats(20, 40))
@settings(max_examples=50, deadline=None)
def test_feasible_region_identity(n_bar):
    zero = DualState()
    assert penalties(zero, n_bar, CFG) == (0.0, 0.0)
    assert dual_update(zero, n_bar, CFG) == zero


def test_dual_update_hand_values():
    assert dual_update(DualState(5.0, 0.0), CFG.C1 + 2, CFG).nu1 == 15.0
    assert dual_update(DualState(0.0, 1.0), CFG.C2 + 3, CFG).nu2 == 0.0


@given(st.lists(st.floats(0, 200), min_size=1, max_size=30), st.floats(0, 10), st.floats(0, 10))
@settings(max_examples=200, deadline=None)
def test_duals_stay_non_negative(seq, nu1, nu2):
    dual = DualState(nu1, nu2)
    for n in seq:
        dual = dual_update(dual, n, CFG)
        assert dual.nu1 >= 0 and dual.nu2 >= 0


def test_dual_state_rejects_negative():
    with pytest.raises(ValueError):
        DualState(-1.0, 0.0)


def test_constraint_config_validation():
    with pytest.raises(ValueError):
        ConstraintConfig(C1=10, C2=20)
    with pytest.raises(ValueError):
        ConstraintConfig(d1=0.0)


def test_count_perturbed():
    assert count_perturbed(trace_with_bits([1, 0, 0, 1, 0])) == 3
    assert count_perturbed(trace_with_bits([1] * 7)) == 0
    assert count_perturbed(trace_with_bits([0] * 9)) == 9
    with pytest.raises(ValueError):
        count_perturbed(trace_with_bits([None, None]))


def test_count_perturbed_on_real_rollout():
    tr = envkit.rollout_episode(envkit.PushDuel(max_steps=30), envkit.ScriptedPushAttacker(),
                                envkit.ScriptedPushVictim(), envkit.ConstantMask(0), 3)
    assert count_perturbed(tr) == tr.length


def test_shaped_reward_feasible_is_negated_victim_reward():
    rv = np.array([0.5, -1.0, 2.0])
    out = mask_shaped_reward(rv, np.array([0, 1, 0]), DualState(), CFG, 30.0)
    assert np.array_equal(out, -rv)


def test_shaped_reward_over_budget():
    out = mask_shaped_reward(np.zeros(2), np.array([0, 1]), DualState(5.0, 0.0), CFG, CFG.C1 + 2)
    assert np.array_equal(out, [-15.0, 0.0])


def test_shaped_reward_under_budget():
    out = mask_shaped_reward(np.zeros(2), np.array([0, 1]), DualState(0.0, 0.0), CFG, CFG.C2 - 4)
    assert np.array_equal(out, [20.0, 0.0])


def test_mask_policy_starts_mostly_keeping():
    mask = MaskPolicy(11, seed=0)
    p = mask.replace_prob(np.random.default_rng(0).normal(size=(50, 11)))
    assert np.all((p > 0.01) & (p < 0.5))


def test_train_mask_zero_updates_returns_inputs():
    env = envkit.PushDuel(8)
    mask = MaskPolicy(11, seed=0)
    before = mask.agent.policy.params.values.copy()
    dual0 = DualState(1.0, 2.0)
    m, dual, tel = train_mask(env, envkit.ScriptedPushVictim(), envkit.ScriptedPushAttacker(), CFG, dual0,
                              ppokit.PPOConfig(n_envs=8, rollout_steps=32, minibatch_size=64), 0, mask=mask)
    assert m is mask and dual == dual0 and tel.rows == []
    assert np.array_equal(mask.agent.policy.params.values, before)


def test_train_mask_telemetry_duals_non_negative():
    config = ppokit.PPOConfig(n_envs=8, rollout_steps=64, minibatch_size=128, epochs=1)
    env = envkit.PushDuel(8)
    _, dual, tel = train_mask(env, envkit.ScriptedPushVictim(), envkit.ScriptedPushAttacker(), CFG, DualState(),
                              config, 4)
    assert len(tel.rows) == 4 and [r["update"] for r in tel.rows] == [1, 2, 3, 4]
    assert all(r["nu1"] >= 0 and r["nu2"] >= 0 for r in tel.rows)
    assert (tel.rows[-1]["nu1"], tel.rows[-1]["nu2"]) == (dual.nu1, dual.nu2)


# -- exact bound check ------------------------------------------------------------


def oracle_eta(mdp, keep, pv, pa, sweeps=5000):
    """Victim return of the masked policy by plain value iteration over explicit loops."""
    S = mdp.n_states
    nv = mdp.n_actions_victim
    V = np.zeros(S)
    for _ in range(sweeps):
        new = np.zeros(S)
        for s in range(S):
            for v in range(nv):
                pv_eff = keep[s] * pv[s, v] + (1 - keep[s]) / nv
                for a in range(mdp.n_actions_attacker):
                    w = pv_eff * pa[s, a]
                    new[s] += w * (mdp.reward[s, v, a] + mdp.discount * mdp.transition[s, v, a] @ V)
        if np.max(np.abs(new - V)) < 1e-13:
            V = new
            break
        V = new
    return V[mdp.start_state]


def uniform_tables(mdp):
    return (np.full((mdp.n_states, mdp.n_actions_victim), 1 / mdp.n_actions_victim),
            np.full((mdp.n_states, mdp.n_actions_attacker), 1 / mdp.n_actions_attacker))


def test_identity_policy_gives_equal_values():
    mdp = envkit.chain_duel_mdp(4)
    keep = np.array([0.9, 0.5, 0.3, 0.7])
    rep = verify_theorem1(mdp, keep, keep)
    assert rep.max_kl == 0.0 and rep.holds
    for x in (rep.eta_new, rep.L_value, rep.M_value):
        assert abs(x - rep.eta_old) < 1e-12


def test_zero_reward_gives_zero_everything():
    mdp = envkit.chain_duel_mdp(4)
    mdp.reward[...] = 0.0
    rep = verify_theorem1(mdp, np.full(4, 0.8), np.full(4, 0.2))
    assert rep.eta_old == rep.eta_new == rep.L_value == rep.M_value == 0.0


def test_infinite_kl_is_flagged():
    mdp = envkit.chain_duel_mdp(3)
    rep = verify_theorem1(mdp, np.full(3, 0.5), np.array([1.0, 0.5, 0.5]))
    assert rep.infinite_kl and rep.holds and rep.max_kl == float("inf")


def test_rejects_non_distribution_tables():
    mdp = envkit.chain_duel_mdp(3)
    with pytest.raises(ValueError):
        verify_theorem1(mdp, np.full((3, 2), 0.7), np.full(3, 0.5))


@pytest.mark.parametrize("seed", range(5))
def test_eta_matches_value_iteration_oracle(seed):
    rng = np.random.default_rng(seed)
    mdp = envkit.random_tabular_mdp(rng)
    pv = rng.dirichlet(np.ones(mdp.n_actions_victim), size=mdp.n_states)
    pa = rng.dirichlet(np.ones(mdp.n_actions_attacker), size=mdp.n_states)
    old, new = rng.uniform(0.05, 0.95, mdp.n_states), rng.uniform(0.05, 0.95, mdp.n_states)
    rep = verify_theorem1(mdp, old, new, pv, pa)
    assert abs(rep.eta_old - oracle_eta(mdp, old, pv, pa)) < 1e-9
    assert abs(rep.eta_new - oracle_eta(mdp, new, pv, pa)) < 1e-9


def test_surrogate_first_order_accuracy():
    # L agrees with eta to first order: the gap shrinks quadratically with the step size
    rng = np.random.default_rng(11)
    mdp = envkit.random_tabular_mdp(rng, n_states=5)
    pv = rng.dirichlet(np.ones(mdp.n_actions_victim), size=5)
    old = rng.uniform(0.2, 0.8, 5)
    direction = rng.normal(size=5)
    gaps = []
    for eps in (1e-2, 1e-3):
        rep = verify_theorem1(mdp, old, old + eps * direction, pv)
        gaps.append(abs(rep.eta_new - rep.L_value))
    assert 0 < gaps[1] < gaps[0] / 50


def test_chain_duel_random_pairs_hold():
    mdp = envkit.chain_duel_mdp(4)
    rng = np.random.default_rng(0)
    pv = np.tile([0.9, 0.1], (4, 1))
    for _ in range(100):
        old = rng.uniform(0.01, 0.99, 4)
        new = np.clip(old + rng.normal(0, 0.2, 4), 0.01, 0.99)
        rep = verify_theorem1(mdp, old, new, pv)
        assert rep.holds and rep.eta_new != rep.eta_old
