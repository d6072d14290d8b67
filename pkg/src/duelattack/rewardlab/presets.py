"""Built-in reward programs.

``s1``/``s2`` are the attacker's observations before and after its move and
``s_o`` the victim's observation after it. PushDuel layout (self first):
0:2 position, 2:4 velocity, 4:6 opponent position, 6:8 opponent velocity,
8 own edge distance, 9 opponent edge distance, 10 time remaining.
GatePass layout: 0 own x, 1 own v, 2 opponent x, 3 opponent v, 4 time remaining.
"""

ZERO = "0"

# sparse terminal reward only
BASELINE1 = "win - loss"

# environment reward difference plus the terminal signal
BASELINE2 = "reward_adv - reward_opp + win - loss"

SUMO = """\
combat_weight = 0.3 + 0.7*rate
stand_weight = 1 - combat_weight
_stand1 = s1[8] - 0.5*tanh(norm2(s1[2:4])/2)
_stand2 = s2[8] - 0.5*tanh(norm2(s2[2:4])/2)
_combat1 = -0.6*norm2(s1[4:6] - s1[0:2]) + 0.2*tanh((s1[8] - s1[9])/0.5) + 0.2*clip(1 - s1[9], 0, 1)
_combat2 = -0.6*norm2(s2[4:6] - s2[0:2]) + 0.2*tanh((s2[8] - s2[9])/0.5) + 0.2*clip(1 - s2[9], 0, 1)
dense_reward = 0.99*(stand_weight*_stand2 + combat_weight*_combat2) - (stand_weight*_stand1 + combat_weight*_combat1)
sparse_reward = 0.5*reward_adv - 0.1*reward_opp
terminal_bonus = 8*win - 4*loss
energy_penalty = -0.005*sum(a2*a2)
step_penalty = -0.001
dense_reward + sparse_reward + terminal_bonus + energy_penalty + step_penalty
"""

YSNP = """\
stand_weight = clip(0.7*(1 - rate), 0.3, 0.8)
block_weight = 1 - stand_weight
_stand1 = 0.8*clip(s1[0] + 0.5, 0, 1) - 0.3*tanh(abs(s1[1]))
_stand2 = 0.8*clip(s2[0] + 0.5, 0, 1) - 0.3*tanh(abs(s2[1]))
_block1 = 0.5*tanh((s1[0] - s_o[0])*2) - 0.2*tanh(s_o[0])
_block2 = 0.5*tanh((s2[0] - s_o[0])*2) - 0.2*tanh(s_o[0])
dense_reward = 12*(0.995*(stand_weight*_stand2 + block_weight*_block2) - (stand_weight*_stand1 + block_weight*_block1))
sparse_reward = 0.3*reward_adv - 0.1*reward_opp
terminal_reward = 15*win - 6*loss
energy_penalty = -0.0008*sum(a2*a2)
dense_reward + sparse_reward + terminal_reward + energy_penalty
"""

KAD = """\
terminal = 2*win - 2*loss
_gap1 = max(0, s1[9] - s1[8])
_gap2 = max(0, s2[9] - s2[8])
r_dist = 0.02*tanh(_gap2/0.2)
r_delta = 0.03*tanh((_gap2 - _gap1)/0.04)
r_align = 0.015*exp(-norm2(s2[4:6] - s2[0:2])**2/0.5)
r_threat = 0.1*(0.3 - s2[9])/0.3 if s2[9] < 0.3 else 0
r_energy = -0.001*sum(a2*a2)
r_advdiff = 0.4*(reward_adv - reward_opp)
terminal + r_dist + r_delta + r_align + r_threat + r_energy + r_advdiff
"""

PRESETS = {
    "zero": ZERO,
    "baseline1": BASELINE1,
    "baseline2": BASELINE2,
    "sumo": SUMO,
    "ysnp": YSNP,
    "kad": KAD,
}
