"""Adversarial-policy workbench for two-player duels.

Modules: ``envkit`` (environments and exact tabular DP), ``nnkit`` (MLPs and
Adam), ``ppokit`` (PPO), ``rewardlab`` (reward programs and search),
``critstate`` (critical-state mask under a perturbation budget),
``finetune`` (deviation-reward fine-tuning) and ``bench`` (CLI).
"""

__version__ = "0.1.0"
