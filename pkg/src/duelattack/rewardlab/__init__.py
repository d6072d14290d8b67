"""Reward programs: the expression language, presets, search backends and the iteration loop."""

from .backends import (FixedGenerator, GenerationError, PromptState, RemoteConfig, RemoteEvaluator, RemoteGenerator,
                       ScriptedEvaluator, ScriptedGenerator, evaluate_candidates, generate_candidates, select_best)
from .dsl import DslError, RewardContext, RewardProgram, eval_program, parse_program
from .iterate import CandidateReport, IterationLog, auc_win_rate, iterate_rewards, resolve_program
from .presets import PRESETS

__all__ = [
    "CandidateReport", "DslError", "FixedGenerator", "GenerationError", "IterationLog", "PRESETS", "PromptState",
    "RemoteConfig", "RemoteEvaluator", "RemoteGenerator", "RewardContext", "RewardProgram", "ScriptedEvaluator",
    "ScriptedGenerator", "auc_win_rate", "eval_program", "evaluate_candidates", "generate_candidates",
    "iterate_rewards", "parse_program", "resolve_program", "select_best",
]
