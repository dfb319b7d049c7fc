from .dialog import EOS, VOCAB, DialogEnv, DialogEnvState, ScriptedUser, StepResult, demonstrations, dialog_step
from .rollout import coverage, generate_batch, prior_policy, run_episode
from .specs import load_env_spec, save_env_spec
from .tabular import (TabularMDP, bellman_residual, chain, greedy_policy, gridworld, policy_evaluation,
                      soft_bellman_residual, soft_value_iteration, value_iteration)

__all__ = [
    "EOS", "VOCAB", "DialogEnv", "DialogEnvState", "ScriptedUser", "StepResult", "demonstrations",
    "dialog_step", "coverage", "generate_batch", "prior_policy", "run_episode", "load_env_spec",
    "save_env_spec", "TabularMDP", "bellman_residual", "chain", "greedy_policy", "gridworld",
    "policy_evaluation", "soft_bellman_residual", "soft_value_iteration", "value_iteration",
]
