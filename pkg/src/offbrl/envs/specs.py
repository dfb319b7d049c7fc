"""Environment specification files (JSON).

Tabular specs carry dense kernels; dialog specs carry the vocabulary and
conversation limits. Golden specs ship under ``offbrl/data/envs``.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from ..core import UsageError
from .dialog import DialogEnv, ScriptedUser
from .tabular import TabularMDP

GOLDEN = ("chain", "gridworld4x4", "dialog")


def env_to_dict(env) -> dict:
    if isinstance(env, TabularMDP):
        return {
            "kind": "tabular", "name": env.name, "states": env.state_count, "actions": env.action_count,
            "kernel": env.P.tolist(), "reward": env.R.tolist(), "terminals": list(env.terminals),
            "gamma": env.gamma, "start_states": list(env.start_states), "horizon": env.horizon,
            "reward_noise": env.reward_noise,
        }
    if isinstance(env, DialogEnv):
        return {
            "kind": "dialog", "name": env.name, "vocabulary": list(env.vocab), "max_turns": env.max_turns,
            "max_len": env.max_len, "window": env.window, "position_buckets": env.position_buckets,
            "user_seed": env.user.seed, "quit_prob": env.user.quit_prob,
        }
    raise UsageError(f"cannot serialise {type(env).__name__}")


def env_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "tabular":
        P = np.array(d["kernel"], dtype=np.float64)
        if P.shape != (d["states"], d["actions"], d["states"]):
            raise UsageError(f"kernel shape {P.shape} disagrees with declared sizes")
        return TabularMDP(P, np.array(d["reward"], dtype=np.float64), tuple(d.get("terminals", ())),
                          d.get("gamma", 0.5), tuple(d.get("start_states", (0,))), d.get("horizon", 50),
                          d.get("reward_noise", 0.0), d.get("name", "mdp"))
    if kind == "dialog":
        return DialogEnv(tuple(d["vocabulary"]), d.get("max_turns", 3), d.get("max_len", 30), d.get("window", 5),
                         d.get("position_buckets", 8), ScriptedUser(d.get("user_seed", 0), d.get("quit_prob", 0.5)),
                         name=d.get("name", "dialog"))
    raise UsageError(f"unknown environment kind {kind!r}")


def save_env_spec(env, path) -> None:
    Path(path).write_text(json.dumps(env_to_dict(env), indent=1) + "\n", encoding="utf-8")


def load_env_spec(path_or_name):
    """Load a spec file, or a golden spec by name (``chain``, ``gridworld4x4``, ``dialog``)."""
    if str(path_or_name) in GOLDEN:
        text = resources.files("offbrl.data").joinpath("envs", f"{path_or_name}.json").read_text(encoding="utf-8")
    else:
        p = Path(path_or_name)
        if not p.exists():
            raise UsageError(f"environment spec {p} not found")
        text = p.read_text(encoding="utf-8")
    return env_from_dict(json.loads(text))
