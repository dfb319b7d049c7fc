"""Domain types for discrete batch RL and the distribution helpers every
algorithm shares (softmax, log-sum-exp, KL)."""

from __future__ import annotations

import json
import math
from pathlib import Path
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np


class UsageError(ValueError):
    """Raised when an operation is called outside its contract."""


class TrainingError(RuntimeError):
    """Raised when an optimizer step cannot be applied (non-finite values)."""


def _frozen(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class State:
    """A state reference: opaque integer id plus an optional feature vector."""

    id: int
    features: np.ndarray | None = None

    def __post_init__(self):
        if self.features is not None:
            object.__setattr__(self, "features", _frozen(self.features))

    def __eq__(self, other):
        if not isinstance(other, State) or self.id != other.id:
            return False
        if self.features is None or other.features is None:
            return self.features is None and other.features is None
        return np.array_equal(self.features, other.features)

    def __hash__(self):
        return hash(self.id)


@dataclass(frozen=True, eq=False)
class ActionDistribution:
    """p(a|s) or pi(a|s) evaluated at one state.

    ``fallback`` is set when the distribution is a uniform stand-in for a
    state the model has no information about.
    """

    probs: np.ndarray
    fallback: bool = False

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 1 or p.size == 0:
            raise UsageError("probs must be a non-empty vector")
        if not np.isfinite(p).all() or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise UsageError(f"not a distribution: {p}")
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.probs.size

    def __getitem__(self, a):
        return float(self.probs[a])


@dataclass(frozen=True, eq=False)
class Transition:
    state: State
    action: int
    rewards: Mapping[str, float]
    next_state: State
    terminal: bool
    behavior_model: str | None = None
    # dialog transitions carry the text needed to recompute reward channels
    context: Mapping[str, Any] | None = None

    def __post_init__(self):
        object.__setattr__(self, "rewards", dict(self.rewards))
        if self.action < 0:
            raise UsageError(f"negative action index {self.action}")

    def to_record(self) -> dict:
        rec = {
            "state_id": int(self.state.id),
            "state_features": None if self.state.features is None else [float(x) for x in self.state.features],
            "action": int(self.action),
            "rewards": {k: float(v) for k, v in self.rewards.items()},
            "next_state_id": int(self.next_state.id),
            "next_state_features": (None if self.next_state.features is None
                                    else [float(x) for x in self.next_state.features]),
            "terminal": bool(self.terminal),
            "behavior_model": self.behavior_model,
        }
        if self.context is not None:
            rec["context"] = self.context
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "Transition":
        return cls(
            state=State(rec["state_id"], rec.get("state_features")),
            action=rec["action"],
            rewards=rec["rewards"],
            next_state=State(rec["next_state_id"], rec.get("next_state_features")),
            terminal=rec["terminal"],
            behavior_model=rec.get("behavior_model"),
            context=rec.get("context"),
        )

    def replace_rewards(self, rewards: Mapping[str, float]) -> "Transition":
        return Transition(self.state, self.action, rewards, self.next_state, self.terminal,
                          self.behavior_model, self.context)


@dataclass(frozen=True)
class Arrays:
    """Column view of a set of transitions, as consumed by the training loop."""

    state_ids: np.ndarray
    states: np.ndarray | None
    actions: np.ndarray
    rewards: np.ndarray
    next_ids: np.ndarray
    next_states: np.ndarray | None
    terminals: np.ndarray

    def __len__(self):
        return self.actions.size

    def take(self, idx) -> "Arrays":
        sel = lambda a: None if a is None else a[idx]
        return Arrays(self.state_ids[idx], sel(self.states), self.actions[idx], self.rewards[idx],
                      self.next_ids[idx], sel(self.next_states), self.terminals[idx])


def scalar_reward(rewards: Mapping[str, float], key: str | None = None) -> float:
    """Pick the training reward out of a multi-channel reward map.

    With no key: a single-channel map yields its only value, otherwise the
    ``total`` channel is used.
    """
    if key is not None:
        return float(rewards[key])
    if len(rewards) == 1:
        return float(next(iter(rewards.values())))
    if "total" not in rewards:
        raise UsageError(f"ambiguous reward map {sorted(rewards)}; pass a reward key")
    return float(rewards["total"])


def to_arrays(transitions: Sequence[Transition], reward_key: str | None = None) -> Arrays:
    if not transitions:
        raise UsageError("empty transition list")
    has_feat = transitions[0].state.features is not None
    return Arrays(
        state_ids=np.array([t.state.id for t in transitions], dtype=np.int64),
        states=np.stack([t.state.features for t in transitions]) if has_feat else None,
        actions=np.array([t.action for t in transitions], dtype=np.int64),
        rewards=np.array([scalar_reward(t.rewards, reward_key) for t in transitions]),
        next_ids=np.array([t.next_state.id for t in transitions], dtype=np.int64),
        next_states=np.stack([t.next_state.features for t in transitions]) if has_feat else None,
        terminals=np.array([t.terminal for t in transitions], dtype=bool),
    )


@dataclass(frozen=True, eq=False)
class Batch:
    transitions: tuple[Transition, ...]
    action_count: int
    metadata: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))
        object.__setattr__(self, "metadata", dict(self.metadata))
        for t in self.transitions:
            if not 0 <= t.action < self.action_count:
                raise UsageError(f"action {t.action} outside 0..{self.action_count - 1}")
        if self.metadata and abs(sum(self.metadata.values()) - 1.0) > 1e-9:
            raise UsageError(f"metadata fractions sum to {sum(self.metadata.values())}, not 1")

    def __len__(self):
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)

    def arrays(self, reward_key: str | None = None) -> Arrays:
        cache = self.__dict__.setdefault("_arrays", {})
        if reward_key not in cache:
            cache[reward_key] = to_arrays(self.transitions, reward_key)
        return cache[reward_key]

    def reward_channels(self) -> set[str]:
        chans: set[str] = set()
        for t in self.transitions:
            chans.update(t.rewards)
        return chans

    def with_transitions(self, transitions: Iterable[Transition]) -> "Batch":
        return Batch(tuple(transitions), self.action_count, self.metadata)

    # persistence: a header line, then one flat JSON record per transition

    def dumps(self) -> str:
        header = {"format": "offbrl-batch", "version": 1, "action_count": self.action_count,
                  "metadata": {k: float(v) for k, v in self.metadata.items()}}
        lines = [json.dumps(header)]
        lines.extend(json.dumps(t.to_record()) for t in self.transitions)
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Batch":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise UsageError("empty batch file")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise UsageError(f"line 1: malformed batch header ({exc.msg})") from None
        if not isinstance(header, dict) or header.get("format") != "offbrl-batch":
            raise UsageError("missing batch header line")
        if header.get("version") != 1:
            raise UsageError(f"unsupported batch version {header.get('version')}")
        transitions = []
        for i, ln in enumerate(lines[1:], 2):
            try:
                transitions.append(Transition.from_record(json.loads(ln)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise UsageError(f"line {i}: malformed transition record ({exc})") from None
        return cls(tuple(transitions), header["action_count"], header.get("metadata", {}))

    @classmethod
    def load(cls, path) -> "Batch":
        if not Path(path).is_file():
            raise UsageError(f"batch file {path} not found")
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


@dataclass(frozen=True)
class Trajectory:
    steps: tuple  # of (State, action, rewards)
    episode_return: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        steps = tuple((s, int(a), dict(r)) for s, a, r in self.steps)
        object.__setattr__(self, "steps", steps)
        totals: dict[str, float] = {}
        for _, _, r in steps:
            for k, v in r.items():
                totals[k] = totals.get(k, 0.0) + float(v)
        if self.episode_return:
            for k, v in totals.items():
                if abs(self.episode_return.get(k, 0.0) - v) > 1e-9:
                    raise UsageError(f"episode_return[{k}] disagrees with summed steps")
        object.__setattr__(self, "episode_return", totals)


# ---------------------------------------------------------------------------
# distribution helpers
# ---------------------------------------------------------------------------


def log_sum_exp(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise UsageError("log_sum_exp of an empty vector")
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def log_sum_exp_rows(values: np.ndarray) -> np.ndarray:
    m = values.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(values - m).sum(axis=-1, keepdims=True)))[..., 0]


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits) -> ActionDistribution:
    v = np.asarray(logits, dtype=np.float64)
    if v.size == 0:
        raise UsageError("softmax of an empty vector")
    return ActionDistribution(softmax_rows(v[None, :])[0])


def kl_divergence(q, p) -> float:
    """KL(q || p); ``math.inf`` when q puts mass where p has none."""
    q = np.asarray(getattr(q, "probs", q), dtype=np.float64)
    p = np.asarray(getattr(p, "probs", p), dtype=np.float64)
    if q.shape != p.shape:
        raise UsageError(f"length mismatch {q.shape} vs {p.shape}")
    support = q > 0
    if (p[support] <= 0).any():
        return math.inf
    return max(float(np.sum(q[support] * (np.log(q[support]) - np.log(p[support])))), 0.0)


def kl_rows(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Row-wise KL(q || p) for stacked distributions; inf on support violations."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * (np.log(q) - np.log(p)), 0.0)
    out = terms.sum(axis=-1)
    return np.maximum(out, 0.0)
