"""Implicit reward channels for dialog, their default mixture, post-hoc
phrase metrics and relabelling of stored batches."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import Batch, Transition, UsageError

CHANNELS = ("question", "semantic_coherence", "laughter", "sentiment_transition", "sentiment",
            "words_elicited", "conversation_length")

DEFAULT_WEIGHTS = {
    "question": 0.15682657,
    "semantic_coherence": 0.13837638,
    "laughter": 0.15313653,
    "sentiment_transition": 0.14206642,
    "sentiment": 0.14206642,
    "words_elicited": 0.14760148,
    "conversation_length": 0.1199262,
}

QUESTION_WORDS = frozenset({"how", "what", "where", "why", "when", "who"})
PUNCTUATION = frozenset({"?", "!", ".", ",", ";", ":", "-", "..."})

_TOKEN_RE = re.compile(r"[a-z0-9']+|\.\.\.|[?!.,;:-]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _tokens(x) -> list[str]:
    return tokenize(x) if isinstance(x, str) else [str(t).lower() for t in x]


def _text(x) -> str:
    return x if isinstance(x, str) else " ".join(x)


# ---------------------------------------------------------------------------
# pluggable scorers
# ---------------------------------------------------------------------------


def _data_lines(name: str) -> list[str]:
    text = resources.files("offbrl.data").joinpath(name).read_text(encoding="utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


@lru_cache(maxsize=None)
def phrase_list(category: str) -> tuple[str, ...]:
    return tuple(_data_lines(f"{category}.txt"))


class LexiconSentiment:
    """Signed token lexicon; an utterance scores clip(sum of weights, -1, 1)."""

    tag = "lexicon"

    def __init__(self, weights: Mapping[str, float] | None = None):
        if weights is None:
            weights = {}
            for ln in _data_lines("sentiment_lexicon.txt"):
                tok, w = ln.split()
                weights[tok] = float(w)
        self.weights = dict(weights)

    def __call__(self, utterance) -> float:
        s = sum(self.weights.get(t, 0.0) for t in _tokens(utterance))
        return float(min(1.0, max(-1.0, s)))


def bag_of_words(tokens: Sequence[str]) -> Counter:
    return Counter(t for t in tokens if t not in PUNCTUATION)


def bow_cosine(a, b) -> float | None:
    """Cosine between bag-of-words vectors; None when either side is empty."""
    ca, cb = bag_of_words(_tokens(a)), bag_of_words(_tokens(b))
    if not ca or not cb:
        return None
    dot = sum(v * cb.get(k, 0) for k, v in ca.items())
    na = math.sqrt(sum(v * v for v in ca.values()))
    nb = math.sqrt(sum(v * v for v in cb.values()))
    return dot / (na * nb)


# ---------------------------------------------------------------------------
# channels
# ---------------------------------------------------------------------------


def question_reward(agent_utterance) -> float:
    toks = _tokens(agent_utterance)
    r = 0.0
    if any(t in QUESTION_WORDS for t in toks):
        r += 0.5
    if "?" in toks or "?" in _text(agent_utterance):
        r += 0.5
    return r


def laughter_reward(user_response, word_boundary: bool = False) -> int:
    """Non-overlapping case-insensitive count of "ha".

    Literal by default, so "that" counts; ``word_boundary`` restricts to
    tokens made only of repeated "ha".
    """
    text = _text(user_response).lower()
    if word_boundary:
        return sum(len(t) // 2 for t in re.findall(r"\b(?:ha)+\b", text))
    return text.count("ha")


def conversation_length_reward(N: int, n: int, gamma: float = 0.5) -> float:
    """gamma^(N-n) * N for utterance n of N (n = N gives N)."""
    if not 1 <= n <= N:
        raise UsageError(f"utterance index {n} outside 1..{N}")
    return float(gamma ** (N - n) * N)


def words_elicited_reward(user_response) -> int:
    return sum(1 for t in _tokens(user_response) if t not in PUNCTUATION)


def sentiment_reward(user_response, scorer: Callable | None = None) -> float:
    scorer = scorer or default_sentiment()
    return float(scorer(user_response))


def sentiment_transition_reward(conversation: Sequence, scorer: Callable | None = None) -> float:
    """1 if the most positive utterance comes strictly after the most negative one."""
    scorer = scorer or default_sentiment()
    scores = np.array([scorer(u) for u in conversation], dtype=np.float64)
    if scores.size == 0:
        return 0.0
    pos, neg = int(np.argmax(scores)), int(np.argmax(-scores))
    if scores[pos] <= 0 or scores[neg] >= 0:
        return 0.0
    return 1.0 if pos > neg else 0.0


def semantic_similarity_reward(user_input, agent_response, embedder: Callable | None = None) -> float:
    """(cos + 1) / 2 between embeddings; 0 when either side is empty."""
    if embedder is None:
        cos = bow_cosine(user_input, agent_response)
    else:
        ea, eb = embedder(user_input), embedder(agent_response)
        na, nb = np.linalg.norm(ea), np.linalg.norm(eb)
        cos = None if na == 0 or nb == 0 else float(np.dot(ea, eb) / (na * nb))
    if cos is None:
        return 0.0
    return (cos + 1.0) / 2.0


def posthoc_metrics(utterance) -> dict[str, int]:
    text = _text(utterance).lower()
    return {cat: sum(1 for ph in phrase_list(cat) if ph in text) for cat in ("polite", "supportive", "cheerful")}


@lru_cache(maxsize=1)
def default_sentiment() -> LexiconSentiment:
    return LexiconSentiment()


# ---------------------------------------------------------------------------
# mixtures
# ---------------------------------------------------------------------------


@dataclass
class RewardSpec:
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    gamma: float = 0.5  # discount inside the conversation-length channel
    laughter_word_boundary: bool = False
    sentiment: Callable | None = None
    embedder: Callable | None = None

    def __post_init__(self):
        unknown = set(self.weights) - set(CHANNELS) - {"votes"}
        if unknown:
            raise UsageError(f"unknown reward channels {sorted(unknown)}")

    @property
    def channels(self) -> tuple[str, ...]:
        return tuple(self.weights)

    @classmethod
    def single(cls, channel: str, **kw) -> "RewardSpec":
        return cls(weights={channel: 1.0}, **kw)

    def to_config(self, prefix: str = "reward.") -> str:
        lines = [f"{prefix}{k} = {v!r}" for k, v in self.weights.items()]
        lines.append(f"{prefix}gamma = {self.gamma!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_config(cls, items: Mapping[str, object], prefix: str = "reward.") -> "RewardSpec":
        weights = {k[len(prefix):]: float(v) for k, v in items.items()
                   if k.startswith(prefix) and k[len(prefix):] in (*CHANNELS, "votes")}
        gamma = float(items.get(f"{prefix}gamma", 0.5))
        return cls(weights=weights or dict(DEFAULT_WEIGHTS), gamma=gamma)


def total_reward(channel_values: Mapping[str, float], spec: RewardSpec | None = None) -> float:
    spec = spec or RewardSpec()
    missing = [c for c in spec.weights if c not in channel_values]
    if missing:
        raise UsageError(f"missing reward channels: {missing}")
    return float(sum(w * channel_values[c] for c, w in spec.weights.items()))


def channel_values(context: Mapping, spec: RewardSpec, prior_rewards: Mapping | None = None) -> dict[str, float]:
    """All channels of ``spec`` for one transition's stored context."""
    if not context.get("final"):
        return {c: 0.0 for c in spec.weights}
    scorer = spec.sentiment or default_sentiment()
    out = {}
    for c in spec.weights:
        if c == "question":
            out[c] = question_reward(context["agent_utterance"])
        elif c == "semantic_coherence":
            out[c] = semantic_similarity_reward(context["user_input"], context["agent_utterance"], spec.embedder)
        elif c == "laughter":
            out[c] = float(laughter_reward(context["user_response"], spec.laughter_word_boundary))
        elif c == "sentiment":
            out[c] = sentiment_reward(context["user_response"], scorer)
        elif c == "sentiment_transition":
            conv = context.get("conversation")
            out[c] = sentiment_transition_reward(conv, scorer) if conv is not None else 0.0
        elif c == "words_elicited":
            out[c] = float(words_elicited_reward(context["user_response"]))
        elif c == "conversation_length":
            out[c] = conversation_length_reward(context["num_turns"], context["turn"], spec.gamma)
        elif c == "votes":
            out[c] = float((prior_rewards or {}).get("votes", context.get("votes", 0.0)))
    return out


_REQUIRED = {
    "question": ("agent_utterance",),
    "semantic_coherence": ("user_input", "agent_utterance"),
    "laughter": ("user_response",),
    "sentiment": ("user_response",),
    "sentiment_transition": (),
    "words_elicited": ("user_response",),
    "conversation_length": ("turn", "num_turns"),
    "votes": (),
}


def relabel_transition(t: Transition, spec: RewardSpec) -> Transition:
    if t.context is None:
        raise UsageError(f"transition has no dialog context; cannot compute {list(spec.weights)}")
    if t.context.get("final"):
        missing = sorted({k for c in spec.weights for k in _REQUIRED[c] if k not in t.context})
        if missing:
            raise UsageError(f"context lacks fields {missing} needed by {sorted(spec.weights)}")
    vals = channel_values(t.context, spec, t.rewards)
    vals["total"] = total_reward(vals, spec)
    return t.replace_rewards(vals)


def relabel_batch(batch: Batch, spec: RewardSpec) -> Batch:
    """New batch with every reward map recomputed under ``spec``."""
    if not batch.transitions:
        raise UsageError("empty batch")
    if all(t.context is None for t in batch.transitions):
        raise UsageError(f"batch carries no dialog context; missing channels {list(spec.weights)}")
    return batch.with_transitions(relabel_transition(t, spec) for t in batch.transitions)
