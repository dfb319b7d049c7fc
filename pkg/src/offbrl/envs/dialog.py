"""Token-level dialog environment with a scripted user.

The agent builds each utterance one token per action. Emitting ``<eos>``
(or hitting the length cap) closes the utterance; the scripted user then
replies and the conversation, windowed to the most recent utterances,
becomes the state for the agent's next first token.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from ..core import State, Trajectory, UsageError
from ..rewards import PUNCTUATION, QUESTION_WORDS, RewardSpec, relabel_transition

EOS = "<eos>"

# agent utterance styles used to produce demonstrations
STYLES = {
    "asker": (
        ("what", "do", "you", "like", "?"),
        ("how", "are", "you", "?"),
        ("why", "?"),
        ("where", "are", "you", "from", "?"),
        ("who", "is", "your", "friend", "?"),
        ("what", "is", "it", "?"),
        ("when", "?"),
    ),
    "cheerful": (
        ("that", "is", "great", "!"),
        ("i", "am", "glad", "!"),
        ("nice", "!"),
        ("thanks", "!"),
        ("i", "love", "it", "!"),
        ("so", "happy", "for", "you", "!"),
        ("please", "tell", "me", "more", "."),
    ),
    "plain": (
        ("i", "see", "."),
        ("okay", "."),
        ("i", "do", "not", "know", "."),
        ("it", "is", "okay", "."),
        ("okay", "okay", "."),
        ("i", "i", "see", "."),
        ("tell", "me", "more", "."),
    ),
}

OPENERS = (
    ("hi", "there", "."),
    ("hello", "how", "are", "you", "?"),
    ("hey", "i", "am", "bored", "."),
    ("good", "morning", "!"),
)

USER_POSITIVE = (
    ("ha", "ha", "that", "is", "great", "!"),
    ("i", "am", "glad", "too", "!"),
    ("ha", "nice", "!"),
    ("so", "fun", "ha"),
    ("i", "love", "it", "ha", "ha"),
)
USER_LONG = (
    ("well", "i", "like", "to", "read", "and", "walk", "a", "lot", "."),
    ("i", "am", "from", "a", "small", "town", "by", "the", "sea", "."),
    ("it", "is", "a", "long", "story", "so", "i", "will", "tell", "you", "."),
)
USER_NEGATIVE = (
    ("this", "is", "boring", "."),
    ("i", "hate", "this", "."),
    ("bad", "bot", "."),
)
USER_SHORT = (
    ("okay", "."),
    ("i", "see", "."),
    ("sure", "."),
)

AGENT_UPBEAT = frozenset({"great", "glad", "happy", "nice", "love", "fun", "thanks", "please"})


def _build_vocab() -> tuple[str, ...]:
    seen = [EOS]
    groups = [sorted(QUESTION_WORDS), ["?", "!", "."]]
    groups.append([tok for style in STYLES.values() for u in style for tok in u])
    groups.append([tok for bank in (OPENERS, USER_POSITIVE, USER_LONG, USER_NEGATIVE, USER_SHORT)
                   for u in bank for tok in u])
    groups.append(["bye", "sad", "good", "fine", "ha"])
    for g in groups:
        for tok in g:
            if tok not in seen:
                seen.append(tok)
    return tuple(seen)


VOCAB = _build_vocab()


def _stable_int(*parts) -> int:
    h = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little") & ((1 << 63) - 1)


@dataclass(frozen=True)
class ScriptedUser:
    """Deterministic responder: (state, utterance, seed) -> reply.

    Questions draw long replies, upbeat agent words draw laughter and
    positive words, repetition or an empty utterance draws negativity and
    sometimes ends the conversation.
    """

    seed: int = 0
    quit_prob: float = 0.5

    def respond(self, state: "DialogEnvState", agent_utterance: Sequence[str]) -> tuple[str, ...]:
        rng = np.random.default_rng([self.seed, _stable_int(state.utterances, tuple(agent_utterance), state.turn)])
        words = [t for t in agent_utterance if t not in PUNCTUATION]
        repeated = len(words) != len(set(words)) or not words
        question = any(t in QUESTION_WORDS or t == "?" for t in agent_utterance)
        upbeat = any(t in AGENT_UPBEAT for t in agent_utterance)

        def pick(bank):
            return bank[int(rng.integers(len(bank)))]

        if repeated:
            reply = pick(USER_NEGATIVE)
            if rng.random() < self.quit_prob:
                reply = reply + ("bye",)
            return reply
        reply: tuple[str, ...] = ()
        if upbeat:
            reply += pick(USER_POSITIVE)
        if question:
            reply += pick(USER_LONG)
        return reply or pick(USER_SHORT)


@dataclass(frozen=True, eq=False)
class DialogEnv:
    vocab: tuple = VOCAB
    max_turns: int = 3
    max_len: int = 30
    window: int = 5
    position_buckets: int = 8
    user: ScriptedUser = field(default_factory=ScriptedUser)
    reward_spec: RewardSpec = field(default_factory=RewardSpec)
    name: str = "dialog"

    def __post_init__(self):
        if len(self.vocab) > 200:
            raise UsageError("dialog vocabulary is capped at 200 tokens")
        if self.vocab[0] != EOS:
            raise UsageError(f"token 0 must be {EOS}")
        if self.max_len > 30 or self.window > 5:
            raise UsageError("utterances are capped at 30 tokens and the window at 5 utterances")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.vocab)})

    @property
    def action_count(self) -> int:
        return len(self.vocab)

    @property
    def eos_index(self) -> int:
        return 0

    @property
    def feature_dim(self) -> int:
        V = len(self.vocab)
        return 3 * V + 1 + self.position_buckets + self.max_turns

    def token_index(self, token) -> int:
        if isinstance(token, (int, np.integer)):
            if not 0 <= token < len(self.vocab):
                raise UsageError(f"token index {token} out of range")
            return int(token)
        try:
            return self._index[token]
        except KeyError:
            raise UsageError(f"out-of-vocabulary token {token!r}") from None

    def initial_state(self, opener: Sequence[str] = OPENERS[0]) -> "DialogEnvState":
        for t in opener:
            self.token_index(t)
        return DialogEnvState(self, (("user", tuple(opener)),), (), 0, (tuple(opener),))

    # rollout protocol

    def reset(self, rng) -> "DialogEnvState":
        return self.initial_state(OPENERS[int(rng.integers(len(OPENERS)))])

    def observe(self, state: "DialogEnvState") -> State:
        return state.observe()

    def step(self, state: "DialogEnvState", action: int, rng=None):
        res = dialog_step(state, action)
        if res.turn_done:
            context = {"final": True, "agent_utterance": list(res.agent_utterance),
                       "user_response": list(res.user_response), "user_input": list(state.last_user()),
                       "turn": state.turn + 1}
        else:
            context = {"final": False}
        return res.next_state, {}, res.episode_done, context

    def finish_episode(self, transitions):
        """Fill in episode-level context (N, conversation) and compute rewards."""
        finals = [i for i, t in enumerate(transitions) if t.context and t.context.get("final")]
        N = len(finals)
        conversation = None
        out = []
        for i, t in enumerate(transitions):
            ctx = dict(t.context) if t.context is not None else {"final": False}
            if ctx.get("final"):
                ctx["num_turns"] = N
                if i == finals[-1]:
                    conversation = [list(u) for u in self._user_turns(transitions, finals)]
                    ctx["conversation"] = conversation
            nt = type(t)(t.state, t.action, t.rewards, t.next_state, t.terminal, t.behavior_model, ctx)
            out.append(relabel_transition(nt, self.reward_spec))
        return out

    @staticmethod
    def _user_turns(transitions, finals):
        first = transitions[finals[0]].context
        turns = [first.get("user_input", [])]
        turns += [transitions[i].context["user_response"] for i in finals]
        return turns

    def featurize(self, state: "DialogEnvState") -> np.ndarray:
        V = len(self.vocab)
        f = np.zeros(self.feature_dim)
        for t in state.partial:
            f[self._index[t]] = 1.0
        last = self._index[state.partial[-1]] if state.partial else V
        f[V + last] = 1.0
        base = 2 * V + 1
        f[base + min(len(state.partial), self.position_buckets - 1)] = 1.0
        base += self.position_buckets
        for t in state.last_user():
            f[base + self._index[t]] = 1.0
        f[base + V + min(state.turn, self.max_turns - 1)] = 1.0
        return f


@dataclass(frozen=True, eq=False)
class DialogEnvState:
    env: DialogEnv
    utterances: tuple  # ((speaker, tokens), ...), at most env.window entries
    partial: tuple  # agent tokens emitted so far in the current utterance
    turn: int  # agent utterances completed
    user_history: tuple = ()  # every user utterance so far (bookkeeping only)
    ended: bool = False

    def last_user(self) -> tuple:
        for speaker, toks in reversed(self.utterances):
            if speaker == "user":
                return toks
        return ()

    @property
    def id(self) -> int:
        return _stable_int(self.utterances, self.partial, self.turn)

    def observe(self) -> State:
        return State(self.id, self.env.featurize(self))

    def extend(self, token: str) -> "DialogEnvState":
        return replace(self, partial=self.partial + (token,))

    def after_exchange(self, agent_utterance: Sequence[str], user_response: Sequence[str],
                       ended: bool = False) -> "DialogEnvState":
        utts = self.utterances + (("agent", tuple(agent_utterance)), ("user", tuple(user_response)))
        return DialogEnvState(self.env, utts[-self.env.window:], (), self.turn + 1,
                              self.user_history + (tuple(user_response),), ended)

    def transcript(self) -> list[str]:
        return [f"{who}: {' '.join(toks)}" for who, toks in self.utterances]


class StepResult(NamedTuple):
    next_state: DialogEnvState
    token_done: bool  # a content token was appended to the utterance
    turn_done: bool
    episode_done: bool
    agent_utterance: tuple
    user_response: tuple


def dialog_step(state: DialogEnvState, agent_token) -> StepResult:
    env = state.env
    if state.ended or state.turn >= env.max_turns:
        raise UsageError("conversation is over")
    idx = env.token_index(agent_token)
    token = env.vocab[idx]
    if token == EOS:
        utterance, appended = state.partial, False
    else:
        utterance, appended = state.partial + (token,), True
        if len(utterance) < env.max_len:
            return StepResult(state.extend(token), True, False, False, (), ())
    reply = env.user.respond(state, utterance)
    done = state.turn + 1 >= env.max_turns or "bye" in reply
    nxt = state.after_exchange(utterance, reply, ended=done)
    return StepResult(nxt, appended, True, done, utterance, reply)


# ---------------------------------------------------------------------------
# demonstrations
# ---------------------------------------------------------------------------


def demonstrations(env: DialogEnv, style: str | Sequence[str], episodes: int, seed: int = 0) -> list[Trajectory]:
    """Token-level trajectories from template speakers talking to the scripted user."""
    styles = [style] if isinstance(style, str) else list(style)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(episodes):
        st = env.reset(rng)
        steps = []
        while not st.ended:
            sty = styles[int(rng.integers(len(styles)))]
            bank = STYLES[sty]
            utt = bank[int(rng.integers(len(bank)))]
            for tok in (*utt, EOS):
                steps.append((st.observe(), env.token_index(tok), {}))
                res = dialog_step(st, tok)
                st = res.next_state
                if res.turn_done:
                    break
        out.append(Trajectory(tuple(steps)))
    return out
