"""Episode rollouts and batch generation for any environment exposing
``reset/observe/step/finish_episode`` and ``action_count``."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..core import Batch, State, Transition, UsageError
from ..priors import sample_from


def run_episode(env, choose: Callable[[State, np.random.Generator], int], rng,
                behavior_model: str | None = None, horizon: int | None = None) -> list[Transition]:
    """Roll one episode; ``choose(state, rng)`` returns an action index."""
    horizon = horizon if horizon is not None else getattr(env, "horizon", 10_000)
    st = env.reset(rng)
    obs = env.observe(st)
    out = []
    for _ in range(horizon):
        a = choose(obs, rng)
        nxt, rewards, done, context = env.step(st, a, rng)
        nobs = env.observe(nxt)
        out.append(Transition(obs, a, rewards, nobs, bool(done), behavior_model, context))
        if done:
            break
        st, obs = nxt, nobs
    return env.finish_episode(out)


def prior_policy(prior, temperature: float = 1.0, top_k: int | None = None):
    def choose(state: State, rng) -> int:
        feats = None if state.features is None else np.asarray(state.features)[None, :]
        p = prior.probs(np.array([state.id]), feats)[0]
        return sample_from(p, rng, temperature, top_k)
    return choose


def _allocate(fractions: Sequence[float], episodes: int) -> list[int]:
    """Largest-remainder split of ``episodes``; ties go to the earlier policy."""
    raw = np.asarray(fractions, dtype=np.float64) * episodes
    counts = np.floor(raw).astype(int)
    rem = episodes - counts.sum()
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    return counts.tolist()


def generate_batch(env, behavior_policies: Sequence[tuple], episodes: int, seed: int = 0) -> Batch:
    """Roll out each behaviour prior for its share of ``episodes``.

    Each entry is ``(prior, temperature, fraction)`` or
    ``(prior, temperature, fraction, top_k)``; ``top_k`` restricts support to
    produce partial-coverage batches. Metadata records realised episode
    shares per model id.
    """
    if episodes <= 0:
        raise UsageError("episodes must be positive")
    if not behavior_policies:
        raise UsageError("need at least one behaviour policy")
    fractions = [bp[2] for bp in behavior_policies]
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise UsageError(f"fractions must be non-negative and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    transitions: list[Transition] = []
    shares: dict[str, float] = {}
    for bp, n in zip(behavior_policies, _allocate(fractions, episodes)):
        prior, temperature = bp[0], bp[1]
        top_k = bp[3] if len(bp) > 3 else None
        choose = prior_policy(prior, temperature, top_k)
        mid = getattr(prior, "model_id", "behavior")
        for _ in range(n):
            transitions.extend(run_episode(env, choose, rng, mid))
        shares[mid] = shares.get(mid, 0.0) + n / episodes
    return Batch(tuple(transitions), env.action_count, shares)


def coverage(batch: Batch, mdp) -> float:
    """Fraction of reachable non-terminal (s, a) pairs present in the batch."""
    pairs = mdp.reachable_pairs()
    seen = {(t.state.id, t.action) for t in batch}
    return len(pairs & seen) / len(pairs) if pairs else 1.0
