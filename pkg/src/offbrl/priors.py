"""Prior policies p(a|s): MLE fits, model averaging and Q initialisation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .approximator import (FeedforwardQ, TabularQ, TargetCopy, approximator_from_dict, clip_gradient)
from .core import ActionDistribution, Batch, State, Trajectory, UsageError, log_sum_exp_rows, softmax_rows

log = logging.getLogger(__name__)

DEFAULT_SMOOTHING = 0.1


class PriorModel:
    """A conditional action distribution, either count-based or a network.

    Network priors output logits; ``probs`` applies a softmax.
    """

    def __init__(self, kind: str, parameters, smoothing: float = DEFAULT_SMOOTHING, model_id: str = "prior"):
        if kind not in ("tabular", "feedforward"):
            raise UsageError(f"unknown prior kind {kind!r}")
        if smoothing < 0:
            raise UsageError("smoothing must be >= 0")
        self.kind = kind
        self.smoothing = float(smoothing)
        self.model_id = model_id
        if kind == "tabular":
            counts = np.array(parameters, dtype=np.float64)
            if counts.ndim != 2 or (counts < 0).any():
                raise UsageError("counts must be a non-negative (S, A) matrix")
            counts.setflags(write=False)
            self.counts = counts
            self.net = None
        else:
            if not isinstance(parameters, FeedforwardQ):
                raise UsageError("feedforward prior needs a FeedforwardQ")
            self.net = parameters
            self.counts = None

    @classmethod
    def uniform(cls, state_count: int, action_count: int, model_id: str = "uniform") -> "PriorModel":
        return cls("tabular", np.zeros((state_count, action_count)), 1.0, model_id)

    @property
    def action_count(self) -> int:
        return self.counts.shape[1] if self.kind == "tabular" else self.net.action_count

    def _tabular_probs(self, ids):
        rows = self.counts[np.asarray(ids, dtype=np.int64)]
        A = rows.shape[1]
        num = rows + self.smoothing
        den = num.sum(axis=1, keepdims=True)
        unseen = den[:, 0] <= 0
        den = np.where(unseen[:, None], 1.0, den)
        p = num / den
        p[unseen] = 1.0 / A
        return p, unseen

    def probs(self, ids, features=None) -> np.ndarray:
        """(B, A) probabilities for a batch of states."""
        if self.kind == "tabular":
            return self._tabular_probs(ids)[0]
        return softmax_rows(self.net.values(features))

    def log_probs(self, ids, features=None) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs(ids, features))

    def evaluate(self, state: State) -> ActionDistribution:
        if self.kind == "tabular":
            p, unseen = self._tabular_probs([state.id])
            return ActionDistribution(p[0], fallback=bool(unseen[0]))
        return ActionDistribution(self.probs(None, np.asarray(state.features)[None, :])[0])

    def seen(self, state_id: int) -> np.ndarray:
        """Actions observed at a state (count-based priors only)."""
        if self.kind != "tabular":
            raise UsageError("only count-based priors record observed actions")
        return self.counts[state_id] > 0

    def to_dict(self) -> dict:
        if self.kind == "tabular":
            d = TabularQ(self.counts).to_dict()
        else:
            d = self.net.to_dict()
        d.update(prior_kind=self.kind, smoothing=self.smoothing, model_id=self.model_id)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PriorModel":
        approx = approximator_from_dict(d)
        params = approx.table if d["prior_kind"] == "tabular" else approx
        return cls(d["prior_kind"], params, d["smoothing"], d["model_id"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "PriorModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def sample_from(probs: np.ndarray, rng, temperature: float = 1.0, top_k: int | None = None) -> int:
    """Draw one action from ``probs`` after temperature and top-k filtering."""
    p = np.asarray(probs, dtype=np.float64)
    if temperature <= 0:
        raise UsageError("temperature must be > 0")
    if top_k is not None and top_k < 1:
        raise UsageError("top_k must be >= 1")
    if top_k is not None and top_k < p.size:
        order = np.argsort(-p, kind="stable")
        keep = np.zeros(p.size, dtype=bool)
        keep[order[:top_k]] = True
        p = np.where(keep, p, 0.0)
    if temperature != 1.0:
        with np.errstate(divide="ignore"):
            logp = np.log(p) / temperature
        p = np.exp(logp - logp.max())
    p = p / p.sum()
    return int(rng.choice(p.size, p=p))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def fit_mle(demonstrations: Sequence[Trajectory], smoothing: float = DEFAULT_SMOOTHING, *,
            state_count: int, action_count: int, model_id: str = "prior") -> PriorModel:
    """Count-based MLE: p(a|s) = (n(s,a) + smoothing) / (n(s) + smoothing * A)."""
    if not demonstrations:
        raise UsageError("no demonstrations")
    counts = np.zeros((state_count, action_count))
    for traj in demonstrations:
        for state, action, _ in traj.steps:
            if not (0 <= state.id < state_count and 0 <= action < action_count):
                raise UsageError(f"demonstrated pair ({state.id}, {action}) outside {state_count}x{action_count}")
            counts[state.id, action] += 1
    return PriorModel("tabular", counts, smoothing, model_id)


@dataclass
class NetworkFitConfig:
    hidden: tuple = (32,)
    dropout_rate: float = 0.2
    learning_rate: float = 0.5
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    min_improvement: float = 1e-4
    clip_norm: float = 5.0
    # penalty on logsumexp(logits)^2 so logits approximate log-probabilities
    self_normalize: float = 0.1
    seed: int = 0
    history: list = field(default_factory=list)


def fit_mle_network(demonstrations: Sequence[Trajectory], config: NetworkFitConfig | None = None, *,
                    action_count: int, model_id: str = "prior") -> PriorModel:
    """Cross-entropy fit of a feedforward prior on demonstrated (state, action) pairs.

    Stops at ``max_epochs`` or when the epoch loss fails to improve by
    ``min_improvement`` for ``patience`` epochs.
    """
    if not demonstrations:
        raise UsageError("no demonstrations")
    cfg = config or NetworkFitConfig()
    X = np.stack([s.features for traj in demonstrations for s, _, _ in traj.steps])
    y = np.array([a for traj in demonstrations for _, a, _ in traj.steps], dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    net = FeedforwardQ.create([X.shape[1], *cfg.hidden, action_count], dropout_rate=cfg.dropout_rate,
                              seed=cfg.seed)
    best, stale = np.inf, 0
    n = len(y)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            masks = net.sample_masks(len(idx), rng)
            z = net.values(X[idx], masks)
            p = softmax_rows(z)
            dz = p * (1.0 + 2.0 * cfg.self_normalize * log_sum_exp_rows(z))[:, None]
            dz[np.arange(len(idx)), y[idx]] -= 1.0
            g = net.grad_outputs(X[idx], dz / len(idx), masks)
            net = net.with_params(net.params - cfg.learning_rate * clip_gradient(g, cfg.clip_norm))
        z = net.values(X)
        lse = log_sum_exp_rows(z)
        loss = float(np.mean(lse - z[np.arange(n), y] + cfg.self_normalize * lse ** 2))
        cfg.history.append(loss)
        if loss < best - cfg.min_improvement:
            best, stale = loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    log.debug("prior %s fit: %d epochs, loss %.4f", model_id, len(cfg.history), cfg.history[-1])
    return PriorModel("feedforward", net, 0.0, model_id)


# ---------------------------------------------------------------------------
# model averaging
# ---------------------------------------------------------------------------


class AveragedPrior:
    """Convex combination sum_M S(M) p(a|s; M) with normalised scores."""

    kind = "averaged"

    def __init__(self, members: Sequence[tuple[PriorModel, float]]):
        if not members:
            raise UsageError("need at least one member")
        scores = np.array([s for _, s in members], dtype=np.float64)
        if (scores < 0).any() or scores.sum() <= 0:
            raise UsageError("scores must be >= 0 and not all zero")
        counts = {m.action_count for m, _ in members}
        if len(counts) != 1:
            raise UsageError(f"members disagree on action count: {sorted(counts)}")
        scores = scores / scores.sum()
        self.members = [(m, float(s)) for (m, _), s in zip(members, scores)]
        self.model_id = "averaged"

    @property
    def action_count(self) -> int:
        return self.members[0][0].action_count

    @property
    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.members])

    def probs(self, ids, features=None) -> np.ndarray:
        total = None
        for m, s in self.members:
            part = s * m.probs(ids, features)
            total = part if total is None else total + part
        return total

    def log_probs(self, ids, features=None) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs(ids, features))

    def evaluate(self, state: State) -> ActionDistribution:
        feats = None if state.features is None else np.asarray(state.features)[None, :]
        p = self.probs([state.id], feats)[0]
        return ActionDistribution(p / p.sum())

    def dominant(self) -> PriorModel:
        """Highest-scoring member; ties go to the earliest."""
        return self.members[int(np.argmax(self.scores))][0]


def average(members: Sequence[PriorModel], scores=None, batch: Batch | None = None) -> AveragedPrior:
    """Average priors; scores default to each model's share of ``batch``."""
    members = list(members)
    if scores is None:
        if batch is None or not batch.metadata:
            raise UsageError("scores or a batch with provenance metadata are required")
        scores = [batch.metadata.get(m.model_id, 0.0) for m in members]
    if len(scores) != len(members):
        raise UsageError("one score per member")
    return AveragedPrior(list(zip(members, scores)))


def init_q_from_prior(prior, polyak_rate: float = 0.005, zero_init: bool = False):
    """Q-function (and its target copy) initialised from a prior.

    Tabular priors give Q(s, a) = log p(a|s); network priors are copied
    parameter for parameter. Averaged priors initialise from their
    dominant member.
    """
    if isinstance(prior, AveragedPrior):
        prior = prior.dominant()
    if prior.kind == "tabular":
        S, A = prior.counts.shape
        if zero_init:
            q = TabularQ.zeros(S, A)
        else:
            with np.errstate(divide="ignore"):
                logp = np.log(prior.probs(np.arange(S)))
            if not np.isfinite(logp).all():
                raise UsageError("log-prior init needs strictly positive probabilities (smoothing > 0)")
            q = TabularQ(logp)
    else:
        q = prior.net.copy()
    return q, TargetCopy.of(q, polyak_rate)


def copy_network_into(prior: PriorModel, net: FeedforwardQ) -> FeedforwardQ:
    """Network Q initialised from a prior with an explicitly given architecture."""
    if prior.kind != "feedforward" or not prior.net.same_shape(net):
        raise UsageError("architecture mismatch between prior and Q-network")
    return net.with_params(prior.net.params)
