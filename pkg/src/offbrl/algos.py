"""Target construction, policy extraction and training updates for the
batch RL variants: batch_q, batch_q_mc, dbcq, kl_q and kl_psi."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .approximator import TabularQ, TargetCopy, clip_and_step, polyak_update, smooth_l1
from .core import (Arrays, State, TrainingError, Transition, UsageError, kl_rows, log_sum_exp_rows,
                   softmax_rows, to_arrays)

log = logging.getLogger(__name__)

VARIANTS = ("batch_q", "batch_q_mc", "dbcq", "kl_q", "kl_psi")
KL_VARIANTS = ("kl_q", "kl_psi")


class EnvironmentContractError(RuntimeError):
    """The environment did not provide what the target needs."""


@dataclass(frozen=True)
class AlgoConfig:
    variant: str = "batch_q"
    gamma: float = 0.5
    reward_scale: float = 2.0
    mc_passes: int = 5
    dbcq_candidates: int = 10
    dbcq_mode: str = "sample"  # or "topk": deterministic top-n by prior mass
    use_model_averaged_prior: bool = False
    seed: int = 0
    learning_rate: float = 1e-4
    clip_norm: float = 1.0
    clip_mode: str = "global"
    polyak_rate: float = 0.005
    batch_size: int = 32
    huber_delta: float = 1.0
    # tabular only: overwrite Q(s, a) with the mean minibatch target
    tabular_assign: bool = False
    scale_baseline_rewards: bool = False
    # kl_q bootstraps from the dropout lower bound (False: deterministic pass)
    kl_q_mc: bool = True
    reward_key: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise UsageError("gamma must be in [0, 1]")
        if self.reward_scale <= 0:
            raise UsageError("reward_scale must be > 0")
        if self.mc_passes < 1:
            raise UsageError("mc_passes must be >= 1")
        if self.dbcq_candidates < 1:
            raise UsageError("dbcq_candidates must be >= 1")
        if self.dbcq_mode not in ("sample", "topk"):
            raise UsageError(f"unknown dbcq_mode {self.dbcq_mode!r}")

    def replace(self, **kw) -> "AlgoConfig":
        return replace(self, **kw)


@dataclass
class TrainState:
    q: object
    target: TargetCopy
    prior: object
    rng: np.random.Generator
    step_count: int = 0
    metrics: deque = field(default_factory=deque)


def new_train_state(q, target, prior, config: AlgoConfig, metrics_capacity: int | None = None) -> TrainState:
    return TrainState(q, target, prior, np.random.default_rng(config.seed), 0, deque(maxlen=metrics_capacity))


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


def _net_input(net, ids, feats):
    return net.inputs(ids, feats)


def _uses_mc(config: AlgoConfig) -> bool:
    if config.variant == "batch_q":
        return False
    if config.variant == "kl_q":
        return config.kl_q_mc
    return True


def lower_bound_values(net, X, num_passes: int, rng) -> np.ndarray:
    """(B, A) per-action minimum over dropout passes; one mask per pass and sample."""
    if isinstance(net, TabularQ) or net.dropout_rate == 0.0:
        return net.values(X)
    out = None
    for _ in range(num_passes):
        v = net.values(X, net.sample_masks(len(X), rng))
        out = v if out is None else np.minimum(out, v)
    return out


def dbcq_candidates(prior_probs: np.ndarray, n: int, rng, mode: str = "sample") -> np.ndarray:
    """Sorted unique candidate actions drawn from one prior row."""
    p = np.asarray(prior_probs, dtype=np.float64)
    if not (p > 0).any():
        raise UsageError("prior has no positive mass to draw candidates from")
    if mode == "topk":
        order = np.argsort(-p, kind="stable")
        cand = order[:n][p[order[:n]] > 0]
        return np.sort(cand)
    p = p / p.sum()
    return np.unique(rng.choice(p.size, size=n, p=p))


def _bootstrap(values: np.ndarray, variant: str, next_prior: np.ndarray | None, config: AlgoConfig, rng):
    if variant == "kl_psi":
        return log_sum_exp_rows(values)
    if variant == "dbcq":
        out = np.empty(len(values))
        for i in range(len(values)):
            cand = dbcq_candidates(next_prior[i], config.dbcq_candidates, rng, config.dbcq_mode)
            out[i] = values[i, cand].max()
        return out
    return values.max(axis=1)


def compute_targets(arrays: Arrays, q, target: TargetCopy, prior, config: AlgoConfig, rng,
                    online_values: np.ndarray | None = None, prior_probs: np.ndarray | None = None):
    """Targets for every transition plus a validity mask.

    Transitions whose taken action has zero prior mass get an infinite
    penalty under the KL variants; they are reported and masked out.
    """
    variant = config.variant
    r = arrays.rewards.astype(np.float64)
    if variant in KL_VARIANTS or config.scale_baseline_rewards:
        r = r / config.reward_scale
    valid = np.ones(len(arrays), dtype=bool)
    idx = np.arange(len(arrays))

    if variant in KL_VARIANTS:
        if prior_probs is None:
            prior_probs = prior.probs(arrays.state_ids, arrays.states)
        p_taken = prior_probs[idx, arrays.actions]
        valid = p_taken > 0
        if not valid.all():
            log.warning("%d transition(s) with zero prior mass at the taken action skipped",
                        int((~valid).sum()))
        with np.errstate(divide="ignore"):
            r = r + np.log(p_taken)
        if variant == "kl_q":
            if online_values is None:
                online_values = q.values(_net_input(q, arrays.state_ids, arrays.states))
            pi = softmax_rows(online_values)
            r = r - np.log(pi[idx, arrays.actions])

    live = ~arrays.terminals
    boot = np.zeros(len(arrays))
    if live.any():
        sub = arrays.take(live)
        X = _net_input(target.net, sub.next_ids, sub.next_states)
        if _uses_mc(config):
            vals = lower_bound_values(target.net, X, config.mc_passes, rng)
        else:
            vals = target.net.values(X)
        next_prior = prior.probs(sub.next_ids, sub.next_states) if variant == "dbcq" else None
        boot[live] = _bootstrap(vals, variant, next_prior, config, rng)
    targets = np.where(valid, r + config.gamma * boot, np.inf)
    return targets, valid


def _single(transition: Transition) -> Arrays:
    return to_arrays([transition])


def target_batch_q(transition: Transition, target_net, gamma: float) -> float:
    cfg = AlgoConfig("batch_q", gamma=gamma)
    t, _ = compute_targets(_single(transition), None, TargetCopy(target_net, 1.0), None, cfg, None)
    return float(t[0])


def target_batch_q_mc(transition: Transition, target_net, gamma: float, num_passes: int = 5, rng=None) -> float:
    cfg = AlgoConfig("batch_q_mc", gamma=gamma, mc_passes=num_passes)
    rng = rng if rng is not None else np.random.default_rng()
    t, _ = compute_targets(_single(transition), None, TargetCopy(target_net, 1.0), None, cfg, rng)
    return float(t[0])


def target_dbcq(transition: Transition, target_net, prior, gamma: float, num_passes: int = 5,
                candidates: int = 10, mode: str = "sample", rng=None) -> float:
    cfg = AlgoConfig("dbcq", gamma=gamma, mc_passes=num_passes, dbcq_candidates=candidates, dbcq_mode=mode)
    rng = rng if rng is not None else np.random.default_rng()
    t, _ = compute_targets(_single(transition), None, TargetCopy(target_net, 1.0), prior, cfg, rng)
    return float(t[0])


def target_kl_q(transition: Transition, target_net, prior, pi_current, gamma: float, c: float,
                num_passes: int = 5, rng=None, use_mc: bool = True) -> float:
    """r/c + log p(a|s) - log pi(a|s) + gamma * max_a' lower-bound Q_T(s', a')."""
    cfg = AlgoConfig("kl_q", gamma=gamma, reward_scale=c, mc_passes=num_passes, kl_q_mc=use_mc)
    rng = rng if rng is not None else np.random.default_rng()
    pi = np.asarray(getattr(pi_current, "probs", pi_current), dtype=np.float64)
    with np.errstate(divide="ignore"):
        logits = np.log(pi)[None, :]
    t, _ = compute_targets(_single(transition), None, TargetCopy(target_net, 1.0), prior, cfg, rng,
                           online_values=logits)
    return float(t[0])


def target_kl_psi(transition: Transition, target_psi_net, prior, gamma: float, c: float,
                  num_passes: int = 5, rng=None) -> float:
    """r/c + log p(a|s) + gamma * logsumexp_a' lower-bound Psi_T(s', a')."""
    cfg = AlgoConfig("kl_psi", gamma=gamma, reward_scale=c, mc_passes=num_passes)
    rng = rng if rng is not None else np.random.default_rng()
    t, _ = compute_targets(_single(transition), None, TargetCopy(target_psi_net, 1.0), prior, cfg, rng)
    return float(t[0])


def utterance_boundary_target(conversation_state, agent_utterance: Sequence[str], user_response,
                              target_net, variant: str, config: AlgoConfig, *, reward: float,
                              prior=None, q=None, final_turn: bool = False, rng=None) -> float:
    """Target for the last token of an agent utterance.

    ``conversation_state`` is the dialog state in which the final token was
    chosen. The next state appends the agent utterance and the user's
    response, and the bootstrap reads the first-token values there.
    """
    cfg = config.replace(variant=variant)
    state = conversation_state.observe()
    final_token = conversation_state.env.token_index(agent_utterance[-1]) if agent_utterance else \
        conversation_state.env.eos_index
    if final_turn:
        next_state = state
    else:
        if user_response is None:
            raise EnvironmentContractError("user response missing on a non-terminal turn")
        next_state = conversation_state.after_exchange(agent_utterance, user_response).observe()
    tr = Transition(state, final_token, {"reward": reward}, next_state, final_turn)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    t, _ = compute_targets(_single(tr), q, TargetCopy(target_net, 1.0), prior, cfg, rng)
    return float(t[0])


# ---------------------------------------------------------------------------
# acting
# ---------------------------------------------------------------------------


def policy_probs(values: np.ndarray) -> np.ndarray:
    """Sampling policy for every variant: softmax over the value rows."""
    return softmax_rows(np.atleast_2d(values))


def act(variant: str, net, prior, state: State, mode: str = "greedy", config: AlgoConfig | None = None,
        rng=None) -> int:
    """Choose an action at ``state``; argmax ties go to the lowest index."""
    config = config or AlgoConfig(variant)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    feats = None if state.features is None else np.asarray(state.features)[None, :]
    values = net.values(net.inputs(np.array([state.id]), feats))[0]
    if variant == "dbcq":
        p = prior.probs(np.array([state.id]), feats)[0]
        cand = dbcq_candidates(p, config.dbcq_candidates, rng, config.dbcq_mode)
        return int(cand[np.argmax(values[cand])])
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}")
    if mode == "greedy":
        return int(np.argmax(values))
    if mode == "sample":
        pi = policy_probs(values)[0]
        return int(rng.choice(pi.size, p=pi))
    raise UsageError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _assign_step(q: TabularQ, arrays: Arrays, targets: np.ndarray, valid: np.ndarray) -> TabularQ:
    table = q.table.copy()
    S, A = table.shape
    flat = arrays.state_ids[valid] * A + arrays.actions[valid]
    sums = np.bincount(flat, weights=targets[valid], minlength=S * A)
    cnt = np.bincount(flat, minlength=S * A)
    hit = cnt > 0
    table.ravel()[hit] = sums[hit] / cnt[hit]
    return TabularQ(table)


def train_step(state: TrainState, minibatch, config: AlgoConfig) -> TrainState:
    """One optimizer step on ``minibatch`` (Arrays or a list of Transitions).

    Targets are computed from the target copy and treated as constants.
    A non-finite loss or gradient aborts the step and keeps the parameters.
    """
    arrays = minibatch if isinstance(minibatch, Arrays) else to_arrays(list(minibatch), config.reward_key)
    if len(arrays) == 0:
        raise UsageError("empty minibatch")
    q, target, prior, rng = state.q, state.target, state.prior, state.rng
    X = q.inputs(arrays.state_ids, arrays.states)
    online = q.values(X)
    prior_probs = prior.probs(arrays.state_ids, arrays.states) if prior is not None else None
    targets, valid = compute_targets(arrays, q, target, prior, config, rng, online, prior_probs)
    n_valid = int(valid.sum())
    pi = policy_probs(online)
    mean_kl = float(kl_rows(pi, prior_probs).mean()) if prior_probs is not None else float("nan")
    record = {"step": state.step_count + 1, "loss": float("nan"), "mean_kl": mean_kl,
              "mean_target": float(targets[valid].mean()) if n_valid else float("nan"), "aborted": False}

    if n_valid == 0:
        record["aborted"] = True
        state.metrics.append(record)
        return replace(state, step_count=state.step_count + 1)

    idx = np.arange(len(arrays))
    masks = q.sample_masks(len(arrays), rng)
    pred = (online if masks is None else q.values(X, masks))[idx, arrays.actions]
    safe_targets = np.where(valid, targets, pred)
    loss_vec, dpred = smooth_l1(pred, safe_targets, config.huber_delta)
    loss = float(loss_vec[valid].mean())
    record["loss"] = loss
    try:
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss}")
        if isinstance(q, TabularQ) and config.tabular_assign:
            new_q = _assign_step(q, arrays, targets, valid)
        else:
            g = q.grad(X, arrays.actions, np.where(valid, dpred, 0.0) / n_valid, masks)
            new_q = clip_and_step(q, g, config.learning_rate, config.clip_norm, config.clip_mode)
    except TrainingError as exc:
        log.error("step %d aborted: %s", state.step_count + 1, exc)
        record["aborted"] = True
        state.metrics.append(record)
        return replace(state, step_count=state.step_count + 1)

    new_target = polyak_update(target, new_q.params, config.polyak_rate)
    state.metrics.append(record)
    return replace(state, q=new_q, target=new_target, step_count=state.step_count + 1)


def sample_minibatch(arrays: Arrays, batch_size: int, rng) -> Arrays:
    return arrays.take(rng.integers(0, len(arrays), size=batch_size))


def train(state: TrainState, arrays: Arrays, config: AlgoConfig, steps: int, callback=None) -> TrainState:
    for _ in range(steps):
        state = train_step(state, sample_minibatch(arrays, config.batch_size, state.rng), config)
        if callback is not None:
            callback(state)
    return state


def sweep(state: TrainState, arrays: Arrays, config: AlgoConfig, sweeps: int, tol: float | None = None):
    """Full-batch steps (fitted Q iteration when combined with tabular_assign and polyak 1)."""
    for _ in range(sweeps):
        before = state.q.params
        state = train_step(state, arrays, config)
        if tol is not None and np.abs(state.q.params - before).max() <= tol:
            break
    return state
