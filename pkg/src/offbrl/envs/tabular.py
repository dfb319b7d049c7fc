"""Small tabular MDPs with exact oracles (value iteration, soft value
iteration, policy evaluation) and batch generation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .. import _kernels
from ..core import State, UsageError


@dataclass(frozen=True, eq=False)
class TabularMDP:
    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A) mean reward
    terminals: tuple = ()
    gamma: float = 0.5
    start_states: tuple = (0,)
    horizon: int = 50
    reward_noise: float = 0.0
    name: str = "mdp"
    state_names: tuple = field(default=())

    def __post_init__(self):
        P = np.array(self.P, dtype=np.float64)
        R = np.array(self.R, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2]:
            raise UsageError(f"inconsistent shapes P{P.shape} R{R.shape}")
        if (P < 0).any() or np.abs(P.sum(axis=2) - 1.0).max() > 1e-9:
            raise UsageError("every P[s][a] must be a distribution")
        for s in self.terminals:
            if not (np.allclose(P[s, :, s], 1.0) and np.all(R[s] == 0)):
                raise UsageError(f"terminal state {s} must self-absorb with zero reward")
        if not 0.0 <= self.gamma <= 1.0:
            raise UsageError("gamma must be in [0, 1]")
        P.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "terminals", tuple(int(s) for s in self.terminals))
        object.__setattr__(self, "start_states", tuple(int(s) for s in self.start_states))

    @property
    def state_count(self) -> int:
        return self.P.shape[0]

    @property
    def action_count(self) -> int:
        return self.P.shape[1]

    @property
    def nonterminal(self) -> np.ndarray:
        m = np.ones(self.state_count)
        m[list(self.terminals)] = 0.0
        return m

    def with_(self, **kw) -> "TabularMDP":
        from dataclasses import replace
        return replace(self, **kw)

    # rollout protocol shared with the dialog environment

    def observe(self, s: int) -> State:
        f = np.zeros(self.state_count)
        f[s] = 1.0
        return State(int(s), f)

    def reset(self, rng) -> int:
        return int(self.start_states[rng.integers(len(self.start_states))])

    def step(self, s: int, a: int, rng):
        if not 0 <= a < self.action_count:
            raise UsageError(f"action {a} out of range")
        nxt = int(rng.choice(self.state_count, p=self.P[s, a]))
        r = float(self.R[s, a])
        if self.reward_noise > 0:
            r += float(rng.normal(0.0, self.reward_noise))
        return nxt, {"reward": r}, nxt in self.terminals, None

    def finish_episode(self, transitions):
        return transitions

    def reachable_pairs(self) -> set:
        """Non-terminal (s, a) pairs reachable from the start states."""
        seen = set(self.start_states)
        todo = deque(self.start_states)
        while todo:
            s = todo.popleft()
            if s in self.terminals:
                continue
            for t in np.nonzero(self.P[s].sum(axis=0) > 0)[0]:
                if int(t) not in seen:
                    seen.add(int(t))
                    todo.append(int(t))
        return {(s, a) for s in seen if s not in self.terminals for a in range(self.action_count)}


def chain(gamma: float = 0.5) -> TabularMDP:
    """s0 --a1, r=1--> terminal; s0 --a0, r=0--> s0."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0
    P[0, 1, 1] = 1.0
    P[1, :, 1] = 1.0
    R = np.array([[0.0, 1.0], [0.0, 0.0]])
    return TabularMDP(P, R, terminals=(1,), gamma=gamma, start_states=(0,), horizon=20, name="chain",
                      state_names=("s0", "T"))


def gridworld(size: int = 4, gamma: float = 0.9, goal: int | None = None, pit: int | None = 5,
              goal_reward: float = 1.0, pit_reward: float = -1.0, step_reward: float = 0.0) -> TabularMDP:
    """Deterministic grid; actions up, down, left, right; bumping a wall stays put."""
    S = size * size
    goal = S - 1 if goal is None else goal
    P = np.zeros((S, 4, S))
    R = np.full((S, 4), step_reward)
    moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    terminals = tuple(sorted(x for x in (goal, pit) if x is not None))
    for s in range(S):
        if s in terminals:
            P[s, :, s] = 1.0
            R[s] = 0.0
            continue
        r, c = divmod(s, size)
        for a, (dr, dc) in enumerate(moves):
            nr, nc = min(max(r + dr, 0), size - 1), min(max(c + dc, 0), size - 1)
            t = nr * size + nc
            P[s, a, t] = 1.0
            if t == goal:
                R[s, a] += goal_reward
            elif t == pit:
                R[s, a] += pit_reward
    starts = tuple(s for s in range(S) if s not in terminals)
    return TabularMDP(P, R, terminals=terminals, gamma=gamma, start_states=starts, horizon=30,
                      name=f"gridworld{size}x{size}")


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def _check_discount(mdp: TabularMDP):
    if mdp.gamma >= 1.0 and not mdp.terminals:
        raise UsageError("gamma = 1 needs an episodic MDP (no terminal states given)")


def value_iteration(mdp: TabularMDP, tolerance: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Optimal Q*; terminal rows are zero."""
    _check_discount(mdp)
    Q, it, res = _kernels.value_iteration(mdp.P, mdp.R, mdp.gamma, mdp.nonterminal, tolerance, max_iter)
    if res > tolerance:
        raise UsageError(f"value iteration did not converge (residual {res:.3g} after {it} sweeps)")
    return Q


def _prior_matrix(mdp: TabularMDP, prior) -> np.ndarray:
    if hasattr(prior, "probs"):
        return np.asarray(prior.probs(np.arange(mdp.state_count)), dtype=np.float64)
    return np.broadcast_to(np.asarray(prior, dtype=np.float64), mdp.R.shape).copy()


def soft_value_iteration(mdp: TabularMDP, prior, c: float = 2.0, tolerance: float = 1e-10,
                         max_iter: int = 100_000) -> np.ndarray:
    """Fixed point of Psi(s,a) = R/c + log p(a|s) + gamma E_s' logsumexp Psi(s', .)."""
    _check_discount(mdp)
    p = _prior_matrix(mdp, prior)
    live = mdp.nonterminal > 0
    if (p[live] <= 0).any():
        raise UsageError("soft value iteration needs a strictly positive prior")
    with np.errstate(divide="ignore"):
        base = np.where(live[:, None], mdp.R / c + np.log(p), 0.0)
    Psi, it, res = _kernels.soft_value_iteration(mdp.P, base, mdp.gamma, mdp.nonterminal, tolerance, max_iter)
    if res > tolerance:
        raise UsageError(f"soft value iteration did not converge (residual {res:.3g})")
    return Psi


def bellman_residual(mdp: TabularMDP, Q: np.ndarray) -> float:
    V = Q.max(axis=1) * mdp.nonterminal
    return float(np.abs((mdp.R + mdp.gamma * mdp.P @ V) * mdp.nonterminal[:, None] - Q).max())


def soft_bellman_residual(mdp: TabularMDP, Psi: np.ndarray, prior, c: float) -> float:
    p = _prior_matrix(mdp, prior)
    live = mdp.nonterminal
    m = Psi.max(axis=1)
    V = (m + np.log(np.exp(Psi - m[:, None]).sum(axis=1))) * live
    with np.errstate(divide="ignore"):
        base = np.where(live[:, None] > 0, mdp.R / c + np.log(p), 0.0)
    return float(np.abs((base + mdp.gamma * mdp.P @ V) * live[:, None] - Psi).max())


def policy_evaluation(mdp: TabularMDP, policy: np.ndarray, reward: np.ndarray | None = None,
                      state_bonus: np.ndarray | None = None) -> np.ndarray:
    """Exact Q^pi by a linear solve.

    Q(s,a) = reward(s,a) + gamma E_s' V(s'), V(s) = sum_a pi(a|s) Q(s,a) + bonus(s).
    """
    S, A = mdp.R.shape
    reward = mdp.R if reward is None else np.asarray(reward, dtype=np.float64)
    bonus = np.zeros(S) if state_bonus is None else np.asarray(state_bonus, dtype=np.float64)
    live = mdp.nonterminal
    pi = np.asarray(policy, dtype=np.float64)
    reward = np.where(live[:, None] > 0, reward, 0.0)
    r_pi = (pi * reward).sum(axis=1) + bonus
    P_pi = np.einsum("sa,sat->st", pi, mdp.P) * live[None, :]
    V = np.linalg.solve(np.eye(S) - mdp.gamma * P_pi * live[:, None], r_pi * live)
    return (reward + mdp.gamma * mdp.P @ (V * live)) * live[:, None]


def greedy_policy(values: np.ndarray) -> np.ndarray:
    pi = np.zeros_like(values)
    pi[np.arange(len(values)), np.argmax(values, axis=1)] = 1.0
    return pi
