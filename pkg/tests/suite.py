"""Experiment definitions shared by the acceptance tests and the
determinism check. ``python3 tests/suite.py OUT_DIR`` reruns criteria 2-9
at their acceptance budgets and writes the CSVs to OUT_DIR (``--quick`` for
small budgets)."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from offbrl.algos import AlgoConfig, act, new_train_state, sweep
from offbrl.approximator import FeedforwardQ, TabularQ, mc_lower_bound, stochastic_passes
from offbrl.core import State, Trajectory
from offbrl.envs import chain, generate_batch, load_env_spec, run_episode, soft_value_iteration, value_iteration
from offbrl.envs.rollout import prior_policy
from offbrl.harness import ExperimentConfig, build_data, emit_reports, run_experiment, train_cell
from offbrl.priors import PriorModel, fit_mle, init_q_from_prior
from offbrl.rewards import RewardSpec

# desk-scale optimiser settings (see README, "Desk-scale settings")
DIALOG_LR = 0.01
TABULAR_LR = 0.05
TABULAR_POLYAK = 0.05


def oracle_mdps():
    return [chain(0.5), load_env_spec("gridworld4x4")]


def covered_batch(mdp, episodes=200, seed=0):
    uni = PriorModel.uniform(mdp.state_count, mdp.action_count)
    return generate_batch(mdp, [(uni, 1.0, 1.0)], episodes, seed)


def fitted_batch_q(mdp, batch, gamma):
    cfg = AlgoConfig("batch_q", gamma=gamma, tabular_assign=True, polyak_rate=1.0)
    uni = PriorModel.uniform(mdp.state_count, mdp.action_count)
    q, tg = init_q_from_prior(uni, 1.0)
    return sweep(new_train_state(q, tg, uni, cfg), batch.arrays(), cfg, 1000, tol=1e-13).q.table


def batch_prior(mdp, batch, smoothing=0.5):
    demos = [Trajectory(((t.state, t.action, t.rewards),)) for t in batch]
    return fit_mle(demos, smoothing, state_count=mdp.state_count, action_count=mdp.action_count)


def fitted_kl_psi(mdp, batch, prior, gamma, c):
    cfg = AlgoConfig("kl_psi", gamma=gamma, reward_scale=c, tabular_assign=True, polyak_rate=1.0)
    q, tg = init_q_from_prior(prior, 1.0)
    return sweep(new_train_state(q, tg, prior, cfg), batch.arrays(), cfg, 5000, tol=1e-13).q.table


def mc_draws(n, seed=0):
    """Yields (lower bound, per-pass values, dropout rate, net, state) for random nets and states."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        rate = 0.0 if i % 10 == 0 else float(rng.uniform(0.05, 0.6))
        sizes = [int(rng.integers(1, 6)), *[int(h) for h in rng.integers(1, 8, size=rng.integers(0, 3))],
                 int(rng.integers(1, 5))]
        net = FeedforwardQ.create(sizes, activation=("relu", "tanh")[i % 2], dropout_rate=rate, seed=i)
        x = rng.normal(size=sizes[0])
        m = int(rng.integers(1, 8))
        draw_seed = int(rng.integers(2**31))
        lb = mc_lower_bound(net, x, m, np.random.default_rng(draw_seed))
        passes = stochastic_passes(net, x[None, :], m, np.random.default_rng(draw_seed))[:, 0, :]
        yield lb, passes, rate, net, x


def dbcq_selections(n=10_000, seed=0):
    """(state id, chosen action, demo count of that pair) for ``n`` dbcq choices."""
    mdp = load_env_spec("gridworld4x4")
    rng = np.random.default_rng(seed)
    # behaviour restricted to two actions per state, chosen per state
    counts = np.zeros((mdp.state_count, mdp.action_count))
    for s in range(mdp.state_count):
        counts[s, rng.choice(mdp.action_count, size=2, replace=False)] = 1.0
    behavior = PriorModel("tabular", counts, 0.0, "behavior")
    choose = prior_policy(behavior)
    demos = [Trajectory(tuple((t.state, t.action, t.rewards) for t in run_episode(mdp, choose, rng)))
             for _ in range(50)]
    prior = fit_mle(demos, 0.0, state_count=mdp.state_count, action_count=mdp.action_count)
    demo_counts = prior.counts
    # adversarial values: undemonstrated actions look best
    table = rng.normal(size=counts.shape) + 10.0 * (demo_counts == 0)
    q = TabularQ(table)
    seen = np.nonzero(demo_counts.sum(axis=1) > 0)[0]
    cfg = AlgoConfig("dbcq", dbcq_candidates=3)
    out = []
    for _ in range(n):
        s = int(rng.choice(seen))
        a = act("dbcq", q, prior, State(s, np.eye(mdp.state_count)[s]), "greedy", cfg, rng)
        out.append((s, a, float(demo_counts[s, a])))
    return out


def kl_config(seeds, steps=1000, **kw):
    base = dict(env="dialog", variants=["batch_q", "kl_q", "kl_psi"], seeds=list(seeds), training_steps=steps,
                learning_rate=DIALOG_LR, coverage_top_k=5, batch_episodes=200, demo_episodes=100,
                prior_epochs=60, eval_episodes=20)
    base.update(kw)
    return ExperimentConfig(**base)


def bias_config(seeds, steps=3000, **kw):
    base = dict(env="gridworld4x4", variants=["batch_q", "batch_q_mc", "kl_q", "kl_psi"], seeds=list(seeds),
                training_steps=steps, gamma=0.9, learning_rate=TABULAR_LR, polyak_rate=TABULAR_POLYAK,
                reward_noise=0.5, uncovered=[[0, 1]], batch_episodes=100, demo_episodes=100, eval_episodes=20)
    base.update(kw)
    return ExperimentConfig(**base)


def relabel_config(**kw):
    base = dict(env="dialog", variants=["kl_psi"], seeds=[0], training_steps=1000, learning_rate=DIALOG_LR,
                batch_episodes=200, demo_episodes=100, prior_epochs=60, eval_episodes=100)
    base.update(kw)
    return ExperimentConfig(**base)


def relabel_pair(cfg: ExperimentConfig, seed: int):
    """kl_psi trained on the same batch relabelled question-only and sentiment-only."""
    data = build_data(cfg, seed)
    q = train_cell(cfg, "kl_psi", seed, data.relabeled(RewardSpec.single("question", gamma=cfg.gamma)))
    s = train_cell(cfg, "kl_psi", seed, data.relabeled(RewardSpec.single("sentiment", gamma=cfg.gamma)))
    return q, s


# three agent turns of a scripted conversation; user replies fixed by hand
TRANSCRIPT = [
    {"final": True, "turn": 1, "num_turns": 3, "user_input": "hi there .",
     "agent_utterance": "what do you like ?", "user_response": "well i like to read and walk a lot ."},
    {"final": True, "turn": 2, "num_turns": 3, "user_input": "well i like to read and walk a lot .",
     "agent_utterance": "that is great !", "user_response": "ha ha that is great !"},
    {"final": True, "turn": 3, "num_turns": 3, "user_input": "ha ha that is great !",
     "agent_utterance": "what is great ?", "user_response": "i hate this .",
     "conversation": ["hi there .", "well i like to read and walk a lot .", "ha ha that is great !",
                      "i hate this ."]},
]


def transcript_channels(spec=None):
    from offbrl.rewards import channel_values, total_reward
    spec = spec or RewardSpec()
    out = []
    for ctx in TRANSCRIPT:
        vals = channel_values(ctx, spec)
        vals["total"] = total_reward(vals, spec)
        out.append(vals)
    return out


def _write(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])


def determinism_run(out: Path, full: bool = True) -> None:
    """Writes the CSVs of criteria 2-9. ``full`` uses the acceptance budgets;
    otherwise every experiment runs at a small budget for a quick check."""
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for mdp in oracle_mdps():
        b = covered_batch(mdp, 200 if full else 100)
        for gamma in (0.5, 0.9):
            m = mdp.with_(gamma=gamma)
            rows += [(m.name, "batch_q", gamma, 0.0, s, a, float(v))
                     for (s, a), v in np.ndenumerate(fitted_batch_q(m, b, gamma))]
            prior = batch_prior(m, b)
            for c in (1.0, 2.0):
                rows += [(m.name, "kl_psi", gamma, c, s, a, float(v))
                         for (s, a), v in np.ndenumerate(fitted_kl_psi(m, b, prior, gamma, c))]
    _write(out / "oracle_q.csv", ["mdp", "variant", "gamma", "c", "state", "action", "value"], rows)
    _write(out / "mc_bound.csv", ["draw", "action", "lower", "mean"],
           [(i, a, float(lb[a]), float(passes[:, a].mean()))
            for i, (lb, passes, *_) in enumerate(mc_draws(1000 if full else 50)) for a in range(len(lb))])
    _write(out / "rewards.csv", ["turn", "channel", "value"],
           [(i + 1, k, float(v)) for i, vals in enumerate(transcript_channels()) for k, v in sorted(vals.items())])
    _write(out / "dbcq.csv", ["state", "action", "demo_count"], dbcq_selections(10_000 if full else 500))
    if full:
        seeds = range(10)
        runs = (("kl", kl_config(seeds)), ("bias", bias_config(seeds)))
        relabel = relabel_config()
    else:
        seeds = [0]
        runs = (("kl", kl_config(seeds, steps=60, demo_episodes=20, prior_epochs=5, batch_episodes=30,
                                 eval_episodes=3)),
                ("bias", bias_config(seeds, steps=150, eval_episodes=3)))
        relabel = relabel_config(training_steps=60, demo_episodes=20, prior_epochs=5, batch_episodes=30,
                                 eval_episodes=3)
    for name, cfg in runs:
        emit_reports(run_experiment(cfg), out / name)
    rows = []
    for seed in seeds:
        q, s = relabel_pair(relabel, seed)
        rows += [(seed, t, ch, v) for t, cell in (("question", q), ("sentiment", s))
                 for ch, v in sorted(cell.returns_sample.items())]
    _write(out / "relabel.csv", ["seed", "trained_on", "channel", "return"], rows)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description="write the CSVs of criteria 2-9")
    ap.add_argument("out", type=Path)
    ap.add_argument("--quick", action="store_true", help="small budgets instead of the acceptance ones")
    a = ap.parse_args()
    determinism_run(a.out, full=not a.quick)
