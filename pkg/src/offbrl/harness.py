"""Experiment orchestration: data, training across (variant, seed) cells,
evaluation by fresh rollouts, overestimation bias and CSV reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .algos import AlgoConfig, act, new_train_state, policy_probs, sample_minibatch, train_step
from .approximator import FeedforwardQ, TabularQ, TargetCopy
from .core import Batch, UsageError, kl_rows, log_sum_exp_rows, softmax_rows
from .envs.dialog import DialogEnv, demonstrations
from .envs.rollout import generate_batch, run_episode
from .envs.specs import load_env_spec
from .envs.tabular import TabularMDP, greedy_policy, policy_evaluation
from .priors import (AveragedPrior, NetworkFitConfig, PriorModel, average, fit_mle, fit_mle_network,
                     init_q_from_prior)
from .rewards import RewardSpec, relabel_batch

log = logging.getLogger(__name__)

OUTPUT_ENV_VAR = "OFFBRL_OUTPUT_DIR"


@dataclass
class ExperimentConfig:
    env: str = "chain"
    variants: list = field(default_factory=lambda: ["batch_q", "kl_psi"])
    seeds: list = field(default_factory=lambda: [0])
    training_steps: int = 1000
    # AlgoConfig overrides
    gamma: float = 0.5
    reward_scale: float = 2.0
    mc_passes: int = 5
    dbcq_candidates: int = 10
    learning_rate: float = 1e-4
    polyak_rate: float = 0.005
    batch_size: int = 32
    clip_norm: float = 1.0
    use_model_averaged_prior: bool = False
    # approximator
    approximator: str = "network"  # or "tabular"
    hidden: list = field(default_factory=lambda: [32])
    dropout_rate: float = 0.2
    # data
    batch_path: str = ""
    batch_episodes: int = 300
    demo_episodes: int = 150
    behavior_styles: list = field(default_factory=lambda: ["asker", "cheerful", "plain"])
    behavior_fractions: list = field(default_factory=lambda: [0.4, 0.3, 0.3])
    behavior_temperature: float = 1.0
    coverage_top_k: int = 0  # 0: full support
    uncovered: list = field(default_factory=list)  # [[state, action], ...] (tabular)
    reward_noise: float = 0.0
    prior_smoothing: float = 0.1
    prior_epochs: int = 200
    reward: dict = field(default_factory=lambda: {})  # channel -> weight; empty: env default
    # evaluation
    eval_episodes: int = 100
    early_stopping: bool = False
    eval_every: int = 100
    heldout_episodes: int = 20
    workers: int = 1
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.variants or not self.seeds:
            raise UsageError("need at least one variant and one seed")
        self.algo(self.variants[0])  # validates shared hyperparameters

    def algo(self, variant: str, seed: int = 0) -> AlgoConfig:
        return AlgoConfig(variant=variant, gamma=self.gamma, reward_scale=self.reward_scale,
                          mc_passes=self.mc_passes, dbcq_candidates=self.dbcq_candidates,
                          use_model_averaged_prior=self.use_model_averaged_prior, seed=seed,
                          learning_rate=self.learning_rate, clip_norm=self.clip_norm,
                          polyak_rate=self.polyak_rate, batch_size=self.batch_size)

    def reward_spec(self) -> RewardSpec:
        return RewardSpec(weights=dict(self.reward), gamma=self.gamma) if self.reward else RewardSpec(gamma=self.gamma)

    def check_paths(self):
        if self.batch_path and not Path(self.batch_path).exists():
            raise UsageError(f"batch file {self.batch_path} not found")
        if self.env not in ("chain", "gridworld4x4", "dialog") and not Path(self.env).exists():
            raise UsageError(f"environment spec {self.env} not found")

    # flat "key = value" files with # comments

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "reward":
                lines += [f"reward.{k} = {json.dumps(w)}" for k, w in v.items()]
            else:
                lines.append(f"{f.name} = {json.dumps(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kw: dict[str, Any] = {}
        reward = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            value = _parse_value(val)
            if key.startswith("reward."):
                reward[key[len("reward."):]] = float(value)
            elif key in known:
                if key in _LIST_KEYS and not isinstance(value, list):
                    value = [_parse_value(x.strip()) for x in str(value).split(",") if x.strip()]
                kw[key] = value
            else:
                raise UsageError(f"line {lineno}: unknown key {key!r}")
        if reward:
            kw["reward"] = reward
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


_LIST_KEYS = {"variants", "seeds", "hidden", "behavior_styles", "behavior_fractions", "uncovered"}


def _parse_value(val: str):
    try:
        return json.loads(val)
    except json.JSONDecodeError:
        low = val.lower()
        if low in ("true", "false"):
            return low == "true"
        return val


# ---------------------------------------------------------------------------
# data and priors
# ---------------------------------------------------------------------------


@dataclass
class CellData:
    env: Any
    batch: Batch
    priors: list
    prior: Any  # PriorModel or AveragedPrior used by the learner
    eval_env: Any = None  # reports every reward channel; defaults to ``env``
    reward_weights: dict | None = None  # training reward as a mix of reported channels

    def __post_init__(self):
        if self.eval_env is None:
            self.eval_env = self.env

    def relabeled(self, spec: RewardSpec) -> "CellData":
        """Same transitions and priors, rewards recomputed under ``spec``."""
        from dataclasses import replace
        return replace(self, batch=relabel_batch(self.batch, spec), env=replace(self.env, reward_spec=spec),
                       reward_weights=dict(spec.weights))

    def training_return(self, returns: dict) -> float:
        if self.reward_weights is None:
            return _scalar_return(returns)
        return float(sum(w * returns.get(ch, 0.0) for ch, w in self.reward_weights.items()))


def make_env(config: ExperimentConfig):
    env = load_env_spec(config.env)
    if isinstance(env, TabularMDP):
        env = env.with_(gamma=config.gamma, reward_noise=config.reward_noise or env.reward_noise)
    elif isinstance(env, DialogEnv):
        from dataclasses import replace
        env = replace(env, reward_spec=config.reward_spec())
    return env


def _tabular_behavior(mdp: TabularMDP, uncovered) -> PriorModel:
    counts = np.ones((mdp.state_count, mdp.action_count))
    for s, a in uncovered:
        counts[s, a] = 0.0
    return PriorModel("tabular", counts, 0.0, "behavior")


def _onehot_demos(mdp, behavior, episodes, seed):
    from .core import Trajectory
    from .envs.rollout import prior_policy
    rng = np.random.default_rng(seed)
    choose = prior_policy(behavior)
    return [Trajectory(tuple((t.state, t.action, t.rewards) for t in run_episode(mdp, choose, rng)))
            for _ in range(episodes)]


def build_data(config: ExperimentConfig, seed: int) -> CellData:
    """Batch and priors for one seed (shared by every variant at that seed)."""
    env = make_env(config)
    ss = np.random.SeedSequence([seed, 7919])
    demo_seed, batch_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    top_k = config.coverage_top_k or None
    fit_cfg = lambda i: NetworkFitConfig(hidden=tuple(config.hidden), dropout_rate=config.dropout_rate,
                                         max_epochs=config.prior_epochs, seed=demo_seed + i)
    if isinstance(env, TabularMDP):
        behavior = _tabular_behavior(env, config.uncovered)
        demos = _onehot_demos(env, behavior, config.demo_episodes, demo_seed)
        if config.approximator == "tabular":
            prior = fit_mle(demos, config.prior_smoothing, state_count=env.state_count,
                            action_count=env.action_count, model_id="behavior")
        else:
            prior = fit_mle_network(demos, fit_cfg(0), action_count=env.action_count, model_id="behavior")
        priors = [prior]
        if config.batch_path:
            batch = Batch.load(config.batch_path)
        else:
            batch = generate_batch(env, [(behavior, config.behavior_temperature, 1.0, top_k)],
                                   config.batch_episodes, batch_seed)
        return CellData(env, batch, priors, prior)

    priors = []
    for i, style in enumerate(config.behavior_styles):
        demos = demonstrations(env, style, config.demo_episodes, seed=demo_seed + i)
        priors.append(fit_mle_network(demos, fit_cfg(i), action_count=env.action_count, model_id=style))
    if config.batch_path:
        batch = Batch.load(config.batch_path)
        if config.reward:
            batch = relabel_batch(batch, config.reward_spec())
    else:
        behaviors = [(p, config.behavior_temperature, f, top_k) for p, f in zip(priors, config.behavior_fractions)]
        batch = generate_batch(env, behaviors, config.batch_episodes, batch_seed)
    if config.use_model_averaged_prior:
        prior = average(priors, batch=batch)
    else:
        # single prior: MLE on the pooled demonstrations of every style
        pooled = demonstrations(env, list(config.behavior_styles), config.demo_episodes, seed=demo_seed + 97)
        prior = fit_mle_network(pooled, fit_cfg(97), action_count=env.action_count, model_id="mle")
    from dataclasses import replace
    eval_env = replace(env, reward_spec=RewardSpec(gamma=config.gamma))
    return CellData(env, batch, priors, prior, eval_env, dict(env.reward_spec.weights))


def save_prior(prior, path) -> None:
    if isinstance(prior, AveragedPrior):
        d = {"format": "offbrl-averaged-prior", "members": [[m.to_dict(), s] for m, s in prior.members]}
    else:
        d = prior.to_dict()
    Path(path).write_text(json.dumps(d), encoding="utf-8")


def load_prior(path):
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("format") == "offbrl-averaged-prior":
        return AveragedPrior([(PriorModel.from_dict(m), s) for m, s in d["members"]])
    return PriorModel.from_dict(d)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def make_policy(variant: str, q, prior, config: AlgoConfig, mode: str):
    def choose(state, rng):
        return act(variant, q, prior, state, mode, config, rng)
    return choose


def evaluate_returns(env, variant, q, prior, config: AlgoConfig, episodes: int, mode: str, seed: int) -> dict:
    """Mean undiscounted episode return per reward channel."""
    rng = np.random.default_rng(seed)
    choose = make_policy(variant, q, prior, config, mode)
    totals: dict[str, float] = {}
    for _ in range(episodes):
        for t in run_episode(env, choose, rng):
            for k, v in t.rewards.items():
                totals[k] = totals.get(k, 0.0) + float(v)
    return {k: v / episodes for k, v in sorted(totals.items())}


def learned_policy(variant: str, values: np.ndarray, prior_probs: np.ndarray | None, config: AlgoConfig):
    """Deterministic-evaluation policy matrix implied by learned values."""
    if variant == "kl_psi":
        return softmax_rows(values)
    if variant == "dbcq":
        pi = np.zeros_like(values)
        for s in range(len(values)):
            p = prior_probs[s]
            order = np.argsort(-p, kind="stable")[:config.dbcq_candidates]
            cand = np.sort(order[p[order] > 0])
            pi[s, cand[np.argmax(values[s, cand])]] = 1.0
        return pi
    return greedy_policy(values)


def overestimation_bias(learned_q: np.ndarray, policy: np.ndarray, mdp: TabularMDP, *, reward=None,
                        state_bonus=None, pairs=None) -> float:
    """Mean of Q_learned - Q^pi_true over ``pairs`` (default: reachable non-terminal pairs)."""
    true_q = policy_evaluation(mdp, policy, reward, state_bonus)
    if pairs is None:
        pairs = sorted(mdp.reachable_pairs())
    if not pairs:
        raise UsageError("no (s, a) pairs to average over")
    s, a = np.array(pairs).T
    return float(np.mean(learned_q[s, a] - true_q[s, a]))


def variant_bias(variant: str, q, prior, mdp: TabularMDP, config: AlgoConfig) -> float:
    """Bias of a learned approximator against the objective its backup targets."""
    S = mdp.state_count
    ids = np.arange(S)
    X = q.inputs(ids, np.eye(S))
    values = q.values(X)
    pp = prior.probs(ids, np.eye(S))
    pi = learned_policy(variant, values, pp, config)
    reward, bonus = None, None
    scale = config.reward_scale if variant in ("kl_q", "kl_psi") or config.scale_baseline_rewards else 1.0
    if variant in ("kl_q", "kl_psi"):
        with np.errstate(divide="ignore"):
            logp = np.log(pp)
        reward = mdp.R / scale + logp
        if variant == "kl_q":
            pi_soft = softmax_rows(values)
            reward = reward - np.log(pi_soft)
        else:
            bonus = -np.sum(np.where(pi > 0, pi * np.log(np.where(pi > 0, pi, 1.0)), 0.0), axis=1)
    elif scale != 1.0:
        reward = mdp.R / scale
    return overestimation_bias(values, pi, mdp, reward=reward, state_bonus=bonus)


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------


@dataclass
class CellResult:
    variant: str
    seed: int
    metrics: list = field(default_factory=list)
    returns_greedy: dict = field(default_factory=dict)
    returns_sample: dict = field(default_factory=dict)
    bias: float | None = None
    best_step: int = 0
    wall_clock: float = 0.0
    error: str | None = None
    model: Any = None  # best approximator, kept on request

    @property
    def mean_kl(self) -> float:
        vals = [m["mean_kl"] for m in self.metrics]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class EvalReport:
    cells: dict  # (variant, seed) -> CellResult
    notes: list = field(default_factory=list)

    def cell(self, variant: str, seed: int) -> CellResult:
        return self.cells[(variant, seed)]


def init_learner(config: ExperimentConfig, data: CellData, algo: AlgoConfig):
    if config.approximator == "tabular":
        if not isinstance(data.env, TabularMDP):
            raise UsageError("tabular approximator needs a tabular environment")
        return init_q_from_prior(data.prior, algo.polyak_rate)
    return init_q_from_prior(data.prior, algo.polyak_rate)


def train_cell(config: ExperimentConfig, variant: str, seed: int, data: CellData | None = None,
               keep_model: bool = False) -> CellResult:
    """Train and evaluate one (variant, seed) cell; failures are recorded, not raised."""
    start = time.perf_counter()
    res = CellResult(variant, seed)
    try:
        data = data or build_data(config, seed)
        algo = config.algo(variant, seed)
        q, target = init_learner(config, data, algo)
        state = new_train_state(q, target, data.prior, algo)
        arrays = data.batch.arrays()
        best_q, best_score, best_step = state.q, -math.inf, 0
        heldout_seed = seed + 1_000_003
        for step in range(1, config.training_steps + 1):
            state = train_step(state, sample_minibatch(arrays, algo.batch_size, state.rng), algo)
            if config.early_stopping and step % config.eval_every == 0:
                score = data.training_return(evaluate_returns(data.eval_env, variant, state.q, data.prior, algo,
                                                        config.heldout_episodes, "sample", heldout_seed))
                if score > best_score:
                    best_q, best_score, best_step = state.q, score, step
        if not config.early_stopping:
            best_q, best_step = state.q, config.training_steps
        res.metrics = [{k: m[k] for k in ("step", "loss", "mean_kl", "mean_target")} for m in state.metrics]
        res.best_step = best_step
        eval_seed = seed + 2_000_029
        res.returns_greedy = evaluate_returns(data.eval_env, variant, best_q, data.prior, algo,
                                              config.eval_episodes, "greedy", eval_seed)
        res.returns_sample = evaluate_returns(data.eval_env, variant, best_q, data.prior, algo,
                                              config.eval_episodes, "sample", eval_seed)
        if isinstance(data.env, TabularMDP):
            res.bias = variant_bias(variant, best_q, data.prior, data.env, algo)
        if keep_model:
            res.model = best_q
    except Exception as exc:  # per-cell isolation
        log.exception("cell (%s, %s) failed", variant, seed)
        res.error = f"{type(exc).__name__}: {exc}"
    res.wall_clock = time.perf_counter() - start
    return res


def _scalar_return(returns: dict) -> float:
    if "total" in returns:
        return returns["total"]
    if len(returns) == 1:
        return next(iter(returns.values()))
    return float(sum(returns.values()))


def _run_seed(args):
    config, seed = args
    try:
        data = build_data(config, seed)
    except Exception as exc:
        log.exception("data for seed %s failed", seed)
        return [CellResult(v, seed, error=f"{type(exc).__name__}: {exc}") for v in config.variants]
    return [train_cell(config, v, seed, data) for v in config.variants]


def run_experiment(config: ExperimentConfig) -> EvalReport:
    config.check_paths()
    jobs = [(config, s) for s in config.seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]
    cells = {}
    for group in results:
        for r in group:
            cells[(r.variant, r.seed)] = r
    notes = ["evaluation uses simulated rollouts in place of human ratings"]
    if not isinstance(make_env(config), TabularMDP):
        notes.append("overestimation bias omitted: no exact oracle for the dialog environment")
    return EvalReport(cells, notes)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def zscores(report: EvalReport, mode: str = "sample") -> dict:
    """Per-channel z-scores of every cell's return against all ok cells of the run.

    Channels with zero spread score 0. Returns {(variant, seed): {channel: z}}.
    """
    ok = {k: c for k, c in report.cells.items() if not c.error}
    attr = "returns_sample" if mode == "sample" else "returns_greedy"
    channels = sorted({ch for c in ok.values() for ch in getattr(c, attr)})
    out = {k: {} for k in ok}
    for ch in channels:
        vals = np.array([getattr(ok[k], attr).get(ch, np.nan) for k in ok])
        mu, sd = np.nanmean(vals), np.nanstd(vals)
        for k, v in zip(ok, vals):
            out[k][ch] = 0.0 if sd == 0 or np.isnan(v) else float((v - mu) / sd)
    return out


def report_tables(report: EvalReport) -> dict[str, str]:
    keys = sorted(report.cells, key=lambda k: (k[0], k[1]))
    metric_rows, kl_rows_ = [], []
    channels = sorted({c for k in keys for c in report.cells[k].returns_greedy})
    summary = []
    for k in keys:
        c = report.cells[k]
        for m in c.metrics:
            metric_rows.append([m["step"], c.variant, c.seed, m["loss"], m["mean_kl"], m["mean_target"]])
            kl_rows_.append([m["step"], c.variant, c.seed, m["mean_kl"]])
        final_loss = c.metrics[-1]["loss"] if c.metrics else None
        summary.append([c.variant, c.seed, "error" if c.error else "ok", c.mean_kl, final_loss, c.bias, c.best_step,
                        *[c.returns_greedy.get(ch) for ch in channels],
                        *[c.returns_sample.get(ch) for ch in channels]])
    z = zscores(report)
    z_rows = [[v, s_, ch, z[(v, s_)][ch]] for (v, s_) in keys if (v, s_) in z for ch in sorted(z[(v, s_)])]
    return {
        "zscores.csv": _csv(["variant", "seed", "channel", "z"], z_rows),
        "metrics.csv": _csv(["step", "variant", "seed", "loss", "mean_kl", "mean_target"], metric_rows),
        "kl_curve.csv": _csv(["step", "variant", "seed", "mean_kl"], kl_rows_),
        "summary.csv": _csv(["variant", "seed", "status", "mean_kl", "final_loss", "bias", "best_step",
                             *[f"greedy_{ch}" for ch in channels], *[f"sample_{ch}" for ch in channels]], summary),
    }


PLOT_SCRIPT = '''"""Render KL curves and reward-channel bars from the CSVs in this directory."""
import csv
import math
from collections import defaultdict
from pathlib import Path

import matplotlib.pyplot as plt

here = Path(__file__).parent
curves = defaultdict(lambda: defaultdict(list))
with open(here / "kl_curve.csv") as fh:
    for row in csv.DictReader(fh):
        kl = float(row["mean_kl"])
        if not math.isfinite(kl):
            kl = 1e3  # display floor for support violations
        curves[row["variant"]][int(row["step"])].append(kl)
fig, ax = plt.subplots(1, 2, figsize=(11, 4))
for variant, by_step in sorted(curves.items()):
    steps = sorted(by_step)
    ax[0].plot(steps, [sum(by_step[s]) / len(by_step[s]) for s in steps], label=variant)
ax[0].set_xlabel("step")
ax[0].set_ylabel("KL(pi || prior)")
ax[0].legend()
rows = list(csv.DictReader(open(here / "summary.csv")))
channels = [c for c in rows[0] if c.startswith("sample_")] if rows else []
variants = sorted({r["variant"] for r in rows})
width = 0.8 / max(len(variants), 1)
for i, v in enumerate(variants):
    vals = []
    for ch in channels:
        xs = [float(r[ch]) for r in rows if r["variant"] == v and r[ch]]
        vals.append(sum(xs) / len(xs) if xs else 0.0)
    ax[1].bar([j + i * width for j in range(len(channels))], vals, width, label=v)
ax[1].set_xticks([j + 0.4 for j in range(len(channels))])
ax[1].set_xticklabels([c[len("sample_"):] for c in channels], rotation=45, ha="right")
ax[1].legend()
fig.tight_layout()
fig.savefig(here / "report.png", dpi=120)
'''


def check_output_dir(path) -> Path:
    out = Path(os.environ.get(OUTPUT_ENV_VAR) or path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from exc
    return out


def emit_reports(report: EvalReport, output_dir) -> list[Path]:
    out = check_output_dir(output_dir)
    written = []
    for name, text in report_tables(report).items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        written.append(p)
    p = out / "plot_report.py"
    p.write_text(PLOT_SCRIPT, encoding="utf-8")
    written.append(p)
    timing = {f"{v}/{s}": round(c.wall_clock, 3) for (v, s), c in sorted(report.cells.items())}
    p = out / "timing.json"
    p.write_text(json.dumps({"wall_clock_s": timing, "notes": report.notes}, indent=1) + "\n", encoding="utf-8")
    written.append(p)
    return written
