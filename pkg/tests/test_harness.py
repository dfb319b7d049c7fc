import os

import numpy as np
import pytest

import offbrl.harness as H
from offbrl.core import UsageError
from offbrl.envs import chain, value_iteration
from offbrl.harness import (CellResult, EvalReport, ExperimentConfig, emit_reports, overestimation_bias,
                            report_tables, run_experiment, zscores)


def small(**kw):
    base = dict(env="chain", variants=["batch_q", "kl_psi"], seeds=[0, 1], training_steps=40,
                approximator="tabular", learning_rate=0.05, batch_episodes=20, demo_episodes=20, eval_episodes=5)
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_text_round_trip():
    cfg = small(reward={"question": 0.5, "sentiment": 0.5}, uncovered=[[0, 1]])
    back = ExperimentConfig.loads(cfg.dumps())
    assert back == cfg


def test_config_parser_comments_lists_and_errors():
    cfg = ExperimentConfig.loads("# comment\nvariants = batch_q, dbcq  # trailing\nseeds = 3\n"
                                 "early_stopping = true\nreward.question = 1\n")
    assert cfg.variants == ["batch_q", "dbcq"] and cfg.seeds == [3]
    assert cfg.early_stopping is True and cfg.reward == {"question": 1.0}
    with pytest.raises(UsageError, match="unknown key"):
        ExperimentConfig.loads("learning_rat = 0.1\n")
    with pytest.raises(UsageError, match="line 1"):
        ExperimentConfig.loads("just words\n")
    with pytest.raises(UsageError):
        ExperimentConfig.loads("variants = nonsense\n")


def test_overestimation_bias_zero_for_true_values():
    mdp = chain(0.5)
    Q = value_iteration(mdp)
    pi = np.zeros_like(Q)
    pi[np.arange(2), Q.argmax(axis=1)] = 1
    assert overestimation_bias(Q, pi, mdp) == pytest.approx(0.0, abs=1e-12)
    assert overestimation_bias(Q + 0.25, pi, mdp) == pytest.approx(0.25)


def test_run_is_deterministic_and_reports(tmp_path):
    a = report_tables(run_experiment(small()))
    b = report_tables(run_experiment(small()))
    assert a == b
    paths = emit_reports(run_experiment(small()), tmp_path)
    names = {p.name for p in paths}
    assert {"metrics.csv", "kl_curve.csv", "summary.csv", "zscores.csv", "plot_report.py"} <= names
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,variant,seed,loss,mean_kl,mean_target"
    assert len((tmp_path / "kl_curve.csv").read_text().splitlines()) == 1 + 2 * 2 * 40


def test_failed_cell_is_isolated(monkeypatch):
    clean = run_experiment(small())
    real = H.train_step

    def flaky(state, mb, config):
        if config.variant == "kl_psi" and config.seed == 1:
            raise FloatingPointError("boom")
        return real(state, mb, config)

    monkeypatch.setattr(H, "train_step", flaky)
    broken = run_experiment(small())
    assert "boom" in broken.cell("kl_psi", 1).error
    for key in [("batch_q", 0), ("batch_q", 1), ("kl_psi", 0)]:
        assert broken.cells[key].metrics == clean.cells[key].metrics
        assert broken.cells[key].returns_sample == clean.cells[key].returns_sample


def test_early_stopping_keeps_a_checkpoint():
    rep = run_experiment(small(early_stopping=True, eval_every=10, heldout_episodes=3))
    for c in rep.cells.values():
        assert c.error is None and c.best_step in (10, 20, 30, 40)


def test_output_dir_checks(tmp_path, monkeypatch):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(UsageError, match="not writable"):
        H.check_output_dir(blocker / "sub")
    monkeypatch.setenv(H.OUTPUT_ENV_VAR, str(tmp_path / "override"))
    assert H.check_output_dir(tmp_path / "ignored") == tmp_path / "override"


def test_missing_batch_file_is_a_usage_error(tmp_path):
    with pytest.raises(UsageError, match="not found"):
        run_experiment(small(batch_path=str(tmp_path / "nope.jsonl")))


def test_zscores():
    cells = {("a", 0): CellResult("a", 0, returns_sample={"q": 1.0, "s": 2.0}),
             ("b", 0): CellResult("b", 0, returns_sample={"q": 3.0, "s": 2.0}),
             ("c", 0): CellResult("c", 0, error="x")}
    z = zscores(EvalReport(cells))
    assert z[("a", 0)] == {"q": -1.0, "s": 0.0} and z[("b", 0)]["q"] == 1.0
    assert ("c", 0) not in z


def test_dialog_cell_runs_end_to_end():
    cfg = ExperimentConfig(env="dialog", variants=["kl_q"], seeds=[0], training_steps=20, demo_episodes=10,
                           prior_epochs=3, batch_episodes=10, eval_episodes=2, use_model_averaged_prior=True)
    rep = run_experiment(cfg)
    c = rep.cell("kl_q", 0)
    assert c.error is None and c.bias is None
    assert "question" in c.returns_sample and "total" in c.returns_sample
    assert any("oracle" in n for n in rep.notes)


def test_quick_suite_csvs_identical_across_processes(tmp_path):
    import subprocess
    import sys
    from pathlib import Path
    script = Path(__file__).with_name("suite.py")
    runs = []
    for seed in ("3", "4"):
        out = tmp_path / seed
        subprocess.run([sys.executable, str(script), str(out), "--quick"], check=True,
                       env=dict(os.environ, PYTHONHASHSEED=seed))
        runs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*.csv"))})
    assert runs[0] == runs[1] and len(runs[0]) >= 10
