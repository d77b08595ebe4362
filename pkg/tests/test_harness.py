import json
import math

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from caasl import cli, harness, posterior as P
from caasl.env import EnvConfig, decode_action
from caasl.errors import ConfigError
from caasl.harness import (
    ExperimentConfig,
    config_from_dict,
    evaluate,
    observational_policy,
    random_policy,
    resolve_suite,
    run_suite,
    suite_names,
)
from caasl.nets import AltAttentionConfig, PosteriorNet

ARCH = AltAttentionConfig(num_layers=1, num_heads=4, embed_dim=16)


@pytest.fixture(scope="module")
def posterior_net():
    torch.manual_seed(0)
    net = PosteriorNet(ARCH).eval()
    net.requires_grad_(False)
    return net


@pytest.fixture(scope="module")
def small_cfg():
    return ExperimentConfig(
        domain="synthetic", d=4, n0=8, budget=3, expected_in_degree=1.0,
        n_test_envs=4, sim_burn_in=120, sim_sample_steps=50,
    )


@pytest.fixture(scope="module")
def small_report(small_cfg, posterior_net):
    return evaluate(small_cfg, posterior=posterior_net)


def test_random_policy_range_frequency_and_determinism():
    act = random_policy(d=6, channels=2, env_seed=0)
    draws = np.stack([act(None, t) for t in range(10_000)])
    assert np.all(draws > -1) and np.all(draws < 1)
    freq = (draws[:, :, 0] > 0).mean(axis=0)
    assert np.all(np.abs(freq - 0.5) < 0.02)
    again = random_policy(d=6, channels=2, env_seed=0)
    assert np.array_equal(act(None, 3), again(None, 3))


def test_observational_policy_decodes_to_none():
    cfg = EnvConfig(domain="synthetic", d=5, n0=4, budget=2)
    act = observational_policy(d=5, channels=2)
    for t in range(3):
        iv = decode_action(act(None, t), cfg)
        assert iv.is_observational()


def test_observational_rollout_appends_pure_observations(small_cfg, posterior_net):
    report = evaluate(
        ExperimentConfig(**{**small_cfg.to_dict(), "policies": ("observational",),
                            "n_test_envs": 1}),
        posterior=posterior_net,
    )
    record = report.records["observational"][0]
    for step in record.steps:
        assert step.decoded["kind"] == "none"
        assert step.reward == pytest.approx(
            step.posterior_score
            - (record.initial_score if step.t == 1
               else record.steps[step.t - 2].posterior_score),
            abs=1e-9,
        )


def test_paired_environments_share_hidden_models(small_report):
    rnd = small_report.records["random"]
    obs = small_report.records["observational"]
    for a, b in zip(rnd, obs):
        assert a.model == b.model
        assert a.env_seed == b.env_seed
        assert a.initial_score == pytest.approx(b.initial_score)


def test_report_has_t_plus_one_rows_per_metric(small_report, small_cfg):
    for metric in harness.METRICS:
        rows = small_report.rows_for("random", metric)
        assert len(rows) == small_cfg.budget + 1
        assert [r["step"] for r in rows] == list(range(small_cfg.budget + 1))


def test_returns_row_zero_is_zero_and_score_visible(small_report):
    r0 = small_report.rows_for("random", "returns")[0]
    assert r0["mean"] == 0.0
    s0 = small_report.rows_for("random", "posterior_score")[0]
    assert s0["mean"] > 0


def test_ci_halfwidth_formula(small_report):
    returns = small_report.per_env_returns("random")
    row = small_report.rows_for("random", "returns")[-1]
    half = 1.96 * returns.std(ddof=1) / math.sqrt(len(returns))
    assert row["ci_high"] - row["mean"] == pytest.approx(half, rel=1e-9)


def test_emit_report_schema_and_determinism(tmp_path, small_report):
    out1 = tmp_path / "r1"
    out2 = tmp_path / "r2"
    harness.emit_report(small_report, out1)
    harness.emit_report(small_report, out2)
    csv1 = (out1 / "metrics.csv").read_text()
    assert csv1.splitlines()[0] == "step,policy,metric,mean,ci_low,ci_high"
    assert csv1 == (out2 / "metrics.csv").read_text()
    for metric in harness.METRICS:
        plot = out1 / f"plot_{metric}.png"
        assert plot.exists()
        assert plot.read_bytes() == (out2 / f"plot_{metric}.png").read_bytes()
    flat = (out1 / "metrics_random.csv").read_text().splitlines()
    assert flat[0] == "step,returns,expected_shd,edge_f1,auprc"


def test_auprc_sentinel_rows_are_flagged_not_dropped(tmp_path, posterior_net):
    # With a near-empty graph prior some test graphs have no edges at all;
    # their AUPRC is undefined and must surface as nan rows, not vanish.
    cfg = ExperimentConfig(
        domain="synthetic", d=2, n0=6, budget=2, expected_in_degree=0.05,
        n_test_envs=6, policies=("observational",),
    )
    report = evaluate(cfg, posterior=posterior_net)
    values = [rec.final_metrics["per_step"][0]["auprc"]
              for rec in report.records["observational"]]
    assert any(math.isnan(v) for v in values)
    out = tmp_path / "rep"
    harness.emit_report(report, out)
    rows = [line for line in (out / "metrics.csv").read_text().splitlines()
            if ",auprc," in line]
    assert len(rows) == cfg.budget + 1  # present even when all-nan


def test_suite_resolution_changes_exactly_documented_fields(small_cfg):
    base_dict = small_cfg.to_dict()
    for name in suite_names():
        resolved, overrides = resolve_suite(small_cfg, name)
        resolved_dict = resolved.to_dict()
        changed = {k for k in base_dict if base_dict[k] != resolved_dict[k]}
        assert changed == set(overrides), name


def test_documented_suite_values(small_cfg):
    resolved, _ = resolve_suite(small_cfg, "ood-graph-mech")
    assert resolved.graph_kind == "scale-free"
    assert resolved.mechanism_mean == 0.1
    resolved, _ = resolve_suite(small_cfg, "ood-platform")
    assert resolved.platform == "drop-seq"
    assert resolved.domain == "sergio"
    resolved, _ = resolve_suite(small_cfg, "ood-noisy-knockout")
    assert resolved.noisy_flip_probability == 0.10
    resolved, _ = resolve_suite(small_cfg, "ood-dimension")
    assert resolved.d == 2 * small_cfg.d


def test_unknown_suite_lists_valid_names(small_cfg):
    with pytest.raises(ConfigError, match="in-dist"):
        resolve_suite(small_cfg, "bogus")


def test_run_suite_writes_resolved_config_and_overrides(tmp_path, small_cfg, posterior_net):
    resolved, _ = run_suite(small_cfg, "ood-graph", tmp_path, posterior=posterior_net)
    out = tmp_path / "ood-graph"
    resolved_json = json.loads((out / "resolved_config.json").read_text())
    assert resolved_json["graph_kind"] == "scale-free"
    overrides = json.loads((out / "overrides.json").read_text())
    assert overrides == {"graph_kind": "scale-free"}


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="not_a_field"):
        config_from_dict({"not_a_field": 1})


def test_load_config_toml(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(
        'domain = "synthetic"\nd = 5\nbudget = 4\npolicies = ["random"]\n'
    )
    cfg = harness.load_config(path)
    assert cfg.d == 5
    assert cfg.policies == ("random",)


def test_evaluate_requires_posterior(small_cfg):
    with pytest.raises(ConfigError, match="posterior"):
        evaluate(ExperimentConfig(**{**small_cfg.to_dict(),
                                     "posterior_checkpoint": None}))


def test_missing_policy_checkpoint_is_config_error(small_cfg, posterior_net):
    cfg = ExperimentConfig(**{
        **small_cfg.to_dict(),
        "policies": ("caasl-checkpoint",),
        "policy_checkpoint": "/nonexistent/policy.ckpt",
    })
    with pytest.raises(ConfigError, match="checkpoint"):
        evaluate(cfg, posterior=posterior_net)


def test_cli_exit_codes(tmp_path):
    runner = CliRunner()
    config = tmp_path / "exp.toml"
    config.write_text('domain = "synthetic"\nd = 3\n')
    result = runner.invoke(cli.main, ["suite", "--config", str(config), "--name", "bogus"])
    assert result.exit_code == 2
    result = runner.invoke(cli.main, ["evaluate", "--config", str(config)])
    assert result.exit_code == 2  # no posterior checkpoint configured

    bad = tmp_path / "bad.toml"
    bad.write_text("nonsense_key = 1\n")
    result = runner.invoke(cli.main, ["evaluate", "--config", str(bad)])
    assert result.exit_code == 2
