"""Experiment orchestration: configs, baseline policies, paired evaluation,
the named distribution-shift suites, and report emission.

Evaluation rolls every policy over identical hidden models and environment
noise streams (per-environment seeds), aggregates per-step metrics with 95%
confidence intervals, and writes CSV tables plus line plots.
"""

from __future__ import annotations

import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import posterior as posterior_mod
from .env import DesignEnv, EnvConfig, EpisodeRecord, rollout, write_episode_records
from .errors import ConfigError
from .interventions import KIND_DO, KIND_KNOCKOUT
from .nets import PolicyNet, PosteriorNet, history_to_tensor
from .priors import DOMAIN_SERGIO, DOMAIN_SYNTHETIC, PriorSpec, sample_model
from .rl import TEST_SEED_OFFSET, load_policy
from .scm import GRAPH_ERDOS_RENYI, GRAPH_SCALE_FREE, GraphPrior
from .sergio import NoisyInterventionConfig, SimGrid

POLICY_CHECKPOINT = "caasl-checkpoint"
POLICY_RANDOM = "random"
POLICY_OBSERVATIONAL = "observational"

METRICS = ("returns", "posterior_score", "expected_shd", "edge_f1", "auprc")


@dataclass(frozen=True)
class ExperimentConfig:
    domain: str = DOMAIN_SYNTHETIC
    d: int = 10
    n0: int = 50
    budget: int = 10
    graph_kind: str = GRAPH_ERDOS_RENYI
    expected_in_degree: float = 3.0
    mechanism_mean: float = 0.0
    noise_kind: str = "gaussian"
    heteroskedastic: bool = False
    intervention_kind: str = "auto"
    value_amplitude: float = 2.0
    platform: str = "chromium-10x"
    noisy_flip_probability: float = 0.0
    policies: tuple = (POLICY_RANDOM, POLICY_OBSERVATIONAL)
    policy_checkpoint: Optional[str] = None
    posterior_checkpoint: Optional[str] = None
    posterior_checkpoint_sergio: Optional[str] = None
    n_test_envs: int = 100
    test_seed_offset: int = TEST_SEED_OFFSET
    stochastic_rollout: bool = False
    sim_dt: float = 0.01
    sim_burn_in: int = 1000
    sim_sample_steps: int = 500

    def resolved_intervention_kind(self) -> str:
        if self.intervention_kind != "auto":
            return self.intervention_kind
        return KIND_KNOCKOUT if self.domain == DOMAIN_SERGIO else KIND_DO

    def env_config(self) -> EnvConfig:
        noisy = (
            NoisyInterventionConfig(self.noisy_flip_probability)
            if self.noisy_flip_probability > 0
            else None
        )
        return EnvConfig(
            domain=self.domain,
            d=self.d,
            n0=self.n0,
            budget=self.budget,
            intervention_kind=self.resolved_intervention_kind(),
            value_amplitude=self.value_amplitude,
            noisy_intervention=noisy,
            platform=self.platform,
            grid=SimGrid(self.sim_dt, self.sim_burn_in, self.sim_sample_steps),
        )

    def prior_spec(self) -> PriorSpec:
        return PriorSpec(
            domain=self.domain,
            d=self.d,
            graph=GraphPrior(kind=self.graph_kind, expected_in_degree=self.expected_in_degree),
            mechanism_mean=self.mechanism_mean,
            noise_kind=self.noise_kind,
            heteroskedastic=self.heteroskedastic,
        )

    def resolved_posterior_checkpoint(self) -> Optional[str]:
        if self.domain == DOMAIN_SERGIO and self.posterior_checkpoint_sergio:
            return self.posterior_checkpoint_sergio
        return self.posterior_checkpoint

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["policies"] = list(self.policies)
        return out


def config_from_dict(obj: dict) -> ExperimentConfig:
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "policies" in obj:
        obj = {**obj, "policies": tuple(obj["policies"])}
    return ExperimentConfig(**obj)


def load_config(path) -> ExperimentConfig:
    if sys.version_info >= (3, 11):
        import tomllib as toml
    else:
        import tomli as toml
    with open(path, "rb") as fh:
        data = toml.load(fh)
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# Baseline and checkpoint-backed policies.  A policy function maps
# (history, step_index) -> raw action in (-1, 1)^{d x channels}.
# ---------------------------------------------------------------------------

def random_policy(d: int, channels: int, env_seed: int) -> Callable:
    """Uniform raw actions: every variable is targeted with probability 1/2."""

    def act(history, t):
        rng = np.random.default_rng([env_seed, 3001, t])
        return rng.uniform(-1.0, 1.0, size=(d, channels))

    return act


def observational_policy(d: int, channels: int) -> Callable:
    """All target entries pinned at -1: every decode is an observational draw."""

    def act(history, t):
        raw = np.zeros((d, channels))
        raw[:, 0] = -1.0
        return raw

    return act


def checkpoint_policy(policy: PolicyNet, env_seed: int, stochastic: bool = False) -> Callable:
    import torch

    def act(history, t):
        with torch.no_grad():
            h_t = history_to_tensor(history.data)
            if stochastic:
                gen = torch.Generator().manual_seed(int(env_seed) * 1000 + t)
                action, _ = policy.sample(h_t, generator=gen)
            else:
                action = policy.mean_action(h_t)
        return action[0].numpy()

    return act


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    config: dict
    records: dict  # policy name -> list[EpisodeRecord]
    table: list  # rows: {step, policy, metric, mean, ci_low, ci_high}

    def rows_for(self, policy: str, metric: str) -> list:
        return [r for r in self.table if r["policy"] == policy and r["metric"] == metric]

    def per_env_returns(self, policy: str) -> np.ndarray:
        return np.array([rec.returns(1.0) for rec in self.records[policy]])


def _mean_ci(values: np.ndarray) -> tuple[float, float, float]:
    vals = values[~np.isnan(values)]
    if len(vals) == 0:
        return math.nan, math.nan, math.nan
    mean = float(vals.mean())
    if len(vals) == 1:
        return mean, mean, mean
    half = 1.96 * float(vals.std(ddof=1)) / math.sqrt(len(vals))
    return mean, mean - half, mean + half


def evaluate(
    cfg: ExperimentConfig,
    posterior: Optional[PosteriorNet] = None,
    policy_net: Optional[PolicyNet] = None,
) -> EvaluationReport:
    """Paired rollouts of every configured policy on fresh test environments.

    Policies see identical hidden models and identical environment noise
    streams; metric rows include acquisition step 0 (the initial history).
    """
    env_cfg = cfg.env_config()
    prior = cfg.prior_spec()
    if posterior is None:
        ckpt = cfg.resolved_posterior_checkpoint()
        if ckpt is None or not Path(ckpt).exists():
            raise ConfigError("posterior checkpoint is required for evaluation")
        posterior = posterior_mod.load_posterior(ckpt)
    policies = list(cfg.policies)
    if POLICY_CHECKPOINT in policies and policy_net is None:
        if cfg.policy_checkpoint is None or not Path(cfg.policy_checkpoint).exists():
            raise ConfigError(f"policy {POLICY_CHECKPOINT!r} requires an existing checkpoint")
        policy_net = load_policy(cfg.policy_checkpoint)

    records: dict[str, list[EpisodeRecord]] = {name: [] for name in policies}
    for j in range(cfg.n_test_envs):
        env_seed = cfg.test_seed_offset + j
        model = sample_model(prior, env_seed)
        for name in policies:
            env = DesignEnv(model, env_cfg, posterior, seed=env_seed)
            if name == POLICY_RANDOM:
                act = random_policy(cfg.d, env_cfg.action_channels, env_seed)
            elif name == POLICY_OBSERVATIONAL:
                act = observational_policy(cfg.d, env_cfg.action_channels)
            elif name == POLICY_CHECKPOINT:
                act = checkpoint_policy(policy_net, env_seed, cfg.stochastic_rollout)
            else:
                raise ConfigError(f"unknown policy {name!r}")
            records[name].append(rollout(env, act, record_metrics=True))

    table = _aggregate(records, cfg.budget)
    return EvaluationReport(config=cfg.to_dict(), records=records, table=table)


def _aggregate(records: dict, budget: int) -> list:
    table = []
    for policy, recs in records.items():
        for metric in METRICS:
            for step in range(budget + 1):
                values = np.array([_metric_at(rec, metric, step) for rec in recs])
                mean, lo, hi = _mean_ci(values)
                table.append(
                    {
                        "step": step,
                        "policy": policy,
                        "metric": metric,
                        "mean": mean,
                        "ci_low": lo,
                        "ci_high": hi,
                    }
                )
    return table


def _metric_at(rec: EpisodeRecord, metric: str, step: int) -> float:
    if metric == "returns":
        return float(sum(s.reward for s in rec.steps[:step]))
    return float(rec.final_metrics["per_step"][step][
        "posterior_score" if metric == "posterior_score" else metric
    ])


# ---------------------------------------------------------------------------
# Named suites: one override set per test-time distribution shift.
# ---------------------------------------------------------------------------

def _suite_overrides(base: ExperimentConfig) -> dict[str, dict]:
    return {
        "in-dist": {},
        "ood-graph": {"graph_kind": GRAPH_SCALE_FREE},
        "ood-graph-mech": {"graph_kind": GRAPH_SCALE_FREE, "mechanism_mean": 0.1},
        "ood-graph-mech-noise": {
            "graph_kind": GRAPH_SCALE_FREE,
            "mechanism_mean": 0.1,
            "noise_kind": "gumbel",
        },
        "ood-heteroskedastic": {"heteroskedastic": True},
        "ood-shift-intervention": {"intervention_kind": "shift"},
        "ood-dimension": {"d": 2 * base.d},
        "ood-platform": {"domain": DOMAIN_SERGIO, "platform": "drop-seq"},
        "ood-knockdown": {"domain": DOMAIN_SERGIO, "intervention_kind": "knockdown"},
        "ood-noisy-knockout": {"domain": DOMAIN_SERGIO, "noisy_flip_probability": 0.10},
    }


def suite_names() -> list[str]:
    return list(_suite_overrides(ExperimentConfig()))


def resolve_suite(base: ExperimentConfig, name: str) -> tuple[ExperimentConfig, dict]:
    """Apply a named shift; everything not overridden inherits the base config."""
    overrides = _suite_overrides(base).get(name)
    if overrides is None:
        raise ConfigError(
            f"unknown suite {name!r}; valid names: {', '.join(suite_names())}"
        )
    return replace(base, **overrides), overrides


def run_suite(
    base: ExperimentConfig,
    name: str,
    out_dir,
    posterior: Optional[PosteriorNet] = None,
    policy_net: Optional[PolicyNet] = None,
) -> tuple[ExperimentConfig, EvaluationReport]:
    resolved, overrides = resolve_suite(base, name)
    report = evaluate(resolved, posterior=posterior, policy_net=policy_net)
    out = Path(out_dir) / name
    emit_report(report, out)
    with open(out / "overrides.json", "w") as fh:
        json.dump(overrides, fh, indent=2, sort_keys=True)
    return resolved, report


# ---------------------------------------------------------------------------
# Report emission: CSV tables, per-policy flat metric tables, episode records
# and per-metric plots.  All files are written atomically (write then rename)
# and regenerate bit-identically from the same inputs.
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.10g}"


def emit_report(report: EvaluationReport, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    csv_path = out_dir / "metrics.csv"
    _atomic_write(csv_path, _table_csv(report.table))

    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(report.config, fh, indent=2, sort_keys=True)

    for policy, recs in report.records.items():
        write_episode_records(recs, out_dir / f"episodes_{policy}.jsonl")
        flat = []
        for step in range(report.config["budget"] + 1):
            flat.append(
                {
                    "step": step,
                    "returns": _fmt(_policy_metric_mean(report, policy, "returns", step)),
                    "expected_shd": _fmt(_policy_metric_mean(report, policy, "expected_shd", step)),
                    "edge_f1": _fmt(_policy_metric_mean(report, policy, "edge_f1", step)),
                    "auprc": _fmt(_policy_metric_mean(report, policy, "auprc", step)),
                }
            )
        posterior_mod.metrics_report_csv(out_dir / f"metrics_{policy}.csv", flat)

    plot_report(csv_path, out_dir)
    return csv_path


def _policy_metric_mean(report: EvaluationReport, policy: str, metric: str, step: int) -> float:
    for row in report.table:
        if row["policy"] == policy and row["metric"] == metric and row["step"] == step:
            return row["mean"]
    raise KeyError((policy, metric, step))


def _table_csv(table: list) -> str:
    lines = ["step,policy,metric,mean,ci_low,ci_high"]
    for row in table:
        lines.append(
            f"{row['step']},{row['policy']},{row['metric']},"
            f"{_fmt(row['mean'])},{_fmt(row['ci_low'])},{_fmt(row['ci_high'])}"
        )
    return "\n".join(lines) + "\n"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def plot_report(csv_path, out_dir) -> list[Path]:
    """Per-metric line plots (mean with CI band vs acquisition step) from the
    metrics CSV; plotting from the CSV keeps figures reproducible."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = []
    lines = Path(csv_path).read_text().strip().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        rows.append(dict(zip(header, line.split(","))))

    out_dir = Path(out_dir)
    out_paths = []
    metrics = sorted({r["metric"] for r in rows})
    policies = sorted({r["policy"] for r in rows})
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for policy in policies:
            sub = [r for r in rows if r["metric"] == metric and r["policy"] == policy]
            sub.sort(key=lambda r: int(r["step"]))
            steps = [int(r["step"]) for r in sub]
            mean = np.array([float(r["mean"]) for r in sub])
            lo = np.array([float(r["ci_low"]) for r in sub])
            hi = np.array([float(r["ci_high"]) for r in sub])
            ax.plot(steps, mean, label=policy)
            ax.fill_between(steps, lo, hi, alpha=0.2)
        ax.set_xlabel("acquisition step")
        ax.set_ylabel(metric)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"plot_{metric}.png"
        tmp = path.with_name(path.name + ".tmp.png")
        fig.savefig(tmp, dpi=100, metadata={"Software": None})
        plt.close(fig)
        tmp.replace(path)
        out_paths.append(path)
    return out_paths
