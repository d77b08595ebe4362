"""Command-line entry points.

Commands: train-posterior, train-policy, evaluate, suite, simulate, replay.
Configs are TOML files with the flat experiment schema (see README).  Output
lands under --out, resolved against the CAASL_RUN_ROOT environment variable
(default ./runs).  Exit codes: 0 success, 2 configuration error, 3 numerical
failure.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import harness, posterior as posterior_mod, rl
from .env import DesignEnv, read_episode_records
from .errors import ConfigError, NumericalError
from .interventions import Intervention
from .nets import AltAttentionConfig
from .priors import DOMAIN_SERGIO, sample_model
from .scm import export_dataset, export_edge_list
from .sergio import export_counts


def run_root() -> Path:
    return Path(os.environ.get("CAASL_RUN_ROOT", "runs"))


def _resolve_out(out: str) -> Path:
    path = Path(out)
    return path if path.is_absolute() else run_root() / path


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except NumericalError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(3)

    return wrapper


@click.group()
def main():
    """Amortized intervention design: simulation, training and evaluation."""


@main.command("train-posterior")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", default="posterior", show_default=True)
@click.option("--steps", default=2000, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--datasets-per-batch", default=8, show_default=True)
@click.option("--n-lo", default=20, show_default=True)
@click.option("--n-hi", default=60, show_default=True)
@click.option("--layers", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True)
@handle_errors
def train_posterior_cmd(config_path, out, steps, lr, datasets_per_batch, n_lo, n_hi, layers, seed):
    """Train the amortized graph posterior on the config's prior."""
    cfg = harness.load_config(config_path)
    out_dir = _resolve_out(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = posterior_mod.PosteriorTrainConfig(
        prior=cfg.prior_spec(),
        n_range=(n_lo, n_hi),
        datasets_per_batch=datasets_per_batch,
        steps=steps,
        lr=lr,
        arch=AltAttentionConfig(num_layers=layers),
        value_amplitude=cfg.value_amplitude,
        observation=cfg.env_config().observation_spec(),
    )
    net, log = posterior_mod.train_posterior(
        train_cfg, seed, log_path=out_dir / "posterior_log.csv"
    )
    ckpt = out_dir / "posterior.ckpt"
    posterior_mod.save_posterior(net, ckpt)
    click.echo(f"posterior checkpoint: {ckpt} (final loss {log[-1][1]:.4f})")


@main.command("train-policy")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--posterior", "posterior_path", required=True, type=click.Path())
@click.option("--out", default="policy", show_default=True)
@click.option("--env-steps", default=10000, show_default=True)
@click.option("--critics", default=2, show_default=True)
@click.option("--gamma", default=0.9, show_default=True)
@click.option("--policy-lr", default=1e-3, show_default=True)
@click.option("--q-lr", default=1e-3, show_default=True)
@click.option("--layers", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True)
@handle_errors
def train_policy_cmd(
    config_path, posterior_path, out, env_steps, critics, gamma, policy_lr, q_lr, layers, seed
):
    """Train the intervention-design policy against a frozen posterior."""
    cfg = harness.load_config(config_path)
    if not Path(posterior_path).exists():
        raise ConfigError(f"posterior checkpoint not found: {posterior_path}")
    frozen = posterior_mod.load_posterior(posterior_path)
    sac_cfg = rl.SacConfig(
        m_critics=critics,
        redq_subset=min(2, critics),
        gamma=gamma,
        policy_lr=policy_lr,
        q_lr=q_lr,
        n_env_steps=env_steps,
        arch=AltAttentionConfig(num_layers=layers, dropout=0.1),
        q_arch=AltAttentionConfig(num_layers=layers),
    )
    result = rl.train(
        sac_cfg, cfg.env_config(), cfg.prior_spec(), frozen, seed, _resolve_out(out)
    )
    click.echo(
        f"policy checkpoint: {result.checkpoint_path} "
        f"(best held-out return {result.best_heldout_return:.3f})"
    )


@main.command("evaluate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", default="eval", show_default=True)
@handle_errors
def evaluate_cmd(config_path, out):
    """Evaluate the configured policies on paired test environments."""
    cfg = harness.load_config(config_path)
    report = harness.evaluate(cfg)
    csv_path = harness.emit_report(report, _resolve_out(out))
    click.echo(f"report: {csv_path}")


@main.command("suite")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--name", default="all", show_default=True)
@click.option("--out", default="suites", show_default=True)
@handle_errors
def suite_cmd(config_path, name, out):
    """Run one named distribution-shift suite, or all of them."""
    base = harness.load_config(config_path)
    names = harness.suite_names() if name == "all" else [name]
    out_dir = _resolve_out(out)
    for suite_name in names:
        resolved, _ = harness.run_suite(base, suite_name, out_dir)
        click.echo(f"{suite_name}: done (domain={resolved.domain}, d={resolved.d})")


@main.command("simulate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--n", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--targets", default="", help="comma-separated variable indices")
@click.option("--out", default="data", show_default=True)
@handle_errors
def simulate_cmd(config_path, n, seed, targets, out):
    """Sample a hidden model and export one dataset plus its graph."""
    cfg = harness.load_config(config_path)
    model = sample_model(cfg.prior_spec(), seed)
    d = cfg.d
    mask = np.zeros(d, dtype=np.int8)
    if targets:
        for idx in targets.split(","):
            mask[int(idx)] = 1
    if mask.any():
        values = np.where(mask, cfg.value_amplitude, 0.0)
        intervention = Intervention(cfg.resolved_intervention_kind(), mask, values)
    else:
        intervention = Intervention.observational(d)
    out_dir = _resolve_out(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 1])
    descriptor = {
        "d": d,
        "seed": seed,
        "prior": {"graph_kind": cfg.graph_kind, "expected_in_degree": cfg.expected_in_degree},
        "intervention": intervention.to_json(),
    }
    if cfg.domain == DOMAIN_SERGIO:
        from .sergio import apply_technical_noise, platform_noise, steady_state_expression

        clean = steady_state_expression(
            model.adjacency, model.mechanism, intervention, n, rng, cfg.env_config().grid
        )
        counts, _ = apply_technical_noise(clean, platform_noise(cfg.platform), rng)
        export_counts(counts, out_dir / "counts.csv", {**descriptor, "platform": cfg.platform, "n": n})
    else:
        from .scm import simulate

        data = simulate(model.adjacency, model.mechanism, intervention, n, rng)
        export_dataset(data, out_dir / "data.csv", descriptor)
    export_edge_list(model.adjacency, out_dir / "graph.txt")
    click.echo(f"dataset written under {out_dir}")


@main.command("replay")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--posterior", "posterior_path", required=True, type=click.Path(exists=True))
@click.option("--index", default=0, show_default=True)
@handle_errors
def replay_cmd(config_path, records_path, posterior_path, index):
    """Re-run a logged episode from its model seed and action log."""
    cfg = harness.load_config(config_path)
    frozen = posterior_mod.load_posterior(posterior_path)
    records = read_episode_records(records_path)
    if not 0 <= index < len(records):
        raise ConfigError(f"record index {index} out of range (have {len(records)})")
    record = records[index]
    env = DesignEnv(
        sample_model(cfg.prior_spec(), record.env_seed),
        cfg.env_config(),
        frozen,
        seed=record.env_seed,
    )
    env.reset()
    click.echo(f"t=0 score={env.current_score():.4f}")
    max_drift = 0.0
    for step in record.steps:
        _, reward = env.step(np.asarray(step.raw_action))
        drift = abs(reward - step.reward)
        max_drift = max(max_drift, drift)
        targets = ",".join(str(i) for i in np.flatnonzero(np.asarray(step.decoded["targets"])))
        click.echo(
            f"t={step.t} targets=[{targets}] reward={reward:+.4f} "
            f"score={env.current_score():.4f}"
        )
    click.echo(f"max reward drift vs log: {max_drift:.2e}")


if __name__ == "__main__":
    main()
