"""Amortized graph posterior: training by maximum likelihood on simulated
datasets, the graph-accuracy scores used as rewards, and structure-learning
metrics (expected SHD, edge F1, AUPRC).

The posterior network maps a dataset straight to independent-Bernoulli edge
probabilities; it is trained here at desk scale on the same priors the design
environments use, then frozen for policy training.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import numerics
from .errors import ConfigError, NumericalError
from .interventions import KIND_DO, KIND_KNOCKOUT, Intervention
from .nets import AltAttentionConfig, PosteriorNet, edge_probabilities
from .priors import (
    DOMAIN_SYNTHETIC,
    ObservationSpec,
    PriorSpec,
    Standardizer,
    default_standardization,
    sample_model,
    simulate_rows,
)

PROB_CLAMP = 1e-6


def _entries(adjacency) -> np.ndarray:
    return np.asarray(getattr(adjacency, "entries", adjacency), dtype=float)


def expected_correct_entries(probs: np.ndarray, adjacency) -> float:
    """Expected number of correctly predicted adjacency entries.

    Closed form for an independent-Bernoulli posterior: sums p where an edge
    exists and 1-p where it does not, over all d^2 entries (the diagonal has
    probability 0 and is therefore always correct).
    """
    a = _entries(adjacency)
    p = np.asarray(probs, dtype=np.float64)
    return float(np.where(a == 1, p, 1.0 - p).sum())


def ba_log_posterior_reward(probs: np.ndarray, adjacency) -> float:
    """Log-likelihood of the true graph under the posterior (off-diagonal),
    with probabilities clamped away from 0 and 1.  An alternative telescoped
    reward that bounds the information gained about the graph."""
    a = _entries(adjacency)
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = np.where(a == 1, np.log(p), np.log(1.0 - p))
    off = ~np.eye(a.shape[0], dtype=bool)
    return float(terms[off].sum())


def sample_graphs(probs: np.ndarray, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Independent-Bernoulli graph samples (n_samples, d, d)."""
    p = np.asarray(probs, dtype=float)
    return (rng.random((n_samples,) + p.shape) < p).astype(np.int8)


def structural_hamming_distance(sample: np.ndarray, truth: np.ndarray) -> int:
    """Additions + deletions, with an opposite-direction pair counting 1."""
    sample = np.asarray(sample)
    truth = np.asarray(truth)
    base = int((sample != truth).sum())
    reversed_pairs = (
        (sample == 1) & (truth == 0) & (sample.T == 0) & (truth.T == 1)
    )
    return base - int(reversed_pairs.sum())


def expected_shd(
    probs: np.ndarray,
    adjacency,
    n_samples: int = 100,
    seed=0,
) -> float:
    """Monte-Carlo estimate of E[SHD] over posterior graph samples."""
    if n_samples < 1:
        raise ConfigError("n_samples must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    truth = _entries(adjacency).astype(np.int8)
    samples = sample_graphs(probs, n_samples, rng)
    return float(
        np.mean([structural_hamming_distance(s, truth) for s in samples])
    )


def edge_f1(probs: np.ndarray, adjacency, threshold: float = 0.5) -> float:
    """F1 of thresholded edge predictions over off-diagonal entries.

    A graph with no true edges scores 1.0 when nothing is predicted and 0.0
    otherwise.
    """
    a = _entries(adjacency)
    off = ~np.eye(a.shape[0], dtype=bool)
    truth = a[off] == 1
    preds = np.asarray(probs, dtype=float)[off] > threshold
    tp = int((preds & truth).sum())
    fp = int((preds & ~truth).sum())
    fn = int((~preds & truth).sum())
    if truth.sum() == 0:
        return 1.0 if preds.sum() == 0 else 0.0
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def auprc(probs: np.ndarray, adjacency) -> float:
    """Area under the precision-recall curve by stepwise integration
    (precision at each recall increment, no trapezoids).

    Returns nan when the true graph has no edges; callers flag such rows
    instead of dropping them.
    """
    a = _entries(adjacency)
    off = ~np.eye(a.shape[0], dtype=bool)
    truth = (a[off] == 1).astype(int)
    scores = np.asarray(probs, dtype=float)[off]
    n_pos = truth.sum()
    if n_pos == 0:
        return math.nan
    order = np.argsort(-scores, kind="stable")
    truth = truth[order]
    scores = scores[order]
    tp = np.cumsum(truth)
    fp = np.cumsum(1 - truth)
    # Evaluate only at the last index of each distinct score (threshold sweep).
    boundary = np.append(scores[1:] != scores[:-1], True)
    tp = tp[boundary]
    fp = fp[boundary]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - recall_prev) * precision).sum())


# ---------------------------------------------------------------------------
# Training.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PosteriorTrainConfig:
    prior: PriorSpec
    d_range: tuple = (None, None)  # inclusive; (None, None) keeps prior.d fixed
    n_range: tuple = (20, 60)  # samples per dataset, inclusive
    interventional_fraction: tuple = (0.0, 0.5)
    datasets_per_batch: int = 8
    steps: int = 2000
    lr: float = 1e-3
    arch: AltAttentionConfig = field(default_factory=AltAttentionConfig)
    value_amplitude: float = 2.0
    observation: ObservationSpec = field(default_factory=ObservationSpec)

    def __post_init__(self):
        if self.n_range[0] < 1 or self.n_range[1] < self.n_range[0]:
            raise ConfigError("invalid n_range")
        if self.steps < 1 or self.datasets_per_batch < 1:
            raise ConfigError("steps and datasets_per_batch must be positive")


def simulate_training_dataset(
    cfg: PosteriorTrainConfig,
    d: int,
    n: int,
    model_seed: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """One (history, adjacency) pair mirroring what design environments emit:
    observational rows first, then single-target interventional rows, all
    standardized with statistics frozen from the observational block."""
    prior = replace(cfg.prior, d=d)
    model = sample_model(prior, model_seed)
    frac = rng.uniform(*cfg.interventional_fraction)
    n_int = min(int(round(frac * n)), n - 1)  # keep at least one observational row
    n_obs = n - n_int

    obs_rows = simulate_rows(model, Intervention.observational(d), n_obs, rng, cfg.observation)
    standardizer = Standardizer(default_standardization(prior.domain)).fit(obs_rows)

    data = np.zeros((n, d, 2), dtype=np.float32)
    data[:n_obs, :, 0] = standardizer.transform(obs_rows)
    for row in range(n_obs, n):
        target = int(rng.integers(d))
        mask = np.zeros(d, dtype=np.int8)
        mask[target] = 1
        values = np.zeros(d)
        if prior.domain == DOMAIN_SYNTHETIC:
            values[target] = rng.uniform(-cfg.value_amplitude, cfg.value_amplitude)
            iv = Intervention(KIND_DO, mask, values)
        else:
            iv = Intervention(KIND_KNOCKOUT, mask, values)
        sample = simulate_rows(model, iv, 1, rng, cfg.observation)
        data[row, :, 0] = standardizer.transform(sample)[0]
        data[row, :, 1] = mask
    return data, model.adjacency.entries.astype(np.float32)


def negative_log_likelihood(logits: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Factorized Bernoulli NLL over off-diagonal entries, averaged over the
    batch of datasets."""
    d = logits.shape[-1]
    off = ~torch.eye(d, dtype=torch.bool, device=logits.device)
    per_entry = torch.nn.functional.binary_cross_entropy_with_logits(
        logits, truth, reduction="none"
    )
    return per_entry[:, off].sum(dim=-1).mean()


def train_posterior(
    cfg: PosteriorTrainConfig,
    seed: int,
    log_path: Optional[Path] = None,
) -> tuple[PosteriorNet, list]:
    """Maximum-likelihood training on freshly simulated datasets.

    Every step simulates a batch of hidden models and datasets from the
    configured prior and minimizes the factorized edge NLL.  Returns the
    trained network and the (step, loss) log.
    """
    rng = numerics.seed_everything(seed)
    net = PosteriorNet(cfg.arch)
    params = numerics.module_params(net)
    opt = numerics.Adam(params, lr=cfg.lr)
    d_lo, d_hi = cfg.d_range
    log: list[tuple[int, float]] = []
    for step in range(cfg.steps):
        d = cfg.prior.d if d_lo is None else int(rng.integers(d_lo, d_hi + 1))
        n = int(rng.integers(cfg.n_range[0], cfg.n_range[1] + 1))
        histories, truths = [], []
        for _ in range(cfg.datasets_per_batch):
            model_seed = int(rng.integers(2**31))
            h, a = simulate_training_dataset(cfg, d, n, model_seed, rng)
            histories.append(h)
            truths.append(a)
        batch = torch.from_numpy(np.stack(histories))
        truth = torch.from_numpy(np.stack(truths))
        logits = net.edge_logits(batch)
        loss = negative_log_likelihood(logits, truth)
        if not torch.isfinite(loss):
            raise NumericalError(f"posterior training diverged at step {step}")
        grads = numerics.gradients(loss, params)
        opt.step(grads)
        log.append((step, float(loss.item())))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(log)
    net.eval()
    return net, log


def held_out_edge_accuracy(
    net: PosteriorNet,
    cfg: PosteriorTrainConfig,
    n_models: int = 200,
    seed: int = 0,
) -> float:
    """Fraction of off-diagonal entries where the thresholded posterior matches
    the true graph, over fresh models."""
    rng = np.random.default_rng([seed, 0xACC])
    correct, total = 0, 0
    for _ in range(n_models):
        d = cfg.prior.d
        n = int(rng.integers(cfg.n_range[0], cfg.n_range[1] + 1))
        h, a = simulate_training_dataset(cfg, d, n, int(rng.integers(2**31)), rng)
        probs = edge_probabilities(net, h)
        off = ~np.eye(d, dtype=bool)
        correct += int(((probs > 0.5) == (a == 1))[off].sum())
        total += int(off.sum())
    return correct / total


# ---------------------------------------------------------------------------
# Persistence.  Checkpoints use the shared binary format under "posterior/",
# with a JSON sidecar describing the architecture.
# ---------------------------------------------------------------------------

def save_posterior(net: PosteriorNet, path) -> None:
    path = Path(path)
    numerics.save_checkpoint(path, numerics.module_params(net, "posterior/"))
    cfg = net.encoder.cfg
    meta = {
        "arch": {
            "num_layers": cfg.num_layers,
            "num_heads": cfg.num_heads,
            "embed_dim": cfg.embed_dim,
            "dropout": cfg.dropout,
        }
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_posterior(path) -> PosteriorNet:
    """Load a frozen posterior: eval mode, gradients disabled."""
    path = Path(path)
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    net = PosteriorNet(AltAttentionConfig(**meta["arch"]))
    numerics.load_module_params(net, numerics.load_checkpoint(path), "posterior/")
    net.eval()
    net.requires_grad_(False)
    return net


def metrics_report_csv(path, rows: list[dict]) -> None:
    """Flat per-step metrics table: step, returns, expected_shd, edge_f1, auprc."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["step", "returns", "expected_shd", "edge_f1", "auprc"]
        )
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in writer.fieldnames})
