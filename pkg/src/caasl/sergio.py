"""Single-cell gene-expression simulation for a given regulatory network.

Clean mRNA concentrations come from the steady state of a Langevin equation
with Hill-function regulation, integrated per cell with Euler–Maruyama.
Gene knockouts clamp a gene's concentration at zero, knockdowns halve it at
every integration step.  A technical-noise pipeline (outlier genes, library
size, dropout, Poisson counting) turns concentrations into platform-like
count matrices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, SimulatorMismatchError
from .interventions import (
    KIND_KNOCKDOWN,
    KIND_KNOCKOUT,
    KIND_NONE,
    Intervention,
)
from .scm import Adjacency, _as_rng

NUM_CELL_TYPES = 5
DECAY_RATE = 0.8
HILL_COEFF = 1.0
SYSTEM_NOISE_SCALE = 1.0


@dataclass
class GrnMechanism:
    """Regulatory-network parameters for the expression simulator.

    interaction_strength[j, i] > 0 is the magnitude of regulator j's effect on
    gene i; sign[j, i] in {-1, +1} encodes promotion vs repression.  Basal
    transcription rates are defined per cell type for master regulators
    (zero in-degree genes) and zero elsewhere.
    """

    interaction_strength: np.ndarray  # (d, d), nonzero only on edges
    sign: np.ndarray  # (d, d) in {-1, +1} on edges
    basal_rates: np.ndarray  # (cell_types, d)
    decay: float = DECAY_RATE
    hill_coeff: float = HILL_COEFF
    noise_scale: float = SYSTEM_NOISE_SCALE
    cell_types: int = NUM_CELL_TYPES


@dataclass(frozen=True)
class SimGrid:
    """Integration grid: Euler–Maruyama step size, burn-in, sampling window."""

    dt: float = 0.01
    burn_in_steps: int = 1000
    sample_steps: int = 500


@dataclass(frozen=True)
class TechnicalNoise:
    p_outlier: float
    outlier_lognormal: tuple  # (mu, sigma)
    library_lognormal: tuple  # (mu, sigma)
    dropout_percentile: float
    dropout_temperature: float

    def __post_init__(self):
        if not 0.0 <= self.dropout_percentile <= 100.0:
            raise ConfigError("dropout percentile must lie in [0, 100]")
        if self.dropout_temperature <= 0:
            raise ConfigError("dropout temperature must be positive")


# Technical-noise presets for the two sequencing platforms.
PLATFORMS = {
    "chromium-10x": TechnicalNoise(
        p_outlier=0.01,
        outlier_lognormal=(3.0, 1.0),
        library_lognormal=(6.0, 0.3),
        dropout_percentile=74.0,
        dropout_temperature=8.0,
    ),
    "drop-seq": TechnicalNoise(
        p_outlier=0.01,
        outlier_lognormal=(3.0, 1.0),
        library_lognormal=(4.4, 0.8),
        dropout_percentile=85.0,
        dropout_temperature=8.0,
    ),
}


def platform_noise(name: str) -> TechnicalNoise:
    try:
        return PLATFORMS[name]
    except KeyError:
        raise ConfigError(
            f"unknown platform {name!r}; available: {sorted(PLATFORMS)}"
        ) from None


@dataclass(frozen=True)
class NoisyInterventionConfig:
    """Execution noise for knockouts: the requested design is modified with
    probability flip_probability, either missing the target or hitting an
    off-target gene."""

    flip_probability: float = 0.10

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError("flip_probability must lie in [0, 1]")


def sample_grn_mechanism(adj: Adjacency, seed, cell_types: int = NUM_CELL_TYPES) -> GrnMechanism:
    """Draw interaction strengths, signs and per-cell-type basal rates.

    |k| ~ Uniform(1, 5) on edges; the promote/repress sign is Bernoulli(p_k)
    per edge with p_k ~ Beta(0.5, 0.5) drawn once per network; basal rates
    are Uniform(1, 3) per (cell type, master regulator).
    """
    rng = _as_rng(seed)
    d = adj.d
    mask = adj.entries.astype(bool)
    strength = np.zeros((d, d))
    strength[mask] = rng.uniform(1.0, 5.0, size=int(mask.sum()))
    p_promote = rng.beta(0.5, 0.5)
    sign = np.ones((d, d))
    sign[mask] = np.where(rng.random(int(mask.sum())) < p_promote, 1.0, -1.0)
    basal = np.zeros((cell_types, d))
    masters = np.flatnonzero(adj.entries.sum(axis=0) == 0)
    basal[:, masters] = rng.uniform(1.0, 3.0, size=(cell_types, len(masters)))
    return GrnMechanism(
        interaction_strength=strength,
        sign=sign,
        basal_rates=basal,
        cell_types=cell_types,
    )


def _half_response(adj: Adjacency, mech: GrnMechanism) -> tuple[np.ndarray, np.ndarray]:
    """Half-response constants and per-cell-type mean estimates, propagated
    analytically in topological order with mean ~ production / decay."""
    c, d = mech.basal_rates.shape
    mu = np.zeros((c, d))
    half = np.zeros(d)
    for i in adj.topo_order:
        pa = adj.parents(i)
        if len(pa) == 0:
            prod = mech.basal_rates[:, i]
        else:
            prod = np.zeros(c)
            for j in pa:
                hill = _hill(mu[:, j], half[j], mech.hill_coeff)
                if mech.sign[j, i] > 0:
                    prod = prod + mech.interaction_strength[j, i] * hill
                else:
                    prod = prod + mech.interaction_strength[j, i] * (1.0 - hill)
        mu[:, i] = prod / mech.decay
        half[i] = max(float(mu[:, i].mean()), 1e-8)
    return half, mu


def _hill(x: np.ndarray, half: float, coeff: float) -> np.ndarray:
    xg = np.maximum(x, 0.0) ** coeff
    return xg / (half**coeff + xg + 1e-12)


def _split_cells(n: int, cell_types: int) -> np.ndarray:
    """Cell-type label per cell, splitting n as evenly as possible."""
    base = n // cell_types
    counts = np.full(cell_types, base)
    counts[: n % cell_types] += 1
    return np.repeat(np.arange(cell_types), counts)


def steady_state_expression(
    adj: Adjacency,
    mech: GrnMechanism,
    intervention: Intervention,
    n: int,
    seed,
    grid: SimGrid = SimGrid(),
) -> np.ndarray:
    """Simulate clean mRNA concentrations for n cells (n x d, nonnegative).

    Each cell follows its own Langevin trajectory
    dx = (production(x) - decay * x) dt + noise_scale * sqrt(production) dW,
    with production from basal rates (master regulators) or Hill-modulated
    parent contributions.  Cells are read out at uniformly random steps after
    burn-in.  Knockout clamps the target's concentration to 0 at every step;
    knockdown multiplies it by 0.5 at every step.
    """
    if intervention.kind not in (KIND_NONE, KIND_KNOCKOUT, KIND_KNOCKDOWN):
        raise SimulatorMismatchError(
            f"expression simulator cannot execute a {intervention.kind!r} intervention"
        )
    if n < 1:
        raise ConfigError("need at least one cell")
    rng = _as_rng(seed)
    d = adj.d

    # Fewer cells than cell types: simulate one per type, subsample.
    n_sim = max(n, mech.cell_types)
    cell_type = _split_cells(n_sim, mech.cell_types)

    half, mu = _half_response(adj, mech)
    ko_mask = (intervention.targets.astype(bool)) & (intervention.kind == KIND_KNOCKOUT)
    kd_mask = (intervention.targets.astype(bool)) & (intervention.kind == KIND_KNOCKDOWN)

    basal_cell = mech.basal_rates[cell_type]  # (n_sim, d)
    masters = adj.entries.sum(axis=0) == 0
    act = np.where(mech.sign > 0, mech.interaction_strength, 0.0)
    rep = np.where(mech.sign < 0, mech.interaction_strength, 0.0)

    x = mu[cell_type].copy()
    x[:, ko_mask] = 0.0

    sample_at = rng.integers(0, grid.sample_steps, size=n_sim)
    out = np.zeros((n_sim, d))
    total = grid.burn_in_steps + grid.sample_steps
    sqrt_dt = np.sqrt(grid.dt)
    half_pow = half**mech.hill_coeff
    for step in range(total):
        xg = np.maximum(x, 0.0) ** mech.hill_coeff
        h = xg / (half_pow + xg + 1e-12)
        prod = h @ act + (1.0 - h) @ rep
        prod[:, masters] = basal_cell[:, masters]
        prod = np.maximum(prod, 0.0)
        dw = rng.standard_normal(x.shape) * sqrt_dt
        x = x + (prod - mech.decay * x) * grid.dt + mech.noise_scale * np.sqrt(prod) * dw
        np.maximum(x, 0.0, out=x)
        if ko_mask.any():
            x[:, ko_mask] = 0.0
        if kd_mask.any():
            x[:, kd_mask] *= 0.5
        post = step - grid.burn_in_steps
        if post >= 0:
            hit = sample_at == post
            if hit.any():
                out[hit] = x[hit]

    if n_sim > n:
        keep = rng.choice(n_sim, size=n, replace=False)
        out = out[keep]
    return out


def apply_technical_noise(
    clean: np.ndarray,
    noise: TechnicalNoise,
    seed,
) -> tuple[np.ndarray, np.ndarray]:
    """Measurement pipeline: outlier genes, library size, dropout, Poisson.

    Returns (counts, keep_mask): counts is an integer matrix, keep_mask is
    0 where an entry was dropped out and 1 otherwise.
    """
    clean = np.asarray(clean, dtype=float)
    if (clean < 0).any():
        raise ConfigError("clean expression must be nonnegative")
    rng = _as_rng(seed)
    n, d = clean.shape
    x = clean.copy()

    # 1. Outlier genes: whole-column scaling by a log-normal factor.
    is_outlier = rng.random(d) < noise.p_outlier
    factors = rng.lognormal(*noise.outlier_lognormal, size=d)
    x[:, is_outlier] *= factors[is_outlier]

    # 2. Library size: each cell's total concentration is set to its factor.
    lib = rng.lognormal(*noise.library_lognormal, size=n)
    row_sum = x.sum(axis=1)
    nonzero = row_sum > 0
    x[nonzero] *= (lib[nonzero] / row_sum[nonzero])[:, None]

    # 3. Dropout: keep probability is a logistic in log(1+x) centered at the
    #    requested percentile of the whole matrix.  Percentile 0 disables it.
    if noise.dropout_percentile > 0:
        logx = np.log1p(x)
        midpoint = np.percentile(logx, noise.dropout_percentile)
        keep_prob = 1.0 / (1.0 + np.exp(-noise.dropout_temperature * (logx - midpoint)))
        keep_mask = rng.random(x.shape) < keep_prob
        x = x * keep_mask
    else:
        keep_mask = np.ones(x.shape, dtype=bool)

    # 4. Counts.
    counts = rng.poisson(x)
    return counts.astype(np.int64), keep_mask.astype(np.int8)


def perturb_intervention(
    requested: Intervention,
    cfg: NoisyInterventionConfig,
    seed,
) -> Intervention:
    """With probability flip_probability, modify a knockout: either a random
    active target is missed (bit off) or a random off-target gene is hit
    (bit on), chosen uniformly."""
    if requested.kind != KIND_KNOCKOUT:
        raise ConfigError("noisy execution is defined for knockout interventions")
    rng = _as_rng(seed)
    if rng.random() >= cfg.flip_probability:
        return requested
    targets = requested.targets.copy()
    active = np.flatnonzero(targets)
    inactive = np.flatnonzero(targets == 0)
    miss = rng.random() < 0.5
    if (miss and len(active)) or len(inactive) == 0:
        targets[active[rng.integers(len(active))]] = 0
    elif len(inactive):
        targets[inactive[rng.integers(len(inactive))]] = 1
    return replace(requested, targets=targets)


def export_counts(
    counts: np.ndarray,
    path: Path,
    descriptor: dict,
) -> None:
    """Write a count matrix as integer CSV with a JSON sidecar."""
    path = Path(path)
    d = counts.shape[1]
    header = ",".join(f"x{i}" for i in range(d))
    np.savetxt(path, counts, fmt="%d", delimiter=",", header=header, comments="")
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(descriptor, fh, indent=2, sort_keys=True)
