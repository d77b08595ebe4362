"""Hidden-model priors and the shared observation pipeline.

A design environment's hidden parameters are one draw from these priors:
a graph plus mechanism parameters for either the linear-SCM domain or the
gene-expression domain.  The same sampling and row-simulation code feeds the
environment, posterior training and the evaluation harness, so all of them
see identical data distributions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import scm, sergio
from .errors import ConfigError
from .interventions import Intervention
from .scm import Adjacency, GraphPrior, LinearMechanism
from .sergio import GrnMechanism, SimGrid, TechnicalNoise

DOMAIN_SYNTHETIC = "synthetic"
DOMAIN_SERGIO = "sergio"

STD_ZSCORE = "zscore-from-h0"
STD_LOG1P_ZSCORE = "log1p-zscore-from-h0"
STD_NONE = "none"


@dataclass(frozen=True)
class PriorSpec:
    """Distribution over hidden models for one environment domain."""

    domain: str = DOMAIN_SYNTHETIC
    d: int = 10
    graph: GraphPrior = field(default_factory=GraphPrior)
    # Linear-SCM options.
    mechanism_mean: float = 0.0
    noise_kind: str = scm.NOISE_GAUSSIAN
    heteroskedastic: bool = False
    # Gene-expression options.
    cell_types: int = sergio.NUM_CELL_TYPES

    def __post_init__(self):
        if self.domain not in (DOMAIN_SYNTHETIC, DOMAIN_SERGIO):
            raise ConfigError(f"unknown domain {self.domain!r}")
        if self.d < 1:
            raise ConfigError("d must be at least 1")


@dataclass(frozen=True)
class HiddenModel:
    """One prior draw: the causal graph plus its mechanism parameters."""

    domain: str
    adjacency: Adjacency
    mechanism: Union[LinearMechanism, GrnMechanism]
    seed: int

    @property
    def d(self) -> int:
        return self.adjacency.d

    def descriptor(self) -> dict:
        theta = getattr(self.mechanism, "theta", None)
        if theta is None:
            theta = self.mechanism.interaction_strength * self.mechanism.sign
        return {
            "domain": self.domain,
            "seed": int(self.seed),
            "d": self.d,
            "edges": int(self.adjacency.num_edges()),
            "mean_abs_coefficient": float(np.abs(theta).sum() / max(1, self.adjacency.num_edges())),
        }


def sample_model(prior: PriorSpec, seed: int) -> HiddenModel:
    rng = np.random.default_rng([int(seed), 0x5EED])
    adj = scm.sample_dag(prior.d, prior.graph, rng)
    if prior.domain == DOMAIN_SYNTHETIC:
        mech = scm.sample_linear_mechanism(
            adj,
            mean_shift=prior.mechanism_mean,
            noise_kind=prior.noise_kind,
            heteroskedastic=prior.heteroskedastic,
            seed=rng,
        )
    else:
        mech = sergio.sample_grn_mechanism(adj, rng, cell_types=prior.cell_types)
    return HiddenModel(domain=prior.domain, adjacency=adj, mechanism=mech, seed=int(seed))


@dataclass(frozen=True)
class ObservationSpec:
    """How raw simulator output becomes recorded observations."""

    platform: Optional[TechnicalNoise] = None  # gene-expression domain only
    grid: SimGrid = field(default_factory=SimGrid)


def simulate_rows(
    model: HiddenModel,
    intervention: Intervention,
    n: int,
    rng: np.random.Generator,
    obs: ObservationSpec = ObservationSpec(),
) -> np.ndarray:
    """n recorded observation rows under one intervention (n, d)."""
    if model.domain == DOMAIN_SYNTHETIC:
        return scm.simulate(model.adjacency, model.mechanism, intervention, n, rng)
    clean = sergio.steady_state_expression(
        model.adjacency, model.mechanism, intervention, n, rng, grid=obs.grid
    )
    platform = obs.platform if obs.platform is not None else sergio.platform_noise("chromium-10x")
    counts, _ = sergio.apply_technical_noise(clean, platform, rng)
    return counts.astype(float)


class Standardizer:
    """Column statistics frozen from initial data; applied to every later row.

    Dropout zeros stay zeros through log1p and are then shifted like any
    other value, so missingness keeps a consistent encoding.
    """

    def __init__(self, kind: str):
        if kind not in (STD_ZSCORE, STD_LOG1P_ZSCORE, STD_NONE):
            raise ConfigError(f"unknown standardization {kind!r}")
        self.kind = kind
        self.mean: Optional[np.ndarray] = None
        self.std: Optional[np.ndarray] = None

    def fit(self, rows: np.ndarray) -> "Standardizer":
        if self.kind == STD_NONE:
            return self
        if rows.shape[0] == 0:
            warnings.warn(
                "no initial rows to fit standardization; falling back to identity",
                stacklevel=2,
            )
            self.kind = STD_NONE
            return self
        vals = np.log1p(rows) if self.kind == STD_LOG1P_ZSCORE else rows
        self.mean = vals.mean(axis=0)
        self.std = np.maximum(vals.std(axis=0), 1e-8)
        return self

    def transform(self, rows: np.ndarray) -> np.ndarray:
        if self.kind == STD_NONE:
            return np.asarray(rows, dtype=float)
        vals = np.log1p(rows) if self.kind == STD_LOG1P_ZSCORE else np.asarray(rows, dtype=float)
        return (vals - self.mean) / self.std


def default_standardization(domain: str) -> str:
    return STD_LOG1P_ZSCORE if domain == DOMAIN_SERGIO else STD_ZSCORE


def ood_variants(prior: PriorSpec) -> dict[str, PriorSpec]:
    """Named prior shifts used by the evaluation suites (graph/mechanism/noise)."""
    scale_free = replace(prior, graph=replace(prior.graph, kind=scm.GRAPH_SCALE_FREE))
    return {
        "graph": scale_free,
        "graph-mech": replace(scale_free, mechanism_mean=0.1),
        "graph-mech-noise": replace(
            scale_free, mechanism_mean=0.1, noise_kind=scm.NOISE_GUMBEL
        ),
        "heteroskedastic": replace(prior, heteroskedastic=True),
    }
