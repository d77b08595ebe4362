"""Causal graph priors and linear structural models.

Graphs are sampled from Erdős–Rényi or scale-free (preferential attachment)
priors, mechanisms are linear with Gaussian or Gumbel additive noise and an
optional heteroskedastic random-Fourier-feature noise field.  Coefficients
and noise scales are rescaled so every variable has marginal variance 1,
which keeps downstream structure learning insensitive to raw data scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, SimulatorMismatchError
from .interventions import KIND_DO, KIND_NONE, KIND_SHIFT, Intervention

GRAPH_ERDOS_RENYI = "erdos-renyi"
GRAPH_SCALE_FREE = "scale-free"

NOISE_GAUSSIAN = "gaussian"
NOISE_GUMBEL = "gumbel"

# Sample count for Monte-Carlo variance normalization when the analytic
# (linear-Gaussian) route does not apply.
_MC_NORMALIZATION_SAMPLES = 2048

RFF_NUM_FEATURES = 100
RFF_LENGTH_SCALE = 10.0
RFF_OUTPUT_SCALE = 2.0


@dataclass(frozen=True)
class Adjacency:
    """A DAG on d nodes: entries[i, j] = 1 means an edge i -> j."""

    d: int
    entries: np.ndarray
    topo_order: np.ndarray  # node ids, parents listed before children

    def __post_init__(self):
        object.__setattr__(self, "entries", np.asarray(self.entries, dtype=np.int8))
        object.__setattr__(self, "topo_order", np.asarray(self.topo_order, dtype=np.int64))

    def parents(self, node: int) -> np.ndarray:
        return np.flatnonzero(self.entries[:, node])

    def num_edges(self) -> int:
        return int(self.entries.sum())

    def permuted(self, perm: np.ndarray) -> "Adjacency":
        """Relabel node i as perm[i]."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(self.d)
        return Adjacency(
            d=self.d,
            entries=self.entries[np.ix_(inv, inv)],
            topo_order=perm[self.topo_order],
        )


@dataclass(frozen=True)
class GraphPrior:
    kind: str = GRAPH_ERDOS_RENYI
    expected_in_degree: float = 3.0

    def __post_init__(self):
        if self.kind not in (GRAPH_ERDOS_RENYI, GRAPH_SCALE_FREE):
            raise ConfigError(f"unknown graph prior kind {self.kind!r}")
        if self.expected_in_degree <= 0:
            raise ConfigError("expected_in_degree must be positive")


@dataclass
class RffNoiseField:
    """Per-variable random feature functions g_i over the variable's parents.

    The produced noise scale is softplus(g_i(parents)), hence strictly positive.
    Frequencies follow a squared-exponential spectral density.
    """

    frequencies: list  # per variable: (m, n_parents) array
    phases: list  # per variable: (m,) array
    weights: list  # per variable: (m,) array
    length_scale: float = RFF_LENGTH_SCALE
    output_scale: float = RFF_OUTPUT_SCALE

    def raw(self, node: int, parent_values: np.ndarray) -> np.ndarray:
        """g_i evaluated on rows of parent_values (n, n_parents)."""
        omega = self.frequencies[node]
        m = omega.shape[0]
        if omega.shape[1] == 0:
            proj = np.zeros((parent_values.shape[0], m))
        else:
            proj = parent_values @ omega.T
        feats = np.cos(proj + self.phases[node])
        return self.output_scale * np.sqrt(2.0 / m) * (feats @ self.weights[node])

    def scale(self, node: int, parent_values: np.ndarray) -> np.ndarray:
        return _softplus(self.raw(node, parent_values))


@dataclass
class LinearMechanism:
    """Linear SCM parameters: theta[j, i] is the weight of parent j into child i."""

    theta: np.ndarray
    noise_kind: str = NOISE_GAUSSIAN
    noise_scales: np.ndarray = field(default=None)  # type: ignore[assignment]
    heteroskedastic: Optional[RffNoiseField] = None
    mean_shift: float = 0.0


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_dag(d: int, prior: GraphPrior, seed) -> Adjacency:
    """Sample a DAG with d nodes from the given prior.

    Erdős–Rényi: under a uniformly random topological order, each admissible
    ordered pair is an edge independently with p = min(1, k_in*d / C(d, 2)),
    so the expected edge total is k_in*d (before clamping).

    Scale-free: preferential attachment adding round(k_in) edges per new
    node, oriented from earlier-attached to later-attached, followed by a
    random relabeling of the nodes.
    """
    if d < 1:
        raise ConfigError(f"invalid dimension d={d}; need d >= 1")
    rng = _as_rng(seed)
    order = rng.permutation(d)
    entries = np.zeros((d, d), dtype=np.int8)
    if d == 1:
        return Adjacency(d=1, entries=entries, topo_order=order)

    if prior.kind == GRAPH_ERDOS_RENYI:
        n_pairs = d * (d - 1) / 2
        p = min(1.0, prior.expected_in_degree * d / n_pairs)
        upper = np.triu(rng.random((d, d)) < p, k=1)
        for a, b in zip(*np.nonzero(upper)):
            entries[order[a], order[b]] = 1
        return Adjacency(d=d, entries=entries, topo_order=order)

    # Scale-free: preferential attachment in attachment order 0..d-1, with
    # round(k_in) edges per arriving node.  Each attachment target is drawn
    # proportionally to its current degree (via the repeated-nodes pool).
    m = max(1, min(int(round(prior.expected_in_degree)), d - 1))
    attached_edges = []
    degree_pool: list[int] = []  # node repeated once per incident edge
    targets = list(range(m))
    for t in range(m, d):
        for u in targets:
            attached_edges.append((u, t))
        degree_pool.extend(targets)
        degree_pool.extend([t] * m)
        chosen: set[int] = set()
        while len(chosen) < m:
            chosen.add(int(degree_pool[rng.integers(len(degree_pool))]))
        targets = sorted(chosen)
    relabel = rng.permutation(d)
    for u, t in attached_edges:
        entries[relabel[u], relabel[t]] = 1
    return Adjacency(d=d, entries=entries, topo_order=relabel[np.arange(d)])


def _sample_rff_field(adj: Adjacency, rng: np.random.Generator) -> RffNoiseField:
    freqs, phases, weights = [], [], []
    for i in range(adj.d):
        n_par = len(adj.parents(i))
        freqs.append(rng.normal(0.0, 1.0 / RFF_LENGTH_SCALE, size=(RFF_NUM_FEATURES, n_par)))
        phases.append(rng.uniform(0.0, 2.0 * np.pi, size=RFF_NUM_FEATURES))
        weights.append(rng.normal(0.0, 1.0, size=RFF_NUM_FEATURES))
    return RffNoiseField(frequencies=freqs, phases=phases, weights=weights)


def sample_linear_mechanism(
    adj: Adjacency,
    mean_shift: float = 0.0,
    noise_kind: str = NOISE_GAUSSIAN,
    heteroskedastic: bool = False,
    seed=None,
) -> LinearMechanism:
    """Draw coefficients and noise scales, then normalize marginal variances to 1.

    Raw coefficients are Normal(mean_shift, 1) on edges and raw noise scales
    follow InvGamma(10, 1).  In topological order each variable's incoming
    coefficients and noise scale are jointly rescaled by 1/sqrt(marginal
    variance): analytically (full ancestral covariance) in the
    linear-Gaussian homoskedastic case, via a Monte-Carlo estimate otherwise.
    """
    if noise_kind not in (NOISE_GAUSSIAN, NOISE_GUMBEL):
        raise ConfigError(f"unknown noise kind {noise_kind!r}")
    rng = _as_rng(seed)
    d = adj.d
    theta = np.zeros((d, d))
    mask = adj.entries.astype(bool)
    theta[mask] = rng.normal(mean_shift, 1.0, size=int(mask.sum()))
    # InvGamma(10, 1) noise scale; the variance rescaling below absorbs it.
    sigma = 1.0 / rng.gamma(shape=10.0, scale=1.0, size=d)
    rff = _sample_rff_field(adj, rng) if heteroskedastic else None

    if noise_kind == NOISE_GAUSSIAN and rff is None:
        _normalize_analytic(adj, theta, sigma)
    else:
        _normalize_monte_carlo(adj, theta, sigma, noise_kind, rff, rng)

    return LinearMechanism(
        theta=theta,
        noise_kind=noise_kind,
        noise_scales=sigma,
        heteroskedastic=rff,
        mean_shift=mean_shift,
    )


def _normalize_analytic(adj: Adjacency, theta: np.ndarray, sigma: np.ndarray) -> None:
    """In-place rescaling so Var(y_i) = 1 exactly (linear-Gaussian case)."""
    d = adj.d
    cov = np.zeros((d, d))
    done: list[int] = []
    for i in adj.topo_order:
        pa = adj.parents(i)
        if len(pa):
            var = theta[pa, i] @ cov[np.ix_(pa, pa)] @ theta[pa, i] + sigma[i] ** 2
        else:
            var = sigma[i] ** 2
        s = np.sqrt(var)
        theta[pa, i] /= s
        sigma[i] /= s
        cov[i, i] = 1.0
        if done and len(pa):
            cross = theta[pa, i] @ cov[np.ix_(pa, done)]
            cov[i, done] = cross
            cov[done, i] = cross
        done.append(int(i))


def _normalize_monte_carlo(
    adj: Adjacency,
    theta: np.ndarray,
    sigma: np.ndarray,
    noise_kind: str,
    rff: Optional[RffNoiseField],
    rng: np.random.Generator,
) -> None:
    """In-place rescaling with a sampled variance estimate, in topological order."""
    n = _MC_NORMALIZATION_SAMPLES
    x = np.zeros((n, adj.d))
    for i in adj.topo_order:
        pa = adj.parents(i)
        if noise_kind == NOISE_GUMBEL:
            eps = rng.gumbel(0.0, 1.0, size=n)
        else:
            eps = rng.standard_normal(n)
        noise = sigma[i] * eps
        if rff is not None:
            noise = noise * rff.scale(i, x[:, pa])
        y = x[:, pa] @ theta[pa, i] + noise
        s = np.sqrt(y.var())
        theta[pa, i] /= s
        sigma[i] /= s
        x[:, i] = y / s


def marginal_covariance(theta: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Closed-form covariance of the linear-Gaussian SCM: used as a test oracle."""
    d = theta.shape[0]
    inv = np.linalg.inv(np.eye(d) - theta.T)
    return inv @ np.diag(sigma**2) @ inv.T


def simulate(
    adj: Adjacency,
    mech: LinearMechanism,
    intervention: Intervention,
    n: int,
    seed,
) -> np.ndarray:
    """Ancestral sampling of n rows under an optional do/shift intervention.

    Do targets bypass mechanism and noise entirely; shift targets add the
    intervention value to the mechanism output before noise.
    """
    if intervention.kind not in (KIND_NONE, KIND_DO, KIND_SHIFT):
        raise SimulatorMismatchError(
            f"linear SCM cannot execute a {intervention.kind!r} intervention"
        )
    rng = _as_rng(seed)
    d = adj.d
    is_target = intervention.targets.astype(bool)
    x = np.zeros((n, d))
    for i in adj.topo_order:
        if intervention.kind == KIND_DO and is_target[i]:
            x[:, i] = intervention.values[i]
            continue
        pa = adj.parents(i)
        mean = x[:, pa] @ mech.theta[pa, i] if len(pa) else np.zeros(n)
        if intervention.kind == KIND_SHIFT and is_target[i]:
            mean = mean + intervention.values[i]
        if mech.noise_kind == NOISE_GUMBEL:
            eps = rng.gumbel(0.0, 1.0, size=n)
        else:
            eps = rng.standard_normal(n)
        noise = mech.noise_scales[i] * eps
        if mech.heteroskedastic is not None:
            noise = noise * mech.heteroskedastic.scale(i, x[:, pa])
        x[:, i] = mean + noise
    return x


def export_dataset(
    data: np.ndarray,
    path: Path,
    descriptor: dict,
) -> None:
    """Write a data matrix as CSV (header x0..x{d-1}) with a JSON sidecar."""
    path = Path(path)
    d = data.shape[1]
    header = ",".join(f"x{i}" for i in range(d))
    np.savetxt(path, data, delimiter=",", header=header, comments="")
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(descriptor, fh, indent=2, sort_keys=True)


def export_edge_list(adj: Adjacency, path: Path) -> None:
    """Write the graph as one 'i j' pair per line."""
    with open(path, "w") as fh:
        for i, j in zip(*np.nonzero(adj.entries)):
            fh.write(f"{i} {j}\n")


def load_edge_list(path: Path, d: int) -> Adjacency:
    entries = np.zeros((d, d), dtype=np.int8)
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        i, j = (int(tok) for tok in line.split())
        entries[i, j] = 1
    return Adjacency(d=d, entries=entries, topo_order=topological_order(entries))


def topological_order(entries: np.ndarray) -> np.ndarray:
    """Kahn's algorithm; raises on cycles.  Used as the acyclicity check."""
    d = entries.shape[0]
    indeg = entries.sum(axis=0).astype(int)
    ready = sorted(np.flatnonzero(indeg == 0).tolist())
    order = []
    while ready:
        u = ready.pop(0)
        order.append(u)
        for v in np.flatnonzero(entries[u]):
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(int(v))
    if len(order) != d:
        raise ValueError("graph has a cycle; topological sort failed")
    return np.asarray(order, dtype=np.int64)
