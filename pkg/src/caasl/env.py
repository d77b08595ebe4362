"""The intervention-design environment.

State is the interventional history: an (n0+t, d, 2) array of standardized
observations paired with intervention-target indicators.  Raw policy actions
in (-1, 1) are decoded by thresholding the target channel at zero; each step
simulates exactly one interventional sample, appends it, and pays the change
in the posterior's expected number of correct adjacency entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import posterior as posterior_mod
from .errors import ConfigError
from .interventions import (
    KIND_DO,
    KIND_KNOCKDOWN,
    KIND_KNOCKOUT,
    KIND_SHIFT,
    VALUED_KINDS,
    Intervention,
)
from .nets import PosteriorNet, edge_probabilities
from .priors import (
    DOMAIN_SERGIO,
    DOMAIN_SYNTHETIC,
    HiddenModel,
    ObservationSpec,
    Standardizer,
    default_standardization,
    simulate_rows,
)
from .sergio import NoisyInterventionConfig, SimGrid, perturb_intervention, platform_noise


@dataclass(frozen=True)
class History:
    """The MDP state: immutable stack of (observation, target-indicator) rows."""

    data: np.ndarray  # (n0 + t, d, 2) float32
    n0: int
    t: int

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float32))
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ConfigError(f"history must be (rows, d, 2), got {self.data.shape}")
        if self.data.shape[0] != self.n0 + self.t:
            raise ConfigError("history row count must equal n0 + t")

    @property
    def d(self) -> int:
        return int(self.data.shape[1])

    def append(self, observation: np.ndarray, target_mask: np.ndarray) -> "History":
        row = np.stack(
            [
                np.asarray(observation, dtype=np.float32),
                np.asarray(target_mask, dtype=np.float32),
            ],
            axis=-1,
        )[None]
        return History(
            data=np.concatenate([self.data, row], axis=0), n0=self.n0, t=self.t + 1
        )


@dataclass(frozen=True)
class EnvConfig:
    domain: str = DOMAIN_SYNTHETIC
    d: int = 10
    n0: int = 50
    budget: int = 10
    intervention_kind: str = KIND_DO
    value_amplitude: float = 2.0
    noisy_intervention: Optional[NoisyInterventionConfig] = None
    standardization: str = "auto"
    platform: str = "chromium-10x"
    grid: SimGrid = field(default_factory=SimGrid)

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigError("budget must be at least 1")
        if self.n0 < 0:
            raise ConfigError("n0 must be nonnegative")
        synthetic_kinds = (KIND_DO, KIND_SHIFT)
        sergio_kinds = (KIND_KNOCKOUT, KIND_KNOCKDOWN)
        allowed = synthetic_kinds if self.domain == DOMAIN_SYNTHETIC else sergio_kinds
        if self.intervention_kind not in allowed:
            raise ConfigError(
                f"{self.domain} environments execute {allowed}, "
                f"not {self.intervention_kind!r}"
            )

    @property
    def action_channels(self) -> int:
        # Gene perturbations carry no value channel.
        return 1 if self.domain == DOMAIN_SERGIO else 2

    def resolved_standardization(self) -> str:
        if self.standardization == "auto":
            return default_standardization(self.domain)
        return self.standardization

    def observation_spec(self) -> ObservationSpec:
        platform = platform_noise(self.platform) if self.domain == DOMAIN_SERGIO else None
        return ObservationSpec(platform=platform, grid=self.grid)


def decode_action(raw: np.ndarray, cfg: EnvConfig) -> Intervention:
    """Threshold the target channel at zero (strictly) and scale values.

    An empty decode (no entry above zero) yields an observational draw.  Only
    the first channel is consulted for value-free intervention kinds.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim == 1:
        raw = raw[:, None]
    if raw.shape[0] != cfg.d:
        raise ConfigError(f"action has {raw.shape[0]} rows, environment has d={cfg.d}")
    targets = (raw[:, 0] > 0).astype(np.int8)
    if not targets.any():
        return Intervention.observational(cfg.d)
    values = np.zeros(cfg.d)
    if cfg.intervention_kind in VALUED_KINDS:
        if raw.shape[1] < 2:
            raise ConfigError(
                f"{cfg.intervention_kind!r} interventions need a value channel"
            )
        active = targets.astype(bool)
        values[active] = raw[active, 1] * cfg.value_amplitude
    return Intervention(cfg.intervention_kind, targets, values)


def _edge_probs(posterior: PosteriorNet, history: History) -> np.ndarray:
    """Posterior edge probabilities for a history; an empty history (n0 = 0
    before any acquisition) is scored as maximally uncertain (p = 1/2)."""
    if history.data.shape[0] == 0:
        probs = np.full((history.d, history.d), 0.5)
        np.fill_diagonal(probs, 0.0)
        return probs
    return edge_probabilities(posterior, history.data)


def posterior_score(history: History, adjacency, posterior: PosteriorNet) -> float:
    """Expected number of correct adjacency entries under the posterior at h."""
    return posterior_mod.expected_correct_entries(
        _edge_probs(posterior, history), adjacency
    )


@dataclass
class StepRecord:
    t: int
    raw_action: list
    decoded: dict
    executed: dict
    reward: float
    posterior_score: float


@dataclass
class EpisodeRecord:
    model: dict
    env_seed: int
    d: int
    initial_score: float
    steps: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)

    def returns(self, gamma: float = 1.0) -> float:
        return float(sum(gamma**i * s.reward for i, s in enumerate(self.steps)))

    def to_jsonl(self) -> str:
        header = {
            "model": self.model,
            "env_seed": self.env_seed,
            "d": self.d,
            "initial_score": self.initial_score,
            "final_metrics": self.final_metrics,
        }
        lines = [json.dumps(header, sort_keys=True)]
        for s in self.steps:
            lines.append(
                json.dumps(
                    {
                        "t": s.t,
                        "raw_action": s.raw_action,
                        "decoded": s.decoded,
                        "executed": s.executed,
                        "reward": s.reward,
                        "posterior_score": s.posterior_score,
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_jsonl(text: str) -> "EpisodeRecord":
        lines = [json.loads(line) for line in text.strip().splitlines()]
        header, steps = lines[0], lines[1:]
        record = EpisodeRecord(
            model=header["model"],
            env_seed=header["env_seed"],
            d=header["d"],
            initial_score=header["initial_score"],
            final_metrics=header.get("final_metrics", {}),
        )
        record.steps = [StepRecord(**s) for s in steps]
        return record


class DesignEnv:
    """One episode's environment around a fixed hidden model.

    Randomness is derived per step from (seed, step index), so two runs with
    the same seed see identical noise streams until their actions diverge.
    """

    def __init__(
        self,
        model: HiddenModel,
        cfg: EnvConfig,
        posterior: PosteriorNet,
        seed: int,
    ):
        if model.domain != cfg.domain:
            raise ConfigError(
                f"model domain {model.domain!r} != environment domain {cfg.domain!r}"
            )
        if model.d != cfg.d:
            raise ConfigError(f"model has d={model.d}, environment expects d={cfg.d}")
        self.model = model
        self.cfg = cfg
        self.posterior = posterior
        self.seed = int(seed)
        self.obs_spec = cfg.observation_spec()
        self.standardizer: Optional[Standardizer] = None
        self.history: Optional[History] = None
        self._score: Optional[float] = None

    def _rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, step])

    @property
    def t(self) -> int:
        return 0 if self.history is None else self.history.t

    def current_score(self) -> float:
        if self._score is None:
            raise ConfigError("environment must be reset first")
        return self._score

    def reset(self) -> History:
        rng = self._rng(0)
        obs = simulate_rows(
            self.model, Intervention.observational(self.cfg.d), self.cfg.n0, rng, self.obs_spec
        )
        self.standardizer = Standardizer(self.cfg.resolved_standardization()).fit(obs)
        data = np.zeros((self.cfg.n0, self.cfg.d, 2), dtype=np.float32)
        if self.cfg.n0:
            data[:, :, 0] = self.standardizer.transform(obs)
        self.history = History(data=data, n0=self.cfg.n0, t=0)
        self._score = posterior_score(self.history, self.model.adjacency, self.posterior)
        return self.history

    def step(self, raw_action: np.ndarray) -> tuple[History, float]:
        if self.history is None:
            raise ConfigError("environment must be reset before stepping")
        if self.t >= self.cfg.budget:
            raise ConfigError(f"budget of {self.cfg.budget} steps exhausted")
        step_idx = self.t + 1
        rng = self._rng(step_idx)
        decoded = decode_action(raw_action, self.cfg)
        executed = decoded
        if (
            self.cfg.noisy_intervention is not None
            and decoded.kind == KIND_KNOCKOUT
            and decoded.targets.any()
        ):
            executed = perturb_intervention(decoded, self.cfg.noisy_intervention, rng)
        row = simulate_rows(self.model, executed, 1, rng, self.obs_spec)[0]
        # The history records the *requested* targets; execution noise stays hidden.
        self.history = self.history.append(
            self.standardizer.transform(row[None])[0], decoded.targets
        )
        new_score = posterior_score(self.history, self.model.adjacency, self.posterior)
        reward = new_score - self._score
        self._score = new_score
        self._last_decoded = decoded
        self._last_executed = executed
        return self.history, reward


def rollout(
    env: DesignEnv,
    policy_fn,
    record_metrics: bool = False,
    metric_seed: int = 0,
) -> EpisodeRecord:
    """Run one full episode.  ``policy_fn(history, t) -> raw action``.

    With record_metrics, per-step structure metrics are evaluated from the
    posterior at every history (including h0) and stored on the record.
    """
    h = env.reset()
    record = EpisodeRecord(
        model=env.model.descriptor(),
        env_seed=env.seed,
        d=env.cfg.d,
        initial_score=env.current_score(),
    )
    per_step_metrics = []
    if record_metrics:
        per_step_metrics.append(_structure_metrics(env, metric_seed, 0))
    for t in range(1, env.cfg.budget + 1):
        raw = np.asarray(policy_fn(h, t - 1), dtype=float)
        h, reward = env.step(raw)
        record.steps.append(
            StepRecord(
                t=t,
                raw_action=raw.tolist(),
                decoded=env._last_decoded.to_json(),
                executed=env._last_executed.to_json(),
                reward=float(reward),
                posterior_score=float(env.current_score()),
            )
        )
        if record_metrics:
            per_step_metrics.append(_structure_metrics(env, metric_seed, t))
    if record_metrics:
        record.final_metrics = {
            "per_step": per_step_metrics,
            "returns": record.returns(1.0),
        }
    return record


def _structure_metrics(env: DesignEnv, metric_seed: int, t: int) -> dict:
    probs = _edge_probs(env.posterior, env.history)
    adjacency = env.model.adjacency
    rng = np.random.default_rng([env.seed, metric_seed, t, 2077])
    return {
        "posterior_score": posterior_mod.expected_correct_entries(probs, adjacency),
        "expected_shd": posterior_mod.expected_shd(probs, adjacency, 100, rng),
        "edge_f1": posterior_mod.edge_f1(probs, adjacency),
        "auprc": posterior_mod.auprc(probs, adjacency),
    }


def write_episode_records(records: list[EpisodeRecord], path: Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for record in records:
            fh.write(record.to_jsonl())
            fh.write("---\n")
    tmp.replace(path)


def read_episode_records(path: Path) -> list[EpisodeRecord]:
    chunks = Path(path).read_text().split("---\n")
    return [EpisodeRecord.from_jsonl(c) for c in chunks if c.strip()]
