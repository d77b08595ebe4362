"""Soft actor-critic with a randomized critic ensemble over design environments.

Episodes are collected from freshly sampled hidden models; transitions store
whole histories.  Critic targets bootstrap from the minimum over a random
subset of target critics, the policy maximizes entropy-regularized ensemble
value, and the temperature is tuned toward a target entropy.  Histories in a
minibatch share their length, so sampling stratifies the buffer by length.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import numerics
from .env import DesignEnv, EnvConfig, EpisodeRecord, StepRecord
from .errors import ConfigError, NumericalError
from .nets import AltAttentionConfig, PolicyNet, QNetwork, history_to_tensor
from .priors import DOMAIN_SERGIO, PriorSpec, sample_model


@dataclass(frozen=True)
class Transition:
    history_before: np.ndarray  # (n0 + t, d, 2) float32
    action: np.ndarray  # (d, channels) float32
    reward: float
    history_after: np.ndarray  # one more row than history_before
    done: bool

    def __post_init__(self):
        if self.history_after.shape[0] != self.history_before.shape[0] + 1:
            raise ConfigError("history_after must have exactly one more row")

    @property
    def d(self) -> int:
        return int(self.history_before.shape[1])


class ReplayBuffer:
    """Uniform ring buffer; batches are drawn within one history-length stratum
    (the stratum of a uniformly chosen pivot, so strata weight by size)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("capacity must be positive")
        self.capacity = int(capacity)
        self._items: list[Transition] = []
        self._lengths: list[int] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, tr: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tr)
            self._lengths.append(tr.history_before.shape[0])
        else:
            self._items[self._next] = tr
            self._lengths[self._next] = tr.history_before.shape[0]
            self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        if not self._items:
            raise ConfigError("cannot sample from an empty buffer")
        lengths = np.asarray(self._lengths)
        pivot = int(rng.integers(len(self._items)))
        stratum = np.flatnonzero(lengths == lengths[pivot])
        picks = rng.choice(stratum, size=batch_size, replace=True)
        return [self._items[i] for i in picks]


@dataclass(frozen=True)
class SacConfig:
    m_critics: int = 2
    redq_subset: int = 2
    g_updates: int = 1
    gamma: float = 0.9
    tau: float = 0.01
    policy_lr: float = 1e-3
    q_lr: float = 1e-3
    alpha_lr: float = 3e-3
    init_alpha: float = 0.1
    target_entropy: Optional[float] = None  # default: -2d (synthetic), -d (sergio)
    batch_size: int = 64
    buffer_capacity: int = 100_000
    n_env_steps: int = 10_000
    update_after: int = 400
    eval_every: int = 500
    n_eval_envs: int = 10
    arch: AltAttentionConfig = field(default_factory=lambda: AltAttentionConfig(dropout=0.1))
    q_arch: AltAttentionConfig = field(default_factory=AltAttentionConfig)

    def __post_init__(self):
        if not 1 <= self.redq_subset <= self.m_critics:
            raise ConfigError("need 1 <= redq_subset <= m_critics")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")

    def resolved_target_entropy(self, env_cfg: EnvConfig) -> float:
        if self.target_entropy is not None:
            return self.target_entropy
        scale = 1.0 if env_cfg.domain == DOMAIN_SERGIO else 2.0
        return -scale * env_cfg.d


def polyak_update(target: torch.nn.Module, online: torch.nn.Module, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, elementwise."""
    with torch.no_grad():
        for tp, op in zip(target.parameters(), online.parameters()):
            tp.mul_(1.0 - tau).add_(op, alpha=tau)


def _stack_histories(histories: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(histories)).float()


def collect_episode(
    policy: PolicyNet,
    env: DesignEnv,
    action_seed: int,
    buffer: Optional[ReplayBuffer] = None,
    stochastic: bool = True,
    step_hook: Optional[Callable[[], None]] = None,
) -> EpisodeRecord:
    """Roll one full episode, appending all transitions to the buffer.

    Rollouts always run the policy in eval mode (no dropout); exploration
    comes from the action distribution itself.
    """
    gen = torch.Generator().manual_seed(int(action_seed))
    was_training = policy.training
    policy.eval()
    try:
        h = env.reset()
        record = EpisodeRecord(
            model=env.model.descriptor(),
            env_seed=env.seed,
            d=env.cfg.d,
            initial_score=env.current_score(),
        )
        for t in range(1, env.cfg.budget + 1):
            policy.eval()  # a step_hook may have flipped train mode for updates
            with torch.no_grad():
                h_t = history_to_tensor(h.data)
                if stochastic:
                    action, _ = policy.sample(h_t, generator=gen)
                else:
                    action = policy.mean_action(h_t)
            raw = action[0].numpy().astype(np.float32)
            before = h.data
            h, reward = env.step(raw)
            if buffer is not None:
                buffer.add(
                    Transition(
                        history_before=before,
                        action=raw,
                        reward=float(reward),
                        history_after=h.data,
                        done=t == env.cfg.budget,
                    )
                )
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
            if step_hook is not None:
                step_hook()
    finally:
        if was_training:
            policy.train()
    return record


class SacTrainer:
    """Owns the policy, critic ensemble, targets, temperature and optimizers."""

    def __init__(self, cfg: SacConfig, env_cfg: EnvConfig, seed: int):
        self.cfg = cfg
        self.env_cfg = env_cfg
        self.rng = numerics.seed_everything(seed)
        channels = env_cfg.action_channels
        self.policy = PolicyNet(cfg.arch, action_channels=channels)
        self.critics = [
            QNetwork(cfg.q_arch, action_channels=channels) for _ in range(cfg.m_critics)
        ]
        self.targets = [copy.deepcopy(q) for q in self.critics]
        for tq in self.targets:
            tq.requires_grad_(False)
        self.log_alpha = torch.tensor(float(np.log(cfg.init_alpha)), requires_grad=True)
        self.target_entropy = cfg.resolved_target_entropy(env_cfg)

        self.policy_params = numerics.module_params(self.policy)
        self.critic_params: dict[str, torch.Tensor] = {}
        for k, q in enumerate(self.critics):
            self.critic_params.update(numerics.module_params(q, f"q{k}/"))
        self.policy_opt = numerics.Adam(self.policy_params, lr=cfg.policy_lr)
        self.critic_opt = numerics.Adam(self.critic_params, lr=cfg.q_lr)
        self.alpha_opt = numerics.Adam({"log_alpha": self.log_alpha}, lr=cfg.alpha_lr)

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.exp().item())

    def _batch_tensors(self, batch: list[Transition]):
        h = _stack_histories([tr.history_before for tr in batch])
        h2 = _stack_histories([tr.history_after for tr in batch])
        a = torch.from_numpy(np.stack([tr.action for tr in batch])).float()
        r = torch.tensor([tr.reward for tr in batch], dtype=torch.float32)
        done = torch.tensor([float(tr.done) for tr in batch])
        return h, a, r, h2, done

    def critic_update(self, batch: list[Transition], rng: np.random.Generator) -> float:
        """Regress every critic onto the shared entropy-regularized target."""
        h, a, r, h2, done = self._batch_tensors(batch)
        alpha = self.log_alpha.exp().detach()
        with torch.no_grad():
            a2, logp2 = self.policy.sample(h2)
            subset = rng.choice(self.cfg.m_critics, size=self.cfg.redq_subset, replace=False)
            q_next = torch.stack([self.targets[k](h2, a2) for k in subset]).min(dim=0).values
            y = r + self.cfg.gamma * (1.0 - done) * (q_next - alpha * logp2)
        if not torch.isfinite(y).all():
            raise NumericalError(
                f"non-finite critic target (r range [{r.min():.3g}, {r.max():.3g}])"
            )
        loss = sum(
            torch.nn.functional.mse_loss(q(h, a), y) for q in self.critics
        )
        grads = numerics.gradients(loss, self.critic_params)
        self.critic_opt.step(grads)
        return float(loss.item())

    def actor_and_alpha_update(self, batch: list[Transition]) -> tuple[float, float]:
        h, _, _, _, _ = self._batch_tensors(batch)
        a, logp = self.policy.sample(h)
        q_mean = torch.stack([q(h, a) for q in self.critics]).mean(dim=0)
        alpha = self.log_alpha.exp().detach()
        actor_loss = (alpha * logp - q_mean).mean()
        grads = numerics.gradients(actor_loss, self.policy_params)
        self.policy_opt.step(grads)

        alpha_loss = -(self.log_alpha.exp() * (logp.detach() + self.target_entropy)).mean()
        alpha_grads = numerics.gradients(alpha_loss, {"log_alpha": self.log_alpha})
        self.alpha_opt.step(alpha_grads)
        with torch.no_grad():
            self.log_alpha.clamp_(np.log(1e-4), np.log(10.0))
        return float(actor_loss.item()), self.alpha

    def update(self, buffer: ReplayBuffer, rng: np.random.Generator) -> tuple[float, float, float]:
        self.policy.train()
        for q in self.critics:
            q.train()
        batch = buffer.sample(self.cfg.batch_size, rng)
        critic_loss = self.critic_update(batch, rng)
        actor_loss, alpha = self.actor_and_alpha_update(batch)
        for q, tq in zip(self.critics, self.targets):
            polyak_update(tq, q, self.cfg.tau)
        return critic_loss, actor_loss, alpha

    # -- persistence ---------------------------------------------------------

    def checkpoint_tensors(self) -> dict[str, torch.Tensor]:
        tensors = dict(numerics.module_params(self.policy, "policy/"))
        for k, q in enumerate(self.critics):
            tensors.update(numerics.module_params(q, f"q{k}/"))
        for k, tq in enumerate(self.targets):
            tensors.update(numerics.module_params(tq, f"q_target{k}/"))
        tensors["alpha/log_alpha"] = self.log_alpha.reshape(1)
        tensors.update(self.policy_opt.state_tensors("adam/policy/"))
        tensors.update(self.critic_opt.state_tensors("adam/critic/"))
        return tensors

    def save(self, path, manifest: dict) -> Path:
        path = Path(path)
        numerics.save_checkpoint(path, self.checkpoint_tensors())
        manifest = dict(manifest)
        manifest["arch"] = _arch_dict(self.cfg.arch)
        manifest["q_arch"] = _arch_dict(self.cfg.q_arch)
        manifest["action_channels"] = self.policy.action_channels
        manifest["m_critics"] = self.cfg.m_critics
        manifest["optimizer_steps"] = {
            "policy": self.policy_opt.step_count,
            "critic": self.critic_opt.step_count,
        }
        tmp = path.with_name(path.name + ".manifest.tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        tmp.replace(str(path) + ".json")
        return path


def _arch_dict(arch: AltAttentionConfig) -> dict:
    return {
        "num_layers": arch.num_layers,
        "num_heads": arch.num_heads,
        "embed_dim": arch.embed_dim,
        "dropout": arch.dropout,
    }


def load_policy(path) -> PolicyNet:
    """Load just the policy from a training checkpoint, eval mode."""
    path = Path(path)
    with open(str(path) + ".json") as fh:
        manifest = json.load(fh)
    policy = PolicyNet(
        AltAttentionConfig(**manifest["arch"]),
        action_channels=manifest["action_channels"],
    )
    numerics.load_module_params(policy, numerics.load_checkpoint(path), "policy/")
    policy.eval()
    policy.requires_grad_(False)
    return policy


def config_hash(*objs) -> str:
    blob = json.dumps([_jsonable(o) for o in objs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(getattr(obj, k)) for k in obj.__dataclass_fields__}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    return repr(obj)


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Optional[Path]
    best_heldout_return: float
    final_heldout_return: float
    log_rows: list


# Seed ranges: training episodes, held-out model-selection environments and
# test environments never overlap (recorded in the checkpoint manifest).
TRAIN_SEED_OFFSET = 0
HELDOUT_SEED_OFFSET = 10_000_000
TEST_SEED_OFFSET = 20_000_000


def heldout_return(
    policy: PolicyNet,
    env_cfg: EnvConfig,
    prior: PriorSpec,
    posterior,
    n_envs: int,
    seed_offset: int = HELDOUT_SEED_OFFSET,
) -> float:
    """Mean undiscounted return of the mean-action policy on fixed environments."""
    total = 0.0
    for j in range(n_envs):
        env_seed = seed_offset + j
        env = DesignEnv(sample_model(prior, env_seed), env_cfg, posterior, seed=env_seed)
        record = collect_episode(policy, env, action_seed=env_seed, stochastic=False)
        total += record.returns(1.0)
    return total / n_envs


def train(
    cfg: SacConfig,
    env_cfg: EnvConfig,
    prior: PriorSpec,
    posterior,
    seed: int,
    out_dir,
) -> TrainResult:
    """Alternate episode collection with gradient updates; keep the checkpoint
    that scores best on held-out environments."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    posterior.eval()
    posterior.requires_grad_(False)
    trainer = SacTrainer(cfg, env_cfg, seed)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    rng = np.random.default_rng([seed, 0x5AC])

    log_rows: list[dict] = []
    best = -np.inf
    latest_eval = np.nan
    env_step = 0
    episode = 0
    ckpt = out_dir / "policy.ckpt"
    manifest_base = {
        "config_hash": config_hash(cfg, env_cfg, prior),
        "seed": int(seed),
        "train_seed_offset": TRAIN_SEED_OFFSET,
        "heldout_seed_offset": HELDOUT_SEED_OFFSET,
    }

    def maybe_update():
        nonlocal env_step, latest_eval, best
        env_step += 1
        if len(buffer) >= cfg.update_after:
            for _ in range(cfg.g_updates):
                critic_loss, actor_loss, alpha = trainer.update(buffer, rng)
                log_rows.append(
                    {
                        "step": env_step,
                        "critic_loss": critic_loss,
                        "actor_loss": actor_loss,
                        "alpha": alpha,
                        "heldout_return": latest_eval,
                    }
                )
        if env_step % cfg.eval_every == 0 or env_step == cfg.n_env_steps:
            latest_eval = heldout_return(
                trainer.policy, env_cfg, prior, posterior, cfg.n_eval_envs
            )
            if latest_eval > best:
                best = latest_eval
                trainer.save(
                    ckpt,
                    {**manifest_base, "step": env_step, "heldout_return": latest_eval},
                )

    while env_step < cfg.n_env_steps:
        model_seed = TRAIN_SEED_OFFSET + episode
        env = DesignEnv(sample_model(prior, model_seed), env_cfg, posterior, seed=model_seed)
        collect_episode(
            trainer.policy,
            env,
            action_seed=int(rng.integers(2**31)),
            buffer=buffer,
            stochastic=True,
            step_hook=maybe_update,
        )
        episode += 1

    if not ckpt.exists():
        trainer.save(ckpt, {**manifest_base, "step": env_step, "heldout_return": latest_eval})
    log_path = out_dir / "training_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["step", "critic_loss", "actor_loss", "alpha", "heldout_return"]
        )
        writer.writeheader()
        writer.writerows(log_rows)
    return TrainResult(
        checkpoint_path=ckpt,
        log_path=log_path,
        best_heldout_return=float(best),
        final_heldout_return=float(latest_eval),
        log_rows=log_rows,
    )
