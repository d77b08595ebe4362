"""Alternating-attention transformer encoder and the heads built on it.

One encoder architecture is shared (not the weights) by the policy, the
Q-functions and the amortized edge posterior.  Self-attention runs alternately
over the sample axis and the variable axis with no positional encodings, so
outputs are invariant to sample order and equivariant to variable relabeling,
and the same parameters accept any number of variables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
TANH_EPS = 1e-6

MLP_HIDDEN = 128


@dataclass(frozen=True)
class AltAttentionConfig:
    num_layers: int = 2
    num_heads: int = 8
    embed_dim: int = 32
    dropout: float = 0.0

    @property
    def ff_dim(self) -> int:
        return 4 * self.embed_dim

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")


class SelfAttentionBlock(nn.Module):
    """Multi-head self-attention + position-wise feedforward, post-norm residuals."""

    def __init__(self, cfg: AltAttentionConfig):
        super().__init__()
        self.attn = nn.MultiheadAttention(
            cfg.embed_dim, cfg.num_heads, dropout=cfg.dropout, batch_first=True
        )
        self.ff = nn.Sequential(
            nn.Linear(cfg.embed_dim, cfg.ff_dim),
            nn.ReLU(),
            nn.Linear(cfg.ff_dim, cfg.embed_dim),
        )
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        attn_out, _ = self.attn(x, x, x, need_weights=False)
        x = self.norm1(x + self.drop(attn_out))
        x = self.norm2(x + self.drop(self.ff(x)))
        return x


class AltAttentionEncoder(nn.Module):
    """Maps a history (batch, samples, variables, channels) to per-variable
    embeddings (batch, variables, embed_dim) via alternating attention and a
    final max-pool over samples."""

    def __init__(self, cfg: AltAttentionConfig, in_channels: int = 2):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(in_channels, cfg.embed_dim)
        self.sample_blocks = nn.ModuleList(
            SelfAttentionBlock(cfg) for _ in range(cfg.num_layers)
        )
        self.variable_blocks = nn.ModuleList(
            SelfAttentionBlock(cfg) for _ in range(cfg.num_layers)
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.dim() != 4:
            raise ValueError(f"expected (batch, samples, variables, channels), got {tuple(h.shape)}")
        b, n, d, _ = h.shape
        if n == 0 or d == 0:
            raise ValueError("history must contain at least one sample and one variable")
        z = self.embed(h)  # (b, n, d, l)
        l = z.shape[-1]
        for sample_block, variable_block in zip(self.sample_blocks, self.variable_blocks):
            # Attention across samples, independently per variable.
            z = z.permute(0, 2, 1, 3).reshape(b * d, n, l)
            z = sample_block(z)
            z = z.reshape(b, d, n, l).permute(0, 2, 1, 3)
            # Attention across variables, independently per sample.
            z = z.reshape(b * n, d, l)
            z = variable_block(z)
            z = z.reshape(b, n, d, l)
        return z.max(dim=1).values  # (b, d, l)


def _mlp(in_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, MLP_HIDDEN),
        nn.ReLU(),
        nn.Linear(MLP_HIDDEN, MLP_HIDDEN),
        nn.ReLU(),
        nn.Linear(MLP_HIDDEN, out_dim),
    )


class PolicyNet(nn.Module):
    """Encoder plus a position-wise head emitting a Gaussian-Tanh action
    distribution per variable.

    ``action_channels`` is 2 when actions carry (target, value) and 1 when the
    intervention is value-free (gene perturbations).
    """

    def __init__(self, cfg: AltAttentionConfig, action_channels: int = 2):
        super().__init__()
        self.encoder = AltAttentionEncoder(cfg, in_channels=2)
        self.action_channels = action_channels
        self.head = _mlp(cfg.embed_dim, 2 * action_channels)
        with torch.no_grad():
            # start with moderate exploration noise (std ~ 0.37)
            self.head[-1].bias[action_channels:].fill_(-1.0)

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (mean, log_std), each (batch, variables, action_channels)."""
        pooled = self.encoder(h)
        out = self.head(pooled)  # (b, d, 2*C)
        mean, log_std = out.chunk(2, dim=-1)
        log_std = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def sample(
        self, h: torch.Tensor, generator: torch.Generator | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Reparameterized action in (-1, 1) with its log-density."""
        mean, log_std = self(h)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return gaussian_tanh_sample(mean, log_std, noise)

    def mean_action(self, h: torch.Tensor) -> torch.Tensor:
        mean, _ = self(h)
        return torch.tanh(mean)


def gaussian_tanh_sample(
    mean: torch.Tensor, log_std: torch.Tensor, noise: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Squash a reparameterized Gaussian draw through tanh.

    The log-density subtracts the tanh change of variables, with a small
    epsilon keeping the correction finite at the boundary.  Log-probabilities
    are summed over all action dimensions (one scalar per batch item).
    """
    std = log_std.exp()
    u = mean + std * noise
    action = torch.tanh(u)
    log_prob = gaussian_tanh_log_prob(u, mean, log_std)
    return action, log_prob


def gaussian_tanh_log_prob(
    u: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor
) -> torch.Tensor:
    std = log_std.exp()
    normal = -0.5 * (((u - mean) / std) ** 2) - log_std - 0.5 * math.log(2.0 * math.pi)
    correction = torch.log(1.0 - torch.tanh(u) ** 2 + TANH_EPS)
    per_dim = normal - correction
    return per_dim.reshape(per_dim.shape[0], -1).sum(dim=-1)


class QNetwork(nn.Module):
    """Critic: own encoder, per-variable action fusion, sum-pool to a scalar."""

    def __init__(self, cfg: AltAttentionConfig, action_channels: int = 2):
        super().__init__()
        self.encoder = AltAttentionEncoder(cfg, in_channels=2)
        self.action_channels = action_channels
        self.head = _mlp(cfg.embed_dim + action_channels, 1)

    def forward(self, h: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        pooled = self.encoder(h)  # (b, d, l)
        if action.dim() == 2:
            action = action.unsqueeze(-1)
        fused = torch.cat([pooled, action], dim=-1)
        per_variable = self.head(fused).squeeze(-1)  # (b, d)
        return per_variable.sum(dim=-1)  # (b,)


class PosteriorNet(nn.Module):
    """Amortized edge posterior: encoder embeddings scored pairwise.

    Edge logit (i, j) is a bilinear score between two learned projections of
    the variable embeddings; probabilities are independent Bernoullis with a
    structurally zero diagonal.
    """

    def __init__(self, cfg: AltAttentionConfig):
        super().__init__()
        self.encoder = AltAttentionEncoder(cfg, in_channels=2)
        self.source_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.target_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.scale = 1.0 / math.sqrt(cfg.embed_dim)

    def edge_logits(self, h: torch.Tensor) -> torch.Tensor:
        pooled = self.encoder(h)  # (b, d, l)
        u = self.source_proj(pooled)
        v = self.target_proj(pooled)
        return torch.einsum("bil,bjl->bij", u, v) * self.scale

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """Edge probabilities (batch, d, d) with a zero diagonal."""
        probs = torch.sigmoid(self.edge_logits(h))
        d = probs.shape[-1]
        eye = torch.eye(d, dtype=torch.bool, device=probs.device)
        return probs.masked_fill(eye, 0.0)


def history_to_tensor(history: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(n, d, 2) numpy history -> (1, n, d, 2) torch batch."""
    arr = np.ascontiguousarray(history, dtype=np.float32)
    return torch.from_numpy(arr).to(dtype).unsqueeze(0)


def edge_probabilities(posterior: PosteriorNet, history: np.ndarray) -> np.ndarray:
    """Eval-mode forward of a single history; returns float64 (d, d) probabilities."""
    was_training = posterior.training
    posterior.eval()
    with torch.no_grad():
        probs = posterior(history_to_tensor(history))[0]
    if was_training:
        posterior.train()
    return probs.double().numpy().astype(np.float64)
