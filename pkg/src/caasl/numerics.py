"""Dense-tensor plumbing shared by the networks and trainers.

Computation and reverse-mode differentiation are delegated to torch (CPU,
float32 storage; gradient checks run in float64).  This module owns the
pieces the rest of the package relies on: the named-parameter store with a
functional Adam step, the binary checkpoint format, gradient extraction and
the central finite-difference checker used by the test suite.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional

import numpy as np
import torch

from .errors import NumericalError

CHECKPOINT_MAGIC = b"CAASL1"

_DTYPES = {
    "float32": ("<f4", torch.float32),
    "float64": ("<f8", torch.float64),
    "int64": ("<i8", torch.int64),
}


# ---------------------------------------------------------------------------
# Forward ops.  Thin wrappers so the whole op surface lives in one place.
# ---------------------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a @ b


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def layer_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalization over the last axis, no learned affine."""
    return torch.nn.functional.layer_norm(x, x.shape[-1:], eps=eps)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.softplus(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def dropout(x: torch.Tensor, p: float = 0.1, training: bool = True) -> torch.Tensor:
    return torch.nn.functional.dropout(x, p=p, training=training)


def reduce_mean(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def reduce_sum(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


def reduce_max(x: torch.Tensor, dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Max over one axis; the argmax is what backward routes gradients through."""
    values, indices = x.max(dim=dim)
    return values, indices


# ---------------------------------------------------------------------------
# Gradients.
# ---------------------------------------------------------------------------

def gradients(
    loss: torch.Tensor,
    params: Mapping[str, torch.Tensor],
) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every named parameter.

    Parameters the loss does not reach get zero gradients.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    grads = torch.autograd.grad(
        loss, [params[n] for n in names], allow_unused=True, retain_graph=False
    )
    return {
        n: (g if g is not None else torch.zeros_like(params[n]))
        for n, g in zip(names, grads)
    }


class Adam:
    """Adam with bias correction over a named parameter store.

    Keeps first/second moments and a step count per parameter; aborts with
    the offending parameter name if a gradient goes non-finite.
    """

    def __init__(
        self,
        params: Mapping[str, torch.Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    @torch.no_grad()
    def step(self, grads: Mapping[str, torch.Tensor]) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = grads[name]
            if not torch.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
            self.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            self.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.add_(m_hat / (v_hat.sqrt() + self.eps), alpha=-self.lr)

    def state_tensors(self, prefix: str = "") -> dict[str, torch.Tensor]:
        out = {}
        for name in self.params:
            out[f"{prefix}m/{name}"] = self.m[name]
            out[f"{prefix}v/{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray], prefix: str, step_count: int):
        for name in self.params:
            self.m[name] = torch.as_tensor(np.array(tensors[f"{prefix}m/{name}"]))
            self.v[name] = torch.as_tensor(np.array(tensors[f"{prefix}v/{name}"]))
        self.step_count = step_count


# ---------------------------------------------------------------------------
# Checkpoint format: magic, little-endian header length, JSON header mapping
# each tensor name to shape/dtype/byte-offset, then raw tensor bytes.
# ---------------------------------------------------------------------------

def save_checkpoint(path, tensors: Mapping[str, "np.ndarray | torch.Tensor"]) -> None:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if arr.dtype == np.float64:
            arr = arr.astype(np.float32)  # 32-bit storage
        arrays[name] = arr
    header: dict[str, dict] = {}
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        dtype = {"float32": "float32", "int64": "int64"}.get(arr.dtype.name)
        if dtype is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        header[name] = {"shape": list(arr.shape), "dtype": dtype, "offset": offset}
        offset += arr.size * arr.itemsize
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for name in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[name]).astype(
                _DTYPES[header[name]["dtype"]][0], copy=False).tobytes())
    os.replace(tmp, path)  # readers never see partial files


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        blob = fh.read()
    out = {}
    for name, meta in header.items():
        np_dtype = np.dtype(_DTYPES[meta["dtype"]][0])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = meta["offset"]
        arr = np.frombuffer(blob, dtype=np_dtype, count=count, offset=start)
        out[name] = arr.reshape(meta["shape"]).copy()
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient checking (float64).
# ---------------------------------------------------------------------------

def finite_difference_max_rel_error(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-4,
    max_coords_per_tensor: int = 12,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare analytic gradients with central differences on sampled coordinates.

    ``loss_fn`` must recompute the scalar loss from the current parameter
    values each call.  Parameters should be float64 for meaningful tolerances;
    the default step keeps probes clear of ReLU/max kinks.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    loss = loss_fn()
    analytic = gradients(loss, params)
    worst = 0.0
    for name, p in params.items():
        flat = p.detach().reshape(-1)
        n = flat.numel()
        coords = (
            np.arange(n)
            if n <= max_coords_per_tensor
            else rng.choice(n, size=max_coords_per_tensor, replace=False)
        )
        ga = analytic[name].reshape(-1)
        for c in coords:
            c = int(c)
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + h
            up = loss_fn().item()
            with torch.no_grad():
                flat[c] = orig - h
            down = loss_fn().item()
            with torch.no_grad():
                flat[c] = orig
            fd = (up - down) / (2.0 * h)
            an = ga[c].item()
            denom = max(abs(fd), abs(an), 1e-3)
            worst = max(worst, abs(fd - an) / denom)
    return worst


def module_params(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """Named parameters of a torch module, optionally namespaced."""
    return {prefix + name: p for name, p in module.named_parameters()}


def load_module_params(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = ""):
    """Copy checkpoint arrays into a module's parameters (by namespaced name)."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            arr = tensors[prefix + name]
            p.copy_(torch.as_tensor(np.array(arr), dtype=p.dtype))


def assert_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {what}")
    return t


def seed_everything(seed: int) -> np.random.Generator:
    """Seed torch's global RNG (weight init, dropout) and return a numpy rng."""
    torch.manual_seed(seed)
    return np.random.default_rng(seed)
