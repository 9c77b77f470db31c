"""Numeric core: layer primitives, AdamW, schedules, gradient tools, checkpoints.

Tensors and reverse-mode differentiation come from torch autograd; what lives
here is the small set of primitives the models share plus an independent
central-difference gradient checker.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, InvalidArgument, NumericError, ShapeMismatch

CHECKPOINT_MAGIC = b"SWITCK1\0"
CHECKPOINT_VERSION = 1


def check_finite(x: torch.Tensor, op: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite value produced by {op}")
    return x


def layer_norm(x: torch.Tensor, gain: float = 1.0, eps: float = 1e-4) -> torch.Tensor:
    """Standardize the last axis (biased variance + eps), then scale by ``gain``."""
    return F.layer_norm(x, x.shape[-1:], eps=eps) * gain


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate="tanh")


def softmax(x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(x, dim=-1)


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


class LayerNorm(nn.Module):
    """Layer norm with fixed (non-learned) gain and variance epsilon."""

    def __init__(self, gain: float = 1.0, eps: float = 1e-4):
        super().__init__()
        self.gain = gain
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.eps)


class Dense(nn.Module):
    """x @ W + b with W stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, std: float | None = None, bias: bool = True):
        super().__init__()
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = nn.Parameter(torch.randn(d_in, d_out) * std)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeMismatch(f"input width {x.shape[-1]} != {self.weight.shape[0]}")
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


def cosine_schedule(step: float, total: float, start: float, end: float, warmup_steps: float = 0) -> float:
    """Linear ramp 0 -> start over warmup, then cosine from start to end at ``total``."""
    if step < warmup_steps:
        return start * step / warmup_steps
    span = total - warmup_steps
    if span <= 0:
        return end
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return end + (start - end) * (math.cos(math.pi * progress) + 1) / 2


def global_grad_norm(params: Iterable[torch.Tensor]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(torch.sum(p.grad.double() ** 2))
    return math.sqrt(sq)


def clip_gradients(params: Iterable[torch.Tensor], max_norm: float = 3.0) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping. The scale carries a margin of a few
    ulps of the gradient dtype so rounding cannot push the result above
    ``max_norm``.
    """
    params = [p for p in params if p.grad is not None]
    norm = global_grad_norm(params)
    if norm > max_norm:
        ulp = max(torch.finfo(p.grad.dtype).eps for p in params)
        scale = max_norm / norm * (1 - 4 * ulp)
        for p in params:
            p.grad.mul_(scale)
    return norm


class AdamW:
    """AdamW with decoupled weight decay and bias correction.

    ``params`` maps names to tensors; names without decay are listed in
    ``no_decay``.
    """

    def __init__(
        self,
        params: Mapping[str, torch.Tensor],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        no_decay: Iterable[str] = (),
    ):
        self.params = dict(params)
        self.betas = betas
        self.eps = eps
        self.no_decay = set(no_decay)
        self.step_count = 0
        self.exp_avg = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.exp_avg_sq = {k: torch.zeros_like(p) for k, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr: float, weight_decay: float = 0.0) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for name, p in self.params.items():
            if weight_decay and name not in self.no_decay:
                p.mul_(1 - lr * weight_decay)
            g = p.grad
            if g is None:
                continue
            m, v = self.exp_avg[name], self.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / c1)

    def state_arrays(self, prefix: str = "opt") -> dict[str, torch.Tensor]:
        out = {f"{prefix}/step": torch.tensor(float(self.step_count))}
        for k in self.params:
            out[f"{prefix}/m/{k}"] = self.exp_avg[k]
            out[f"{prefix}/v/{k}"] = self.exp_avg_sq[k]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "opt") -> None:
        self.step_count = int(arrays[f"{prefix}/step"])
        for k, p in self.params.items():
            self.exp_avg[k] = torch.as_tensor(arrays[f"{prefix}/m/{k}"], dtype=p.dtype).clone()
            self.exp_avg_sq[k] = torch.as_tensor(arrays[f"{prefix}/v/{k}"], dtype=p.dtype).clone()


def adamw_step(params, grads, state: dict, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """Functional single step on plain tensors; ``state`` holds t, m, v and is updated."""
    t = state.get("t", 0) + 1
    state["t"] = t
    ms = state.setdefault("m", [torch.zeros_like(p) for p in params])
    vs = state.setdefault("v", [torch.zeros_like(p) for p in params])
    out = []
    b1, b2 = betas
    for p, g, m, v in zip(params, grads, ms, vs):
        p = p * (1 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out.append(p - lr * m_hat / (v_hat.sqrt() + eps))
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[[], torch.Tensor],
    params: list[torch.Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients with central finite differences.

    ``f`` re-evaluates the scalar loss from the current values of ``params``.
    The error of each parameter tensor is max |analytic - numeric| divided by
    the largest gradient magnitude of that tensor; the report carries the
    worst tensor. ``max_entries`` caps the probed entries per tensor.
    """
    for p in params:
        p.grad = None
    loss = f()
    if loss.numel() != 1:
        raise InvalidArgument("loss must be a scalar")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and len(idx) > max_entries:
                idx = rng.choice(idx, size=max_entries, replace=False)
            num = np.empty(len(idx))
            for k, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                num[k] = (up - down) / (2 * step)
            ana = g.reshape(-1)[idx].double().numpy()
            scale = max(np.max(np.abs(ana)), np.max(np.abs(num)), 1e-12)
            worst = max(worst, float(np.max(np.abs(ana - num))) / scale)
            checked += len(idx)
    return GradCheckReport(worst, tol, checked)


# --- checkpoint format -------------------------------------------------------


def save_arrays(path, arrays: Mapping[str, object]) -> None:
    """Write named float32 arrays: magic, u32 version, u32 count, then per entry
    u32 name length, utf-8 name, u32 ndim, u32 dims, f32 payload."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, value in arrays.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        a = np.array(value, dtype="<f4", order="C")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a SWITCK1 checkpoint")
    try:
        version, count = struct.unpack_from("<II", raw, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
        off = 16
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(raw):
                raise CheckpointError(f"{path}: truncated entry {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return out


def module_arrays(module: nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: Mapping[str, np.ndarray], prefix: str) -> None:
    own = module.state_dict()
    state = {}
    for k, v in own.items():
        key = f"{prefix}/{k}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks {key!r}")
        a = arrays[key]
        if tuple(a.shape) != tuple(v.shape):
            raise ShapeMismatch(f"{key}: checkpoint shape {tuple(a.shape)} vs model {tuple(v.shape)}")
        state[k] = torch.as_tensor(a, dtype=v.dtype)
    module.load_state_dict(state)
