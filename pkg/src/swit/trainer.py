"""Two-branch self-distillation pretraining (online network + EMA target).

Macro-fading branch: attention pooling over all encoder outputs of a view,
global projector, cross-entropy between target global views and every other
online view. Micro-fading branch: per-token projector on the online side
against the target's pooled top-k neighbours of the same token.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .augment import AugmentPolicy, make_view_batch
from .channel_sim import Dataset
from .encoder import EncoderConfig, WiTEncoder, make_block
from .errors import InvalidArgument, NumericError
from .nn_core import AdamW, Dense, clip_gradients, cosine_schedule, gelu, load_arrays, save_arrays

log = logging.getLogger(__name__)

STREAM_INIT = 11
STREAM_SHUFFLE = 12
STREAM_AUGMENT = 13

TRACE_HEADER = ("step", "loss_macro", "loss_micro", "loss_total", "lr", "weight_decay", "ema_momentum")


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 500
    batch_size: int = 512
    base_lr: float = 1.5e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 10
    wd_start: float = 0.04
    wd_end: float = 0.4
    clip_norm: float = 3.0
    temp_online: float = 0.1
    temp_target: float = 0.04
    center_momentum: float = 0.9
    ema_base: float = 0.996
    beta: float = 0.1
    proj_hidden: int = 1024
    proj_bottleneck: int = 256
    proj_init_std: float = 0.03
    k_global: int = 4096
    k_local: int = 512
    k_n: int = 6
    k_k: int = 3
    freeze_epochs: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.temp_online > self.temp_target > 0:
            raise InvalidArgument("need temp_online > temp_target > 0")
        if not 0 <= self.center_momentum <= 1 or not 0 <= self.ema_base <= 1:
            raise InvalidArgument("momenta must lie in [0, 1]")
        if not 0 < self.k_k <= self.k_n:
            raise InvalidArgument("need 0 < k_k <= k_n")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgument("epochs and batch_size must be positive")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256


# --- building blocks ---------------------------------------------------------


class AttentionPool(nn.Module):
    """Prepends a learnable pool token to a set, runs one block, returns the token."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.token = nn.Parameter(torch.randn(config.embed_dim) * 0.02)
        self.block = make_block(config)

    def forward(self, reps: torch.Tensor) -> torch.Tensor:
        if reps.shape[-2] == 0:
            raise InvalidArgument("cannot pool an empty set")
        tok = self.token.expand(*reps.shape[:-2], 1, reps.shape[-1])
        return self.block.forward_first(torch.cat([tok, reps], dim=-2))

    def pool_neighbors(self, token_reps: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        """Pool every neighbour set ``token_reps[b, idx[b, i]]``: (B, n, D), (B, n, k) -> (B, n, D).

        Equal to ``forward`` on the gathered sets, but keys and values are
        projected once per token and then gathered.
        """
        blk = self.block
        b, n, k = idx.shape
        q_t, k_t, v_t = blk.attn.qkv(blk.norm1(self.token))
        _, keys, values = blk.attn.qkv(blk.norm1(token_reps))
        keys = gather_neighbors(keys, idx).reshape(b * n, k, -1)
        values = gather_neighbors(values, idx).reshape(b * n, k, -1)
        d = keys.shape[-1]
        keys = torch.cat([k_t.expand(b * n, 1, d), keys], dim=1)
        values = torch.cat([v_t.expand(b * n, 1, d), values], dim=1)
        x0 = self.token + blk.attn.combine(q_t.expand(b * n, 1, d), keys, values)[:, 0, :]
        return (x0 + blk.mlp(x0)).reshape(b, n, d)


class ProjectorMLP(nn.Module):
    """Linear+GeLU, linear+GeLU, linear bottleneck, linear expander.

    Hidden layers use variance 1/fan_in. Only the expander starts small
    (``expander_std``) so the initial prototype logits sit well below the
    sharpening temperatures while the rest of the head still carries signal.
    """

    def __init__(self, dim: int, hidden: int, bottleneck: int, out_dim: int, expander_std: float = 0.03):
        super().__init__()
        self.fc1 = Dense(dim, hidden)
        self.fc2 = Dense(hidden, hidden)
        self.bottleneck = Dense(hidden, bottleneck)
        self.expander = Dense(bottleneck, out_dim, std=expander_std)

    def forward(self, x):
        x = gelu(self.fc1(x))
        x = gelu(self.fc2(x))
        return self.expander(self.bottleneck(x))


class SwitNetwork(nn.Module):
    """One branch (online or target): encoder, pooling block and both projectors."""

    def __init__(self, enc: EncoderConfig, cfg: TrainerConfig):
        super().__init__()
        self.encoder = WiTEncoder(enc)
        self.pool = AttentionPool(enc)
        d = enc.embed_dim
        self.mlp_global = ProjectorMLP(d, cfg.proj_hidden, cfg.proj_bottleneck, cfg.k_global, cfg.proj_init_std)
        self.mlp_local = ProjectorMLP(d, cfg.proj_hidden, cfg.proj_bottleneck, cfg.k_local, cfg.proj_init_std)

    def encode_views(self, views: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        return batched_by_shape(self.encoder, views)

    def global_logits(self, reps: torch.Tensor) -> torch.Tensor:
        return self.mlp_global(self.pool(reps))


def batched_by_shape(fn: Callable[[torch.Tensor], torch.Tensor], xs: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Apply a per-sample ``fn`` to each tensor, concatenating same-shaped ones into one call."""
    out: list[torch.Tensor | None] = [None] * len(xs)
    groups: dict[tuple, list[int]] = {}
    for i, x in enumerate(xs):
        groups.setdefault(tuple(x.shape[1:]), []).append(i)
    for idx in groups.values():
        ys = fn(torch.cat([xs[i] for i in idx], dim=0))
        for i, y in zip(idx, ys.split([xs[i].shape[0] for i in idx], dim=0)):
            out[i] = y
    return out


# --- sharpening, centering and losses ----------------------------------------


def sharpen_center(z: torch.Tensor, temp: float, center: torch.Tensor | None = None) -> torch.Tensor:
    """softmax((z - center) / temp) over the prototype axis."""
    if not temp > 0:
        raise InvalidArgument("temperature must be positive")
    if center is not None:
        z = z - center
    return torch.softmax(z / temp, dim=-1)


def sharpen_log(z: torch.Tensor, temp: float) -> torch.Tensor:
    """Log of the online (uncentred) sharpened distribution, computed stably."""
    return torch.log_softmax(z / temp, dim=-1)


def safe_log(p: torch.Tensor, floor: float = 1e-12) -> torch.Tensor:
    return torch.log(torch.clamp(p, min=floor))


def _xent(target: torch.Tensor, online_log: torch.Tensor) -> torch.Tensor:
    return -(target * online_log).sum(dim=-1)


def loss_macro(target_probs: Sequence[torch.Tensor], online_log_probs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Cross-entropy of each target global view against every other online view.

    ``target_probs`` holds the (B, K) distributions of the global views, in view
    order; ``online_log_probs`` the (B, K) log-distributions of all V views.
    The sum over the 2(V-1) pairs is averaged, then averaged over the batch.
    """
    V = len(online_log_probs)
    if V < 2:
        raise InvalidArgument("need at least two views")
    total = 0.0
    for v, pt in enumerate(target_probs):
        for w in range(V):
            if w != v:
                total = total + _xent(pt, online_log_probs[w]).mean()
    return total / (len(target_probs) * (V - 1))


def loss_micro(target_probs: Sequence[torch.Tensor], online_log_probs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Token-aligned cross-entropy; each view is averaged over its own tokens, then over views."""
    V = len(online_log_probs)
    total = 0.0
    for pt, lo in zip(target_probs, online_log_probs):
        total = total + _xent(pt, lo).mean()
    return total / V


def total_loss(l_macro, l_micro, beta: float):
    return l_macro + beta * l_micro


@torch.no_grad()
def update_center(center: torch.Tensor, outputs: torch.Tensor, momentum: float) -> torch.Tensor:
    """EMA of the batch mean of pre-softmax target outputs (all leading axes)."""
    mean = outputs.reshape(-1, outputs.shape[-1]).mean(dim=0)
    return center * momentum + mean * (1 - momentum)


def ema_value(psi: torch.Tensor, theta: torch.Tensor, kappa: float) -> torch.Tensor:
    return psi * kappa + theta * (1 - kappa)


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, kappa: float) -> None:
    for pt, po in zip(target.parameters(), online.parameters()):
        pt.copy_(ema_value(pt, po.detach(), kappa))


def ema_momentum(epoch: float, total_epochs: float, base: float = 0.996) -> float:
    return 1 - (1 - base) * (math.cos(math.pi * epoch / total_epochs) + 1) / 2


def weight_decay_at(epoch: float, total_epochs: float, start: float = 0.04, end: float = 0.4) -> float:
    return end - (end - start) * (math.cos(math.pi * epoch / total_epochs) + 1) / 2


# --- micro-fading neighbourhoods -----------------------------------------------


def neighbor_table(n_tokens: int, k_n: int) -> np.ndarray:
    """(n, k_n) indices of the k_n nearest positions to each i (j != i), ascending."""
    if not 0 < k_n <= n_tokens - 1:
        raise InvalidArgument(f"need 0 < k_n={k_n} <= {n_tokens - 1}")
    table = np.empty((n_tokens, k_n), dtype=np.int64)
    for i in range(n_tokens):
        others = sorted((j for j in range(n_tokens) if j != i), key=lambda j: (abs(i - j), j))
        table[i] = sorted(others[:k_n])
    return table


def neighborhood_topk(reps: torch.Tensor, k_n: int, k_k: int) -> torch.Tensor:
    """Top-k_k neighbours of every token by cosine similarity within its window.

    ``reps`` is (..., n, D) (token outputs without the LID). Returns (..., n, k_k)
    indices ordered by similarity; ties go to the lower index.
    """
    n = reps.shape[-2]
    if not 0 < k_k <= k_n:
        raise InvalidArgument("need 0 < k_k <= k_n")
    table = torch.as_tensor(neighbor_table(n, k_n))
    unit = reps / reps.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    neigh = unit[..., table, :]  # (..., n, k_n, D)
    sims = (neigh * unit.unsqueeze(-2)).sum(-1)
    order = torch.sort(-sims, dim=-1, stable=True).indices[..., :k_k]
    return table.expand(*sims.shape[:-2], n, k_n).gather(-1, order)


def gather_neighbors(reps: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """(B, n, D) and (B, n, k) -> (B, n, k, D)."""
    b, n, k = idx.shape
    flat = idx.reshape(b, n * k, 1).expand(-1, -1, reps.shape[-1])
    return reps.gather(1, flat).reshape(b, n, k, reps.shape[-1])


def micro_target_logits(net: SwitNetwork, token_reps: torch.Tensor, k_n: int, k_k: int) -> torch.Tensor:
    """Pre-softmax target outputs MLP2(pool(top-k neighbours)) for every token: (B, n, K)."""
    idx = neighborhood_topk(token_reps, k_n, k_k)
    return net.mlp_local(net.pool.pool_neighbors(token_reps, idx))


# --- training ---------------------------------------------------------------------


@dataclass
class StepOutput:
    loss_macro: torch.Tensor
    loss_micro: torch.Tensor
    loss: torch.Tensor
    target_global: torch.Tensor  # (2, B, K) pre-softmax
    target_local: list[torch.Tensor]  # per view (B, n, K_l) pre-softmax


def seeded_module(factory: Callable[[], nn.Module], seed: int, stream: int = STREAM_INIT) -> nn.Module:
    """Build a module with parameters drawn from a private, seeded torch RNG."""
    init_seed = int(np.random.default_rng([seed, stream]).integers(0, 2**63 - 1))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        return factory()


class SwitTrainer:
    def __init__(
        self,
        encoder_config: EncoderConfig,
        config: TrainerConfig,
        policy: AugmentPolicy,
        deltas: Sequence[float],
        steps_per_epoch: int,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        self.encoder_config = encoder_config
        self.config = config
        self.policy = policy
        self.deltas = tuple(float(d) for d in deltas)
        self.steps_per_epoch = steps_per_epoch
        self.seed = seed
        self.dtype = dtype
        self.online = seeded_module(lambda: SwitNetwork(encoder_config, config), seed).to(dtype)
        self.target = copy.deepcopy(self.online)
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.center_global = torch.zeros(config.k_global, dtype=dtype)
        self.center_local = torch.zeros(config.k_local, dtype=dtype)
        named = dict(self.online.named_parameters())
        no_decay = [k for k, p in named.items() if p.ndim < 2]
        self.optimizer = AdamW(named, no_decay=no_decay)
        self.step = 0

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.steps_per_epoch

    def epoch_at(self, step: int) -> float:
        return step / self.steps_per_epoch

    def schedule(self, step: int) -> tuple[float, float, float]:
        """(learning rate, weight decay, EMA momentum) used at ``step``."""
        cfg = self.config
        lr = cosine_schedule(
            step, self.total_steps, cfg.peak_lr, cfg.min_lr, cfg.warmup_epochs * self.steps_per_epoch
        )
        u = self.epoch_at(step)
        wd = weight_decay_at(u, cfg.epochs, cfg.wd_start, cfg.wd_end)
        kappa = ema_momentum(u, cfg.epochs, cfg.ema_base)
        return lr, wd, kappa

    def frozen(self, step: int) -> bool:
        return step < self.config.freeze_epochs * self.steps_per_epoch

    def views_for(self, channels: np.ndarray, step: int) -> list[torch.Tensor]:
        rng = np.random.default_rng([self.seed, STREAM_AUGMENT, step])
        views = make_view_batch(channels, self.policy, self.deltas, rng)
        return [torch.as_tensor(v, dtype=self.dtype) for v in views]

    def forward(self, views: Sequence[torch.Tensor]) -> StepOutput:
        cfg = self.config
        online_reps = self.online.encode_views(views)
        online_global = [sharpen_log(self.online.global_logits(r), cfg.temp_online) for r in online_reps]
        online_local = [
            sharpen_log(z, cfg.temp_online)
            for z in batched_by_shape(self.online.mlp_local, [r[:, 1:] for r in online_reps])
        ]

        with torch.no_grad():
            target_reps = self.target.encode_views(views)
            tg = torch.stack([self.target.global_logits(target_reps[v]) for v in range(2)])
            tl = batched_by_shape(
                lambda r: micro_target_logits(self.target, r, cfg.k_n, cfg.k_k),
                [r[:, 1:] for r in target_reps],
            )
            target_global = [sharpen_center(z, cfg.temp_target, self.center_global) for z in tg]
            target_local = [sharpen_center(z, cfg.temp_target, self.center_local) for z in tl]

        l_c = loss_macro(target_global, online_global)
        l_s = loss_micro(target_local, online_local)
        return StepOutput(l_c, l_s, total_loss(l_c, l_s, cfg.beta), tg, tl)

    def train_step(self, channels: np.ndarray) -> dict[str, float]:
        cfg = self.config
        step = self.step
        lr, wd, kappa = self.schedule(step)
        out = self.forward(self.views_for(channels, step))
        if not torch.isfinite(out.loss):
            raise NumericError(f"non-finite loss at step {step}")
        self.online.zero_grad(set_to_none=True)
        out.loss.backward()
        clip_gradients(self.online.parameters(), cfg.clip_norm)
        self.optimizer.step(lr, wd)
        if not self.frozen(step):
            self.center_global = update_center(self.center_global, out.target_global, cfg.center_momentum)
            local = torch.cat([z.reshape(-1, z.shape[-1]) for z in out.target_local])
            self.center_local = update_center(self.center_local, local, cfg.center_momentum)
            ema_update(self.target, self.online, kappa)
        self.step += 1
        return {
            "step": step,
            "loss_macro": out.loss_macro.item(),
            "loss_micro": out.loss_micro.item(),
            "loss_total": out.loss.item(),
            "lr": lr,
            "weight_decay": wd,
            "ema_momentum": kappa,
        }

    # --- state ------------------------------------------------------------------

    def state_arrays(self) -> dict[str, torch.Tensor]:
        arrays: dict[str, torch.Tensor] = {}
        arrays.update({f"online/{k}": v for k, v in self.online.state_dict().items()})
        arrays.update({f"target/{k}": v for k, v in self.target.state_dict().items()})
        arrays.update(self.optimizer.state_arrays("opt"))
        arrays["center/global"] = self.center_global
        arrays["center/local"] = self.center_local
        arrays["counter/step"] = torch.tensor(float(self.step))
        arrays["counter/epoch"] = torch.tensor(float(self.step // self.steps_per_epoch))
        return arrays

    def save(self, path) -> None:
        save_arrays(path, self.state_arrays())

    def load(self, path) -> None:
        arrays = load_arrays(path)
        for prefix, net in (("online", self.online), ("target", self.target)):
            state = {k: torch.as_tensor(arrays[f"{prefix}/{k}"], dtype=v.dtype) for k, v in net.state_dict().items()}
            net.load_state_dict(state)
        self.optimizer.load_state_arrays(arrays, "opt")
        self.center_global = torch.as_tensor(arrays["center/global"], dtype=self.dtype)
        self.center_local = torch.as_tensor(arrays["center/local"], dtype=self.dtype)
        self.step = int(arrays["counter/step"])

    def target_encoder_arrays(self) -> dict[str, torch.Tensor]:
        return {f"encoder/{k}": v for k, v in self.target.encoder.state_dict().items()}


def batches_for_epoch(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; an incomplete tail batch is dropped unless it is the only one."""
    perm = np.random.default_rng([seed, STREAM_SHUFFLE, epoch]).permutation(n)
    if n <= batch_size:
        return [perm]
    return [perm[i : i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def format_trace(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in rows:
        w.writerow([r["step"]] + [repr(float(r[k])) for k in TRACE_HEADER[1:]])
    return buf.getvalue()


@dataclass
class PretrainResult:
    trainer: SwitTrainer
    trace: list[dict] = field(default_factory=list)


def pretrain(
    dataset: Dataset,
    encoder_config: EncoderConfig,
    config: TrainerConfig,
    policy: AugmentPolicy,
    seed: int = 0,
    out_dir=None,
    max_steps: int | None = None,
    dtype: torch.dtype = torch.float32,
    progress: Callable[[dict], None] | None = None,
) -> PretrainResult:
    """Run self-supervised pretraining; optionally write trace and checkpoints to ``out_dir``.

    Files: ``loss_trace.csv``, ``state.ckpt`` (full training state),
    ``target_encoder.ckpt`` (the target encoder only) and, when
    ``checkpoint_every`` > 0, ``state_epoch{N}.ckpt``.
    """
    if encoder_config.token_width != 3 * dataset.num_antennas:
        raise InvalidArgument(
            f"encoder token width {encoder_config.token_width} != 3 x {dataset.num_antennas} antennas"
        )
    steps_per_epoch = len(batches_for_epoch(len(dataset), config.batch_size, seed, 0))
    trainer = SwitTrainer(encoder_config, config, policy, dataset.deltas, steps_per_epoch, seed, dtype)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = PretrainResult(trainer)
    limit = trainer.total_steps if max_steps is None else min(max_steps, trainer.total_steps)
    epoch = 0
    while trainer.step < limit:
        for idx in batches_for_epoch(len(dataset), config.batch_size, seed, epoch):
            if trainer.step >= limit:
                break
            row = trainer.train_step(dataset.channels[idx])
            result.trace.append(row)
            if progress is not None:
                progress(row)
        epoch += 1
        if out is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            trainer.save(out / f"state_epoch{epoch}.ckpt")
    if out is not None:
        (out / "loss_trace.csv").write_text(format_trace(result.trace))
        trainer.save(out / "state.ckpt")
        save_arrays(out / "target_encoder.ckpt", trainer.target_encoder_arrays())
    return result
