"""Wireless transformer (WiT) encoder and the supervised MLP head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import InvalidArgument, ShapeMismatch
from .nn_core import Dense, LayerNorm, gelu, softmax


@dataclass(frozen=True)
class EncoderConfig:
    token_width: int = 48  # 3 * N_r
    embed_dim: int = 384
    num_blocks: int = 1
    num_heads: int = 1
    mlp_ratio: int = 4
    max_positions: int = 37  # longest view + the LID slot
    ln_gain: float = 1.0
    ln_eps: float = 1e-4
    final_norm: bool = True
    shared_qkv: bool = True

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise InvalidArgument("embed_dim must be divisible by num_heads")
        if min(self.token_width, self.embed_dim, self.num_blocks, self.max_positions) < 1:
            raise InvalidArgument("encoder sizes must be positive")


def attention_coefficients(e_bar: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor) -> torch.Tensor:
    """alpha_ij = (e_i W_q)(e_j W_k)^T / sqrt(D), D the width of the projections."""
    q = e_bar @ w_q
    k = e_bar @ w_k
    return q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])


def self_attention(e_bar, w_q, w_k, w_v) -> torch.Tensor:
    """Rows are softmax(alpha_i)-weighted sums of the value projections."""
    return softmax(attention_coefficients(e_bar, w_q, w_k)) @ (e_bar @ w_v)


class Attention(nn.Module):
    """Single- or multi-head self-attention with an output projection.

    With ``shared_qkv`` the query, key and value projections use one matrix.
    Those matrices start at ``qkv_std``. With a shared matrix a token scores
    itself at |q|^2 / sqrt(d), so a 1/sqrt(d) init would make every row,
    the LID included, attend almost only to itself.
    """

    def __init__(self, dim: int, num_heads: int = 1, shared_qkv: bool = True, qkv_std: float = 0.02):
        super().__init__()
        self.num_heads = num_heads
        self.shared_qkv = shared_qkv
        if shared_qkv:
            self.w_qkv = nn.Parameter(torch.randn(dim, dim) * qkv_std)
        else:
            self.w_q = nn.Parameter(torch.randn(dim, dim) * qkv_std)
            self.w_k = nn.Parameter(torch.randn(dim, dim) * qkv_std)
            self.w_v = nn.Parameter(torch.randn(dim, dim) * qkv_std)
        self.proj = Dense(dim, dim, std=1.0 / math.sqrt(dim))

    def weights(self):
        if self.shared_qkv:
            return self.w_qkv, self.w_qkv, self.w_qkv
        return self.w_q, self.w_k, self.w_v

    def qkv(self, h: torch.Tensor):
        if self.shared_qkv:
            p = h @ self.w_qkv
            return p, p, p
        return h @ self.w_q, h @ self.w_k, h @ self.w_v

    def combine(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Attend query rows (..., m, D) over key/value rows (..., c, D), then project."""
        if self.num_heads == 1:
            att = softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]))
            return self.proj(att @ v)
        h = self.num_heads
        d = q.shape[-1]

        def split(t):
            return t.reshape(*t.shape[:-1], h, d // h).transpose(-2, -3)

        att = softmax(split(q) @ split(k).transpose(-1, -2) / math.sqrt(d // h))
        out = (att @ split(v)).transpose(-2, -3)
        return self.proj(out.reshape(*out.shape[:-2], d))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.combine(*self.qkv(h))


class TransformerBlock(nn.Module):
    """Pre-norm residual block: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, num_heads=1, mlp_ratio=4, ln_gain=1.0, ln_eps=1e-4, shared_qkv=True):
        super().__init__()
        self.norm1 = LayerNorm(ln_gain, ln_eps)
        self.attn = Attention(dim, num_heads, shared_qkv)
        self.norm2 = LayerNorm(ln_gain, ln_eps)
        self.fc1 = Dense(dim, mlp_ratio * dim)
        self.fc2 = Dense(mlp_ratio * dim, dim)

    def mlp(self, x):
        return self.fc2(gelu(self.fc1(self.norm2(x))))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(x)

    def forward_first(self, x):
        """Row 0 of ``forward(x)`` without running the MLP on the other rows."""
        q, k, v = self.attn.qkv(self.norm1(x))
        x0 = x[..., 0, :] + self.attn.combine(q[..., :1, :], k, v)[..., 0, :]
        return x0 + self.mlp(x0)


def make_block(config: EncoderConfig) -> TransformerBlock:
    return TransformerBlock(
        config.embed_dim,
        config.num_heads,
        config.mlp_ratio,
        config.ln_gain,
        config.ln_eps,
        config.shared_qkv,
    )


class WiTEncoder(nn.Module):
    """Tokens (B, C_tok, 3N_r) -> representations (B, C_tok + 1, D); row 0 is the LID."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.embedding = nn.Parameter(torch.randn(config.token_width, d) / math.sqrt(d))
        # row 0 is the LID slot and stays unused: the LID gets no positional vector
        self.positions = nn.Parameter(torch.randn(config.max_positions, d) * 0.02)
        self.lid = nn.Parameter(torch.randn(d) * 0.02)
        self.blocks = nn.ModuleList(make_block(config) for _ in range(config.num_blocks))
        self.norm = LayerNorm(config.ln_gain, config.ln_eps) if config.final_norm else nn.Identity()

    def embed_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.config.token_width:
            raise ShapeMismatch(f"token width {tokens.shape[-1]} != {self.config.token_width}")
        n = tokens.shape[-2]
        if n + 1 > self.config.max_positions:
            raise ShapeMismatch(f"{n} tokens exceed {self.config.max_positions - 1} positions")
        e = tokens @ self.embedding + self.positions[1 : n + 1]
        lid = self.lid.expand(*e.shape[:-2], 1, e.shape[-1])
        return torch.cat([lid, e], dim=-2)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.embed_tokens(tokens)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def lid_embedding(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.forward(tokens)[..., 0, :]


class MLPHead(nn.Module):
    """Linear head (``hidden=None``) or one hidden GeLU layer plus a linear output."""

    def __init__(self, dim: int, out_dim: int, hidden: int | None = None, std: float | None = None):
        super().__init__()
        if hidden is None:
            self.layers = nn.ModuleList([Dense(dim, out_dim, std=std)])
        else:
            self.layers = nn.ModuleList([Dense(dim, hidden, std=std), Dense(hidden, out_dim, std=std)])

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x


class LocationModel(nn.Module):
    """Encoder plus head on the LID representation, used for supervised runs."""

    def __init__(self, encoder: WiTEncoder, head: MLPHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, tokens):
        return self.head(self.encoder.lid_embedding(tokens))
