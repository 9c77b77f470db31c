"""Channel-to-token conversion and the stochastic view pipeline.

A token sequence is a real array of shape (..., C_tok, 3*N_r): real, imaginary
and absolute parts of one subcarrier's antenna vector. All ops accept an
optional leading batch axis; random draws are then made per sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class AugmentPolicy:
    # per-transform probabilities for (T1 global, T2 global, T3 local)
    p_rss: tuple[float, float, float] = (1.0, 1.0, 1.0)
    p_rsf: tuple[float, float, float] = (0.4, 0.4, 0.4)
    p_rgo: tuple[float, float, float] = (0.2, 0.8, 0.0)
    p_rfc: tuple[float, float, float] = (0.0, 0.1, 0.0)
    p_rsc: tuple[float, float, float] = (0.0, 0.2, 0.0)
    p_normalize: tuple[float, float, float] = (1.0, 1.0, 1.0)
    p_noise: tuple[float, float, float] = (0.2, 0.2, 0.0)
    crop_fractions: tuple[float, float, float] = (0.9, 0.8, 0.1)
    global_len: int = 36
    local_len: int = 16
    num_local: int = 8
    rgo_max: float = 0.1
    rfc_sigma: tuple[float, float] = (0.5, 0.6)
    noise_std: float = 0.01

    def __post_init__(self):
        for name in ("p_rss", "p_rsf", "p_rgo", "p_rfc", "p_rsc", "p_normalize", "p_noise"):
            probs = getattr(self, name)
            if len(probs) != 3 or not all(0.0 <= p <= 1.0 for p in probs):
                raise InvalidArgument(f"{name} must hold three probabilities in [0, 1]")
        if len(self.crop_fractions) != 3 or not all(0 < g <= 1 for g in self.crop_fractions):
            raise InvalidArgument("crop fractions must lie in (0, 1]")
        if self.global_len < 2 or self.local_len < 2:
            raise InvalidArgument("view lengths must be >= 2")
        if self.num_local < 0:
            raise InvalidArgument("num_local must be >= 0")
        if self.rgo_max < 0 or self.noise_std < 0:
            raise InvalidArgument("rgo_max and noise_std must be >= 0")
        lo, hi = self.rfc_sigma
        if not 0 < lo <= hi:
            raise InvalidArgument("rfc_sigma must be an ordered positive range")

    @property
    def num_views(self) -> int:
        return 2 + self.num_local

    def view_kind(self, v: int) -> int:
        """Transform family (0, 1, 2) used for view ``v``."""
        return min(v, 2)

    def view_len(self, v: int) -> int:
        return self.global_len if v < 2 else self.local_len


def to_real_repr(H: np.ndarray) -> np.ndarray:
    """(..., N_r, N_c) complex -> (..., N_c, 3 N_r) tokens [re, im, abs]."""
    H = np.asarray(H)
    if not np.all(np.isfinite(H)):
        raise InvalidArgument("channel has non-finite entries")
    Ht = np.swapaxes(H, -1, -2)
    return np.concatenate([Ht.real, Ht.imag, np.abs(Ht)], axis=-1)


def _parts(width: int) -> int:
    if width % 3:
        raise InvalidArgument(f"token width {width} is not a multiple of 3")
    return width // 3


def resize_tokens(seq: np.ndarray, target_len: int) -> np.ndarray:
    """Piecewise-linear resize along the token axis; endpoints are kept."""
    n = seq.shape[-2]
    if n == target_len:
        return seq.copy()
    if n == 1:
        return np.repeat(seq, target_len, axis=-2)
    pos = np.linspace(0.0, n - 1, target_len)
    left = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = (pos - left)[:, None]
    return seq[..., left, :] * (1 - frac) + seq[..., left + 1, :] * frac


def crop_length(gamma: float, n_tokens: int) -> int:
    # small guard so 0.3 * 10 floors to 3, not 2
    return int(math.floor(gamma * n_tokens + 1e-9))


def rss(seq: np.ndarray, gamma: float, target_len: int, rng: np.random.Generator) -> np.ndarray:
    """Random contiguous crop of floor(gamma*C) tokens resized to ``target_len``."""
    n = seq.shape[-2]
    block = crop_length(gamma, n)
    if block < 2:
        raise InvalidArgument(f"crop of {gamma} x {n} tokens leaves {block} < 2")
    if seq.ndim == 2:
        start = int(rng.integers(0, n - block + 1))
        return resize_tokens(seq[start : start + block], target_len)
    starts = rng.integers(0, n - block + 1, size=seq.shape[0])
    idx = starts[:, None] + np.arange(block)
    cropped = np.take_along_axis(seq, idx[:, :, None], axis=1)
    return resize_tokens(cropped, target_len)


def rsf(seq: np.ndarray) -> np.ndarray:
    return seq[..., ::-1, :].copy()


def rgo(seq: np.ndarray, rng: np.random.Generator, max_offset: float = 0.1) -> np.ndarray:
    """Scale every entry by one factor 1 +/- U(0, max_offset) (per sample)."""
    shape = () if seq.ndim == 2 else (seq.shape[0], 1, 1)
    offset = rng.uniform(0.0, max_offset, size=shape)
    sign = np.where(rng.random(size=shape) < 0.5, -1.0, 1.0)
    return seq * (1.0 + sign * offset)


def rayleigh_fading(h, sigma):
    """h / sigma^2 * exp(-h^2 / (2 sigma^2))."""
    return h / sigma**2 * np.exp(-(h**2) / (2 * sigma**2))


def rfc(seq: np.ndarray, rng: np.random.Generator, sigma_range=(0.5, 0.6)) -> np.ndarray:
    """Rayleigh-shaped remap of the absolute part only."""
    n_r = _parts(seq.shape[-1])
    shape = () if seq.ndim == 2 else (seq.shape[0], 1, 1)
    sigma = rng.uniform(sigma_range[0], sigma_range[1], size=shape)
    out = seq.copy()
    out[..., 2 * n_r :] = rayleigh_fading(seq[..., 2 * n_r :], sigma)
    return out


def rsc(seq: np.ndarray) -> np.ndarray:
    return -seq


def normalize(seq: np.ndarray, d_re: float, d_im: float, d_abs: float) -> np.ndarray:
    if not (d_re > 0 and d_im > 0 and d_abs > 0):
        raise InvalidArgument("normalization constants must be positive")
    n_r = _parts(seq.shape[-1])
    scale = np.repeat([d_re, d_im, d_abs], n_r)
    return seq / scale


def gaussian_noise(seq: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise InvalidArgument("noise std must be >= 0")
    return seq + sigma * rng.standard_normal(seq.shape)


def _where(mask: np.ndarray, new: np.ndarray, old: np.ndarray) -> np.ndarray:
    return np.where(mask[:, None, None], new, old)


def _apply_family(
    tokens: np.ndarray,
    kind: int,
    target_len: int,
    policy: AugmentPolicy,
    deltas,
    rng: np.random.Generator,
) -> np.ndarray:
    b = tokens.shape[0]

    def coin(probs):
        return rng.random(b) < probs[kind]

    x = tokens
    if policy.p_rss[kind] > 0:
        use = coin(policy.p_rss)
        cropped = rss(x, policy.crop_fractions[kind], target_len, rng)
        x = _where(use, cropped, resize_tokens(x, target_len))
    else:
        x = resize_tokens(x, target_len)
    x = _where(coin(policy.p_rsf), rsf(x), x)
    # normalization is linear and commutes with RGO/RSC; applying it before RFC
    # puts the Rayleigh remap on unit-scale magnitudes
    x = _where(coin(policy.p_normalize), normalize(x, *deltas), x)
    x = _where(coin(policy.p_rgo), rgo(x, rng, policy.rgo_max), x)
    x = _where(coin(policy.p_rfc), rfc(x, rng, policy.rfc_sigma), x)
    x = _where(coin(policy.p_rsc), rsc(x), x)
    x = _where(coin(policy.p_noise), gaussian_noise(x, policy.noise_std, rng), x)
    return x


def make_view_batch(
    channels: np.ndarray,
    policy: AugmentPolicy,
    deltas,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """V = 2 + N_s views of a batch of channels (B, N_r, N_c).

    Returns a list of V arrays; the two global views have ``global_len``
    tokens and the local ones ``local_len``.
    """
    tokens = to_real_repr(channels)
    if tokens.ndim == 2:
        tokens = tokens[None]
    views = []
    for v in range(policy.num_views):
        kind = policy.view_kind(v)
        views.append(_apply_family(tokens, kind, policy.view_len(v), policy, deltas, rng))
    return views


def make_views(H: np.ndarray, policy: AugmentPolicy, deltas, rng: np.random.Generator) -> list[np.ndarray]:
    """Views of a single (N_r, N_c) channel."""
    return [v[0] for v in make_view_batch(np.asarray(H)[None], policy, deltas, rng)]


def eval_tokens(channels: np.ndarray, deltas) -> np.ndarray:
    """Un-augmented, normalized tokens used for downstream evaluation."""
    return normalize(to_real_repr(channels), *deltas)
