"""Swin transformer layer (STL): windowed multi-head self-attention.

Layout convention: an STL consumes ``(B, Gy, Gx, c)`` token grids.  Windows
are ``(wy, wx)`` token extents; grids that do not divide evenly are zero
padded at the bottom/right.  The shifted variant rolls the (padded) grid by
half a window before partitioning and masks attention between tokens that
were not neighbours before the roll.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


def default_heads(channels: int) -> int:
    """Largest divisor of ``channels`` not above ``max(1, channels // 16)``."""
    h = max(1, channels // 16)
    while channels % h:
        h -= 1
    return h


@dataclass(frozen=True)
class StlConfig:
    channels: int
    window: tuple[int, int]
    num_heads: int = 1
    mlp_ratio: float = 4.0
    shifted: bool = False

    def __post_init__(self):
        if self.channels < 1 or self.num_heads < 1 or self.channels % self.num_heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.num_heads}")
        if min(self.window) < 1:
            raise ConfigError(f"window extents must be >= 1, got {self.window}")
        if self.mlp_ratio <= 0 or self.hidden < 1:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")

    @property
    def hidden(self) -> int:
        return int(round(self.channels * self.mlp_ratio))

    @property
    def shift(self) -> tuple[int, int]:
        if not self.shifted:
            return (0, 0)
        return (self.window[0] // 2, self.window[1] // 2)


@dataclass(eq=False)
class StlParams:
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    norm1_g: Tensor
    norm1_b: Tensor
    norm2_g: Tensor
    norm2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    rel_bias: Tensor

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_stl_params(cfg: StlConfig, rng: np.random.Generator) -> StlParams:
    c, hid = cfg.channels, cfg.hidden
    wy, wx = cfg.window

    def p(a):
        return T.tensor(a, requires_grad=True)

    return StlParams(
        qkv_w=p(trunc_normal(rng, (c, 3 * c))),
        qkv_b=p(np.zeros(3 * c)),
        proj_w=p(trunc_normal(rng, (c, c))),
        proj_b=p(np.zeros(c)),
        norm1_g=p(np.ones(c)),
        norm1_b=p(np.zeros(c)),
        norm2_g=p(np.ones(c)),
        norm2_b=p(np.zeros(c)),
        fc1_w=p(trunc_normal(rng, (c, hid))),
        fc1_b=p(np.zeros(hid)),
        fc2_w=p(trunc_normal(rng, (hid, c))),
        fc2_b=p(np.zeros(c)),
        rel_bias=p(np.zeros(((2 * wy - 1) * (2 * wx - 1), cfg.num_heads))),
    )


def stl_param_count(cfg: StlConfig) -> int:
    """Closed-form scalar count of one STL."""
    c, hid = cfg.channels, cfg.hidden
    wy, wx = cfg.window
    return (
        3 * c * c + 3 * c  # qkv
        + c * c + c  # proj
        + 2 * 2 * c  # two layer norms
        + c * hid + hid + hid * c + c  # mlp
        + (2 * wy - 1) * (2 * wx - 1) * cfg.num_heads
    )


def count_params(params: StlParams) -> int:
    return sum(t.size for _, t in params.named_tensors())


@lru_cache(maxsize=None)
def relative_position_index(wy: int, wx: int) -> np.ndarray:
    """(T, T) map from token pairs in a window to rows of the bias table."""
    coords = np.stack(np.meshgrid(np.arange(wy), np.arange(wx), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    return (rel[0] + wy - 1) * (2 * wx - 1) + (rel[1] + wx - 1)


@dataclass(frozen=True)
class WindowPlan:
    grid: tuple[int, int]
    window: tuple[int, int]
    shift: tuple[int, int]

    @property
    def padded(self) -> tuple[int, int]:
        return tuple(-(-g // w) * w for g, w in zip(self.grid, self.window))

    @property
    def counts(self) -> tuple[int, int]:
        return tuple(p // w for p, w in zip(self.padded, self.window))

    @property
    def n_windows(self) -> int:
        ny, nx = self.counts
        return ny * nx

    @property
    def tokens_per_window(self) -> int:
        return self.window[0] * self.window[1]

    @property
    def pad(self) -> tuple[int, int]:
        return tuple(p - g for p, g in zip(self.padded, self.grid))

    def windows(self) -> list[np.ndarray]:
        """Flat padded-grid positions held by each window, after the cyclic shift."""
        py, px = self.padded
        pos = np.arange(py * px).reshape(py, px)
        pos = np.roll(pos, (-self.shift[0], -self.shift[1]), (0, 1))
        return list(_to_windows(pos[None, :, :, None], self.window).reshape(self.n_windows, -1))

    def mask(self, dtype=np.float32) -> np.ndarray | None:
        """Additive (nW, T, T) attention mask (0 / -inf), or None without a shift."""
        return _shift_mask(self.padded, self.window, self.shift, np.dtype(dtype).str)


def make_plan(grid, window, shift=(0, 0)) -> WindowPlan:
    return WindowPlan(tuple(int(g) for g in grid), tuple(int(w) for w in window), tuple(int(s) for s in shift))


def _to_windows(a: np.ndarray, window) -> np.ndarray:
    b, py, px, c = a.shape
    wy, wx = window
    a = a.reshape(b, py // wy, wy, px // wx, wx, c).transpose(0, 1, 3, 2, 4, 5)
    return a.reshape(-1, wy * wx, c)


@lru_cache(maxsize=64)
def _shift_mask(padded, window, shift, dtype_str):
    if shift == (0, 0):
        return None
    py, px = padded
    (wy, wx), (sy, sx) = window, shift
    labels = np.zeros((py, px), dtype=np.int64)
    cnt = 0
    for ys in (slice(0, py - wy), slice(py - wy, py - sy), slice(py - sy, py)):
        for xs in (slice(0, px - wx), slice(px - wx, px - sx), slice(px - sx, px)):
            labels[ys, xs] = cnt
            cnt += 1
    win = _to_windows(labels[None, :, :, None], window)[..., 0]
    same = win[:, :, None] == win[:, None, :]
    mask = np.where(same, 0.0, -np.inf).astype(np.dtype(dtype_str))
    mask.setflags(write=False)
    return mask


def partition_windows(x: Tensor, plan: WindowPlan) -> Tensor:
    """(B, Gy, Gx, c) -> (B·nW, wy·wx, c), padding and shifting per ``plan``."""
    b, gy, gx, c = x.shape
    if (gy, gx) != plan.grid:
        raise T.DimensionError(f"window plan grid {plan.grid} does not match tensor grid {(gy, gx)}")
    (py, px), (wy, wx) = plan.padded, plan.window
    x = T.pad(x, [(0, 0), (0, py - gy), (0, px - gx), (0, 0)])
    if plan.shift != (0, 0):
        x = T.roll(x, (-plan.shift[0], -plan.shift[1]), (1, 2))
    x = T.reshape(x, (b, py // wy, wy, px // wx, wx, c))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * plan.n_windows, wy * wx, c))


def merge_windows(w: Tensor, plan: WindowPlan) -> Tensor:
    """Inverse of :func:`partition_windows`, cropping the padding away."""
    nw, t, c = w.shape
    (py, px), (wy, wx) = plan.padded, plan.window
    if t != wy * wx or nw % plan.n_windows:
        raise T.DimensionError(f"window tensor {w.shape} does not match plan windows {plan.window}")
    b = nw // plan.n_windows
    x = T.reshape(w, (b, py // wy, px // wx, wy, wx, c))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, py, px, c))
    if plan.shift != (0, 0):
        x = T.roll(x, plan.shift, (1, 2))
    gy, gx = plan.grid
    if (gy, gx) != (py, px):
        x = x[:, :gy, :gx, :]
    return x


def attention_probs(q: Tensor, k: Tensor, params: StlParams, cfg: StlConfig, mask: np.ndarray | None) -> Tensor:
    """Softmax attention weights (N, h, T, T) for scaled queries ``q``."""
    n, h, t, _ = q.shape
    wy, wx = cfg.window
    logits = T.matmul(q, T.permute(k, (0, 1, 3, 2)))
    bias = T.take_rows(params.rel_bias, relative_position_index(wy, wx).reshape(-1))
    bias = T.permute(T.reshape(bias, (t, t, h)), (2, 0, 1))
    logits = T.add(logits, T.expand(T.reshape(bias, (1, h, t, t)), (n, h, t, t)))
    if mask is not None:
        nw = mask.shape[0]
        if n % nw:
            raise T.DimensionError(f"{n} windows is not a multiple of mask windows {nw}")
        full = np.broadcast_to(mask.astype(logits.data.dtype, copy=False)[None, :, None], (n // nw, nw, h, t, t))
        logits = T.reshape(T.add(T.reshape(logits, full.shape), T.tensor(full)), (n, h, t, t))
    return T.softmax_lastdim(logits)


def window_attention(tokens: Tensor, params: StlParams, cfg: StlConfig, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head attention inside each window with relative position bias.

    ``mask`` is an additive (nW, T, T) array; windows are laid out batch-major
    so window ``i`` of the flat batch uses ``mask[i % nW]``.
    """
    n, t, c = tokens.shape
    h = cfg.num_heads
    wy, wx = cfg.window
    if c != cfg.channels:
        raise ConfigError(f"tokens carry {c} channels, layer expects {cfg.channels}")
    if t != wy * wx:
        raise T.DimensionError(f"window holds {t} tokens, expected {wy}x{wx}")
    hd = c // h
    qkv = T.linear(tokens, params.qkv_w, params.qkv_b)
    qkv = T.permute(T.reshape(qkv, (n, t, 3, h, hd)), (2, 0, 3, 1, 4))
    q = T.scale(qkv[0], hd ** -0.5)
    k, v = qkv[1], qkv[2]
    attn = attention_probs(q, k, params, cfg, mask)
    out = T.matmul(attn, v)
    out = T.reshape(T.permute(out, (0, 2, 1, 3)), (n, t, c))
    return T.linear(out, params.proj_w, params.proj_b)


def stl_forward(x: Tensor, params: StlParams, cfg: StlConfig) -> Tensor:
    """Pre-norm residual STL: ``x + Attn(LN(x))`` then ``+ MLP(LN(.))``."""
    b, gy, gx, c = x.shape
    plan = make_plan((gy, gx), cfg.window, cfg.shift)
    h = T.layer_norm(x, params.norm1_g, params.norm1_b)
    h = partition_windows(h, plan)
    h = window_attention(h, params, cfg, plan.mask(x.data.dtype))
    x = T.add(x, merge_windows(h, plan))
    h = T.layer_norm(x, params.norm2_g, params.norm2_b)
    h = T.linear(T.gelu(T.linear(h, params.fc1_w, params.fc1_b)), params.fc2_w, params.fc2_b)
    return T.add(x, h)
