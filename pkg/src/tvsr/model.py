"""TVSRN: encoder STL stack, mask-token insertion, FIM decoder with TAB.

Feature maps are (c, D, H, W).  STLs see them as token grids: the encoder
and the decoder's axial STLs fold depth into channels (tokens over (H, W)
with c·D channels), while TAB views put depth on a window axis
(sagittal: grid (D', H) batched over W; coronal: grid (D', W) batched over H).
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .swin import ConfigError, StlConfig, StlParams, default_heads, init_stl_params, stl_forward, trunc_normal
from .tensor import Tensor

VARIANTS = ("full", "no_tab", "encoder_only")

# reshape/permute orders used around the STL views
_SAG = (3, 1, 2, 0)  # (c, D, H, W) <-> (W, D, H, c), self-inverse
_COR = (2, 1, 3, 0)  # (c, D, H, W) -> (H, D, W, c)
_COR_RE = (3, 1, 0, 2)
_AXIAL = (2, 3, 0, 1)  # (c, D, H, W) <-> (H, W, c, D), self-inverse


@dataclass(frozen=True)
class TvsrnConfig:
    """Network hyper-parameters; defaults are the full-size architecture."""

    c: int = 8
    n_enc: int = 4
    m_fim: int = 1
    scale: int = 5
    depth: int = 4
    window_xy: int = 8
    window_z: int = 4
    variant: str = "full"
    mlp_ratio: float = 4.0
    heads: int = 0  # 0 -> max(1, channels // 16) per layer

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_enc < 0 or self.n_enc % 2:
            raise ConfigError(f"n_enc must be even (regular/shifted pairs), got {self.n_enc}")
        if self.scale < 2:
            raise ConfigError(f"scale must be >= 2, got {self.scale}")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.c < 1 or self.m_fim < 0 or self.window_xy < 1 or self.window_z < 1:
            raise ConfigError("c, window extents must be positive and m_fim non-negative")

    @classmethod
    def for_variant(cls, variant: str = "full", **overrides) -> "TvsrnConfig":
        """Config for a named variant; ``encoder_only`` defaults to N=8, C=32."""
        base = {"c": 32, "n_enc": 8} if variant == "encoder_only" else {}
        base.update(overrides)
        return cls(variant=variant, **base)

    @property
    def out_depth(self) -> int:
        return (self.depth - 1) * self.scale + 1

    def _stl(self, channels: int, window, index: int) -> StlConfig:
        return StlConfig(
            channels=channels,
            window=tuple(window),
            num_heads=self.heads or default_heads(channels),
            mlp_ratio=self.mlp_ratio,
            shifted=bool(index % 2),
        )

    def enc_stl(self, i: int) -> StlConfig:
        return self._stl(self.c * self.depth, (self.window_xy, self.window_xy), i)

    def tab_stl(self, j: int) -> StlConfig:
        return self._stl(self.c, (self.window_z, self.window_xy), j)

    def axial_stl(self, j: int) -> StlConfig:
        return self._stl(self.c * self.out_depth, (self.window_xy, self.window_xy), j)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TvsrnConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in kinds:
                raise ConfigError(f"unknown model config key {key!r}")
            kind = kinds[key]
            values[key] = val if kind == "str" else float(val) if kind == "float" else int(val)
        return cls(**values)


TAB_STLS = 4
AXIAL_STLS = 4


@dataclass(eq=False)
class FimParams:
    tab: list[StlParams] | None  # one object per j, shared by both views
    axial: list[StlParams]


@dataclass(eq=False)
class TvsrnParams:
    embed_w: Tensor
    embed_b: Tensor
    enc: list[StlParams]
    mask_tokens: Tensor | None
    fims: list[FimParams]
    proj_w: Tensor
    proj_b: Tensor

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """Every learnable tensor exactly once (shared TAB tensors under the sagittal name)."""
        yield "embed.w", self.embed_w
        yield "embed.b", self.embed_b
        for i, p in enumerate(self.enc):
            for n, t in p.named_tensors():
                yield f"enc.{i}.{n}", t
        if self.mask_tokens is not None:
            yield "mask_tokens", self.mask_tokens
        for k, fim in enumerate(self.fims):
            for j, p in enumerate(fim.tab or ()):
                for n, t in p.named_tensors():
                    yield f"fims.{k}.tab.sag.{j}.{n}", t
            for j, p in enumerate(fim.axial):
                for n, t in p.named_tensors():
                    yield f"fims.{k}.axial.{j}.{n}", t
        yield "proj.w", self.proj_w
        yield "proj.b", self.proj_b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def _param(a) -> Tensor:
    return T.tensor(a, requires_grad=True)


def init_params(cfg: TvsrnConfig, rng: np.random.Generator | int = 0) -> TvsrnParams:
    """Truncated-normal (std 0.02) weights, zero biases; deterministic given ``rng``."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    c = cfg.c
    embed_w = _param(trunc_normal(rng, (1, c)))
    embed_b = _param(np.zeros(c))
    enc = [init_stl_params(cfg.enc_stl(i), rng) for i in range(cfg.n_enc)]
    if cfg.variant == "encoder_only":
        return TvsrnParams(
            embed_w, embed_b, enc, None, [],
            _param(trunc_normal(rng, (c, cfg.scale))), _param(np.zeros(cfg.scale)),
        )
    tokens = _param(trunc_normal(rng, (cfg.scale - 1, c)))
    fims = []
    for _ in range(cfg.m_fim):
        tab = [init_stl_params(cfg.tab_stl(j), rng) for j in range(TAB_STLS)] if cfg.variant == "full" else None
        axial = [init_stl_params(cfg.axial_stl(j), rng) for j in range(AXIAL_STLS)]
        fims.append(FimParams(tab, axial))
    return TvsrnParams(embed_w, embed_b, enc, tokens, fims, _param(trunc_normal(rng, (c, 1))), _param(np.zeros(1)))


def _check_input(x: Tensor, cfg: TvsrnConfig) -> None:
    if x.ndim != 4 or x.shape[0] != 1:
        raise T.DimensionError(f"expected input (1, D, H, W), got {x.shape}")
    if x.shape[1] != cfg.depth:
        raise T.DimensionError(f"input depth {x.shape[1]} does not match configured depth {cfg.depth}")


def encode(x: Tensor, params: TvsrnParams, cfg: TvsrnConfig) -> Tensor:
    """(1, D, H, W) -> (c, D, H, W): pointwise embedding then N STLs over (H, W)."""
    _check_input(x, cfg)
    _, d, h, w = x.shape
    c = params.embed_w.shape[1]
    fs = T.linear(T.permute(x, (1, 2, 3, 0)), params.embed_w, params.embed_b)  # (D, H, W, c)
    f = T.reshape(T.permute(fs, (1, 2, 3, 0)), (1, h, w, c * d))  # channel index = ci * D + d
    for i, p in enumerate(params.enc):
        f = stl_forward(f, p, cfg.enc_stl(i))
    return T.permute(T.reshape(f, (h, w, c, d)), _AXIAL)


def insert_mask_tokens(enc: Tensor, params: TvsrnParams, cfg: TvsrnConfig) -> Tensor:
    """(c, D, H, W) -> (c, (D-1)·scale+1, H, W) with learned tokens at missing depths.

    Depth ``k·scale`` carries encoder slice ``k``; offset ``o`` in 1..scale-1
    carries token ``o`` broadcast over the slice.
    """
    c, d, h, w = enc.shape
    s = cfg.scale
    if d < 2:
        raise T.DimensionError(f"need at least 2 encoded slices, got {d}")
    tok = T.reshape(T.permute(params.mask_tokens, (1, 0)), (c, 1, s - 1, 1, 1))
    tok = T.expand(tok, (c, d - 1, s - 1, h, w))
    head = T.reshape(enc[:, : d - 1], (c, d - 1, 1, h, w))
    body = T.reshape(T.concat([head, tok], axis=2), (c, (d - 1) * s, h, w))
    return T.concat([body, enc[:, d - 1 :]], axis=1)


def _tab_cfgs(cfg: TvsrnConfig):
    return [cfg.tab_stl(j) for j in range(TAB_STLS)]


def tab_forward(z: Tensor, tab: list[StlParams], cfg: TvsrnConfig) -> Tensor:
    """Through-plane attention: shared STLs on sagittal and coronal views plus residual.

    Each view contributes the change its STL stack made, so ``z`` is carried
    once (the STLs are residual themselves) and zero weights give the identity.
    """
    cfgs = _tab_cfgs(cfg)
    sag0 = sag = T.permute(z, _SAG)
    cor0 = cor = T.permute(z, _COR)
    for p, sc in zip(tab, cfgs):
        sag = stl_forward(sag, p, sc)
        cor = stl_forward(cor, p, sc)
    return T.add(T.add(z, T.permute(T.sub(sag, sag0), _SAG)), T.permute(T.sub(cor, cor0), _COR_RE))


def _axial(x: Tensor, stls: list[StlParams], cfg: TvsrnConfig) -> Tensor:
    c, d, h, w = x.shape
    f = T.reshape(T.permute(x, _AXIAL), (1, h, w, c * d))
    for j, p in enumerate(stls):
        f = stl_forward(f, p, cfg.axial_stl(j))
    return T.permute(T.reshape(f, (h, w, c, d)), _AXIAL)


def decode(x: Tensor, params: TvsrnParams, cfg: TvsrnConfig) -> Tensor:
    """M feature interaction modules: TAB (unless ``no_tab``) then four axial STLs."""
    for fim in params.fims:
        if fim.tab is not None:
            x = tab_forward(x, fim.tab, cfg)
        x = _axial(x, fim.axial, cfg)
    return x


def subpixel_depth(x: Tensor, scale: int) -> Tensor:
    """Channel-to-depth shuffle: (c, D, H, W) -> (c/scale, (D-1)·scale+1, H, W).

    Channel ``g·scale + s`` lands at depth ``d·scale + s`` of output channel
    ``g``; the trailing ``scale-1`` depths past the last input slice are dropped.
    """
    c, d, h, w = x.shape
    if scale < 1 or c % scale:
        raise ConfigError(f"channels {c} not divisible by scale {scale}")
    if scale == 1:
        return x
    g = c // scale
    y = T.permute(T.reshape(x, (g, scale, d, h, w)), (0, 2, 1, 3, 4))
    y = T.reshape(y, (g, d * scale, h, w))
    return y[:, : (d - 1) * scale + 1]


def forward(x: Tensor, params: TvsrnParams, cfg: TvsrnConfig) -> Tensor:
    """(1, D, H, W) -> (D', H, W) raw prediction (not clamped)."""
    enc = encode(x, params, cfg)
    c, d, h, w = enc.shape
    if cfg.variant == "encoder_only":
        y = T.linear(T.permute(enc, (1, 2, 3, 0)), params.proj_w, params.proj_b)  # (D, H, W, scale)
        y = subpixel_depth(T.permute(y, (3, 0, 1, 2)), cfg.scale)
        return T.reshape(y, (cfg.out_depth, h, w))
    z = decode(insert_mask_tokens(enc, params, cfg), params, cfg)
    y = T.linear(T.permute(z, (1, 2, 3, 0)), params.proj_w, params.proj_b)
    return T.reshape(y, (cfg.out_depth, h, w))


def count_params_total(params: TvsrnParams) -> int:
    return sum(t.size for t in params.parameters())


def param_summary(params: TvsrnParams) -> list[tuple[str, int]]:
    """Per-block parameter counts in network order."""
    rows: list[tuple[str, int]] = [("embed", params.embed_w.size + params.embed_b.size)]
    for i, p in enumerate(params.enc):
        rows.append((f"encoder.stl{i}", sum(t.size for _, t in p.named_tensors())))
    if params.mask_tokens is not None:
        rows.append(("mask_tokens", params.mask_tokens.size))
    for k, fim in enumerate(params.fims):
        if fim.tab is not None:
            rows.append((f"fim{k}.tab", sum(t.size for p in fim.tab for _, t in p.named_tensors())))
        rows.append((f"fim{k}.axial", sum(t.size for p in fim.axial for _, t in p.named_tensors())))
    rows.append(("projection", params.proj_w.size + params.proj_b.size))
    return rows


def cast_params(params: TvsrnParams) -> TvsrnParams:
    """Re-wrap every tensor in the current global dtype (sharing preserved)."""
    for t in params.parameters():
        t.data = t.data.astype(T.get_dtype())
        t.grad = None
    return params


@dataclass(eq=False)
class Tvsrn:
    """Config plus parameters; calling it runs :func:`forward`."""

    cfg: TvsrnConfig
    params: TvsrnParams

    @classmethod
    def create(cls, cfg: TvsrnConfig, seed: int = 0) -> "Tvsrn":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)))

    def __call__(self, x: Tensor) -> Tensor:
        return forward(x, self.params, self.cfg)

    def predict(self, cube: np.ndarray) -> np.ndarray:
        """No-grad forward on a (D, H, W) array; returns float32 (D', H, W)."""
        with T.no_grad():
            return forward(T.tensor(cube[None]), self.params, self.cfg).data.astype(np.float32)

    def with_config(self, **changes) -> "Tvsrn":
        return Tvsrn(replace(self.cfg, **changes), self.params)
