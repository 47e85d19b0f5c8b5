"""Cube sampling, L1 loss, Adam and the training loop with resumable checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import config_path, load_params_into, load_tensors, save_model
from .model import Tvsrn
from .swin import ConfigError
from .tensor import Tensor
from .volume import Volume, as_normalized

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch: int = 1
    steps: int = 1000
    seed: int = 0
    cube: tuple[int, int, int] = (4, 64, 64)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    random_crop: bool = True
    hflip: bool = True
    ckpt_every: int = 0  # 0 -> only at the end

    def __post_init__(self):
        if self.batch < 1 or self.steps < 0 or self.lr < 0:
            raise ConfigError("batch must be >= 1, steps and lr non-negative")
        if len(self.cube) != 3 or min(self.cube) < 1:
            raise ConfigError(f"cube must be three positive extents, got {self.cube}")

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return replace(base or cls(), **parse_train_values(dict(_kv_lines(text))))


def _kv_lines(text: str):
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        yield k.strip(), v.strip()


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def parse_train_values(values: dict) -> dict:
    """Convert string values to TrainConfig field types; unknown keys raise."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for k, v in values.items():
        if k not in kinds:
            raise ConfigError(f"unknown training key {k!r}")
        if k == "cube":
            out[k] = tuple(int(x) for x in str(v).split(",")) if isinstance(v, str) else tuple(v)
        elif k in ("random_crop", "hflip"):
            out[k] = _bool(v)
        elif k in ("batch", "steps", "seed", "ckpt_every"):
            out[k] = int(v)
        else:
            out[k] = float(v)
    return out


@dataclass(frozen=True)
class Pair:
    thick: np.ndarray  # normalized (D, H, W)
    thin: np.ndarray  # normalized ((D-1)·scale+1, H, W)

    @classmethod
    def from_volumes(cls, thick: Volume, thin: Volume, scale: int) -> "Pair":
        a, b = as_normalized(thick).voxels, as_normalized(thin).voxels
        if b.shape[0] != (a.shape[0] - 1) * scale + 1 or a.shape[1:] != b.shape[1:]:
            raise ValueError(f"thin {b.shape} is not aligned with thick {a.shape} at scale {scale}")
        return cls(a, b)


def sample_pair(pair: Pair, cfg: TrainConfig, scale: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random aligned crop: thick (Dc, Hc, Wc) and thin ((Dc-1)·scale+1, Hc, Wc)."""
    dc, hc, wc = cfg.cube
    d, h, w = pair.thick.shape
    if dc > d or hc > h or wc > w:
        raise ValueError(f"cube {cfg.cube} does not fit volume {pair.thick.shape}")
    if cfg.random_crop:
        d0, y0, x0 = (int(rng.integers(n - c + 1)) for n, c in ((d, dc), (h, hc), (w, wc)))
    else:
        d0 = y0 = x0 = 0
    lr = pair.thick[d0 : d0 + dc, y0 : y0 + hc, x0 : x0 + wc]
    hr = pair.thin[scale * d0 : scale * d0 + (dc - 1) * scale + 1, y0 : y0 + hc, x0 : x0 + wc]
    if cfg.hflip and rng.random() < 0.5:
        lr, hr = lr[..., ::-1], hr[..., ::-1]
    return np.ascontiguousarray(lr), np.ascontiguousarray(hr)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise T.DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    return T.mean(T.abs(T.sub(pred, target)))


def unique_parameters(params: Sequence[Tensor]) -> list[Tensor]:
    seen, out = set(), []
    for t in params:
        if id(t) not in seen:
            seen.add(id(t))
            out.append(t)
    return out


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState, cfg: TrainConfig) -> None:
    """In-place Adam update with bias correction; aliased tensors move once."""
    params = unique_parameters(params)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if cfg.lr == 0:
            continue
        upd = (cfg.lr / c1) * m / (np.sqrt(v / c2) + cfg.eps)
        p.data = (p.data - upd).astype(p.data.dtype)


@dataclass
class TrainState:
    adam: AdamState
    rng: np.random.Generator
    losses: list[float] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.adam.step


def new_state(seed: int) -> TrainState:
    return TrainState(AdamState(), np.random.default_rng(seed))


def state_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".state.json")


def save_checkpoint(model: Tvsrn, state: TrainState, path, tcfg: TrainConfig | None = None) -> None:
    """Weights, Adam moments (``adam.m.*``/``adam.v.*``) and a JSON state sidecar."""
    names = [n for n, _ in model.params.named_tensors()]
    extra = []
    if state.adam.m:
        extra = [(f"adam.m.{n}", a) for n, a in zip(names, state.adam.m)]
        extra += [(f"adam.v.{n}", a) for n, a in zip(names, state.adam.v)]
    save_model(model.params, model.cfg, path, extra)
    meta = {
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "losses": [float(x) for x in state.losses],
        "train": asdict(tcfg) if tcfg else None,
    }
    state_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[Tvsrn, TrainState]:
    from .model import TvsrnConfig, init_params

    cfg = TvsrnConfig.from_text(config_path(path).read_text())
    tensors = load_tensors(path)
    params = init_params(cfg, 0)
    load_params_into(params, tensors)
    model = Tvsrn(cfg, params)
    state = new_state(0)
    sp = state_path(path)
    if sp.exists():
        meta = json.loads(sp.read_text())
        state.adam.step = int(meta["step"])
        state.rng.bit_generator.state = meta["rng"]
        state.losses = list(meta["losses"])
        names = [n for n, _ in params.named_tensors()]
        if f"adam.m.{names[0]}" in tensors:
            state.adam.m = [tensors[f"adam.m.{n}"].copy() for n in names]
            state.adam.v = [tensors[f"adam.v.{n}"].copy() for n in names]
    return model, state


def train_step(model: Tvsrn, pairs: Sequence[Pair], cfg: TrainConfig, state: TrainState) -> float:
    """One optimisation step; batch > 1 averages per-sample gradients."""
    params = model.params.parameters()
    model.params.zero_grad()
    total = 0.0
    for _ in range(cfg.batch):
        pair = pairs[int(state.rng.integers(len(pairs)))] if len(pairs) > 1 else pairs[0]
        lr, hr = sample_pair(pair, cfg, model.cfg.scale, state.rng)
        loss = l1_loss(model(T.tensor(lr[None])), T.tensor(hr))
        T.backward(loss)
        total += float(loss.item())
    if cfg.batch > 1:
        for p in params:
            p.grad = p.grad / cfg.batch
    value = total / cfg.batch
    if not math.isfinite(value):
        raise NumericError(f"loss became {value} at step {state.step + 1}")
    adam_step(params, state.adam, cfg)
    state.losses.append(value)
    return value


def train(
    pairs: Sequence[Pair],
    model: Tvsrn,
    cfg: TrainConfig,
    state: TrainState | None = None,
    out_dir=None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainState:
    """Run until ``cfg.steps`` total steps; writes ``loss.csv`` and checkpoints when ``out_dir`` is set."""
    if not pairs:
        raise ValueError("training needs at least one volume pair")
    state = state or new_state(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while state.step < cfg.steps:
        value = train_step(model, pairs, cfg, state)
        if on_step:
            on_step(state.step, value)
        if out is not None and cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
            save_checkpoint(model, state, out / f"step{state.step:06d}.ck", cfg)
    if out is not None:
        write_loss_csv(state.losses, out / "loss.csv")
        save_checkpoint(model, state, out / "final.ck", cfg)
    return state


def write_loss_csv(losses: Sequence[float], path) -> None:
    lines = ["step,loss"] + [f"{i},{v!r}" for i, v in enumerate(losses, 1)]
    Path(path).write_text("\n".join(lines) + "\n")


def moving_average(xs: Sequence[float], k: int) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) < k:
        return np.array([xs.mean()]) if len(xs) else xs
    c = np.cumsum(np.concatenate([[0.0], xs]))
    return (c[k:] - c[:-k]) / k
