"""TVCK tensor archives plus key=value config sidecars.

Layout (little-endian): ``b"TVCK"``, u32 tensor count, then per tensor a u16
name length, the UTF-8 name, u8 ndim, ndim u32 extents and a float32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import TvsrnConfig, TvsrnParams, init_params
from .volume import FormatError

MAGIC = b"TVCK"


def save_tensors(named: list[tuple[str, np.ndarray]], path) -> None:
    seen = set()
    chunks = [MAGIC, struct.pack("<I", len(named))]
    for name, arr in named:
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read an archive into an ordered name -> float32 array dict."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"checkpoint truncated, needed {n} bytes", pos)
        out = raw[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise FormatError("not a TVCK checkpoint (bad magic)", 0)
    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after last tensor", pos)
    return out


def config_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".cfg")


def save_model(params: TvsrnParams, cfg: TvsrnConfig, path, extra: list[tuple[str, np.ndarray]] = ()) -> None:
    named = [(n, t.data) for n, t in params.named_tensors()] + list(extra)
    save_tensors(named, path)
    config_path(path).write_text(cfg.to_text())


def load_params_into(params: TvsrnParams, tensors: dict[str, np.ndarray]) -> None:
    """Copy archive values into existing tensors (keeps TAB sharing intact)."""
    for name, t in params.named_tensors():
        if name not in tensors:
            raise FormatError(f"checkpoint lacks tensor {name!r}", 0)
        arr = tensors[name]
        if arr.shape != t.shape:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, model expects {t.shape}", 0)
        t.data = arr.astype(t.data.dtype)


def load_model(path, cfg: TvsrnConfig | None = None) -> tuple[TvsrnConfig, TvsrnParams, dict[str, np.ndarray]]:
    """Returns (config, params, all tensors); config read from the sidecar unless given."""
    if cfg is None:
        side = config_path(path)
        if not side.exists():
            raise FileNotFoundError(f"config sidecar {side} not found")
        cfg = TvsrnConfig.from_text(side.read_text())
    tensors = load_tensors(path)
    params = init_params(cfg, 0)
    load_params_into(params, tensors)
    return cfg, params, tensors
