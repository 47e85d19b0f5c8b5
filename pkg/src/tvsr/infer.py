"""Sliding-window inference over whole volumes with overlap averaging."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .volume import Volume, as_normalized


def depth_starts(d: int, dc: int) -> list[int]:
    """Starts 0, dc-1, 2(dc-1), ... plus an end-aligned tail if needed."""
    if d < dc:
        raise ValueError(f"volume depth {d} is smaller than window depth {dc}")
    step = max(1, dc - 1)
    starts = list(range(0, d - dc + 1, step))
    if starts[-1] + dc < d:
        starts.append(d - dc)
    return starts


def tile_starts(n: int, tile: int) -> list[int]:
    """Zero-overlap tiles; the last one is end-aligned when ``tile`` does not divide ``n``."""
    if n < tile:
        raise ValueError(f"extent {n} is smaller than tile {tile}")
    starts = list(range(0, n - tile + 1, tile))
    if starts[-1] + tile < n:
        starts.append(n - tile)
    return starts


@dataclass(frozen=True)
class SlidePlan:
    dims: tuple[int, int, int]
    window: tuple[int, int, int]
    scale: int
    depth: tuple[int, ...]
    rows: tuple[int, ...]
    cols: tuple[int, ...]

    @property
    def out_dims(self) -> tuple[int, int, int]:
        d, h, w = self.dims
        return ((d - 1) * self.scale + 1, h, w)

    @property
    def out_window_depth(self) -> int:
        return (self.window[0] - 1) * self.scale + 1

    def tiles(self) -> list[tuple[int, int, int]]:
        """(d0, y0, x0) in deterministic processing order."""
        return [(d, y, x) for d in self.depth for y in self.rows for x in self.cols]

    def coverage(self) -> np.ndarray:
        """Per-output-voxel count of windows writing it."""
        cnt = np.zeros(self.out_dims, dtype=np.int64)
        _, hc, wc = self.window
        od = self.out_window_depth
        for d0, y0, x0 in self.tiles():
            cnt[self.scale * d0 : self.scale * d0 + od, y0 : y0 + hc, x0 : x0 + wc] += 1
        return cnt


def plan_slide(dims, window, scale: int) -> SlidePlan:
    d, h, w = dims
    dc, hc, wc = window
    return SlidePlan(
        tuple(dims), tuple(window), scale,
        tuple(depth_starts(d, dc)), tuple(tile_starts(h, hc)), tuple(tile_starts(w, wc)),
    )


def infer_volume(
    thick: Volume,
    predict: Callable[[np.ndarray], np.ndarray],
    plan: SlidePlan,
    threads: int = 1,
) -> Volume:
    """Run ``predict`` on every tile and average overlapping thin voxels.

    ``predict`` maps a (Dc, Hc, Wc) normalized cube to ((Dc-1)·scale+1, Hc, Wc).
    Sums are float64 and added in plan order regardless of ``threads``, so the
    result is bit-identical for any thread count.
    """
    vox = as_normalized(thick).voxels
    if vox.shape != plan.dims:
        raise ValueError(f"plan is for {plan.dims}, volume is {vox.shape}")
    _, hc, wc = plan.window
    dc = plan.window[0]
    od, s = plan.out_window_depth, plan.scale
    tiles = plan.tiles()

    def run(t):
        d0, y0, x0 = t
        out = np.asarray(predict(vox[d0 : d0 + dc, y0 : y0 + hc, x0 : x0 + wc]))
        if out.shape != (od, hc, wc):
            raise ValueError(f"model returned {out.shape}, expected {(od, hc, wc)}")
        return out

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            preds = list(pool.map(run, tiles))
    else:
        preds = map(run, tiles)
    acc = np.zeros(plan.out_dims, dtype=np.float64)
    cnt = np.zeros(plan.out_dims, dtype=np.int64)
    for (d0, y0, x0), out in zip(tiles, preds):
        acc[s * d0 : s * d0 + od, y0 : y0 + hc, x0 : x0 + wc] += out
        cnt[s * d0 : s * d0 + od, y0 : y0 + hc, x0 : x0 + wc] += 1
    mean = np.clip(acc / cnt, 0.0, 1.0).astype(np.float32)
    return Volume(mean, spacing_z=thick.spacing_z / s, spacing_xy=thick.spacing_xy, unit="normalized")


def infer_with_model(thick: Volume, model, tile=None, threads: int = 1) -> Volume:
    """Convenience wrapper: plan from the model's depth and run :meth:`Tvsrn.predict`."""
    d, h, w = thick.shape
    if tile is None:
        tile = (model.cfg.depth, h, w)
    if tile[0] != model.cfg.depth:
        raise ValueError(f"tile depth {tile[0]} must equal the model's input depth {model.cfg.depth}")
    plan = plan_slide(thick.shape, tile, model.cfg.scale)
    return infer_volume(thick, model.predict, plan, threads)
