"""Synthetic CT-like phantoms, thick-slice degradation and dataset generation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .volume import HU_MAX, HU_MIN, Volume, write_volume

log = logging.getLogger(__name__)

KINDS = ("ellipsoid", "tube", "plate")

# HU ranges per tissue class
AIR = (-1000.0, -1000.0)
SOFT = (0.0, 80.0)
BONE = (300.0, 1200.0)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (16, 32, 32)
    seed: int = 0
    n_primitives: int = 10
    kinds: tuple[str, ...] = KINDS
    background: float = -1000.0
    blur_sigma: float = 1.0
    spacing_xy: float = 0.7

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"phantom dims must be three positive extents, got {self.dims}")
        unknown = set(self.kinds) - set(KINDS)
        if unknown or not self.kinds:
            raise ValueError(f"unknown primitive kinds {sorted(unknown)}")


def _tissue(rng: np.random.Generator, kind: str) -> float:
    u = rng.random()
    if kind == "plate":
        lo, hi = BONE
    elif kind == "tube":
        lo, hi = SOFT if u < 0.6 else (BONE if u < 0.8 else AIR)
    else:
        lo, hi = SOFT if u < 0.55 else (AIR if u < 0.8 else BONE)
    return float(rng.uniform(lo, hi)) if hi > lo else lo


def _unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def gen_phantom(spec: PhantomSpec) -> Volume:
    """Thin (1 mm) HU volume with randomly placed, blurred primitives.

    Coordinates are voxel units; later primitives overwrite earlier ones.
    """
    d, h, w = spec.dims
    rng = np.random.default_rng(spec.seed)
    vol = np.full(spec.dims, spec.background, dtype=np.float64)
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    pts = np.stack([zz, yy, xx], axis=-1).astype(np.float64)
    ext = np.array(spec.dims, dtype=np.float64)
    for _ in range(spec.n_primitives):
        kind = spec.kinds[rng.integers(len(spec.kinds))]
        value = _tissue(rng, kind)
        centre = rng.uniform(0.15, 0.85, 3) * ext
        if kind == "ellipsoid":
            radii = rng.uniform(0.12, 0.45, 3) * ext + 1.0
            inside = (((pts - centre) / radii) ** 2).sum(-1) <= 1.0
        elif kind == "tube":
            axis = _unit(rng)
            radius = rng.uniform(1.0, 0.12 * min(h, w) + 1.0)
            rel = pts - centre
            along = rel @ axis
            inside = (rel * rel).sum(-1) - along**2 <= radius**2
        else:
            normal = _unit(rng)
            half = rng.uniform(0.75, 2.0)
            reach = rng.uniform(0.2, 0.5) * ext.max()
            rel = pts - centre
            off = rel @ normal
            inside = (np.abs(off) <= half) & ((rel * rel).sum(-1) - off**2 <= reach**2)
        vol[inside] = value
    if spec.blur_sigma > 0:
        vol = gaussian_filter(vol, spec.blur_sigma, mode="nearest")
    vol = np.clip(vol, HU_MIN, HU_MAX)
    return Volume(vol.astype(np.float32), spacing_z=1.0, spacing_xy=spec.spacing_xy, unit="HU")


def thick_depth(thin_depth: int, scale: int) -> int:
    return (thin_depth - 1) // scale + 1


def thin_depth(thick_depth: int, scale: int) -> int:
    return (thick_depth - 1) * scale + 1


def degrade_to_thick(thin: Volume, scale: int, mode: str = "average") -> Volume:
    """Simulate thick slices aligned so thick ``i`` sits at thin ``scale·i``.

    ``average`` takes the mean over the centred window of ``scale`` thin
    slices (truncated at the volume edges); ``decimate`` keeps every
    ``scale``-th slice.
    """
    d = thin.depth
    if scale < 1 or d < scale + 1:
        raise ValueError(f"thin depth {d} too small for scale {scale}")
    n = thick_depth(d, scale)
    if mode == "decimate":
        out = thin.voxels[::scale][:n].copy()
    elif mode == "average":
        half = scale // 2
        src = thin.voxels.astype(np.float64)
        out = np.stack([src[max(0, scale * i - half) : min(d, scale * i + half + 1)].mean(axis=0) for i in range(n)])
    else:
        raise ValueError(f"unknown degradation mode {mode!r}")
    return thin.with_voxels(out.astype(np.float32), spacing_z=thin.spacing_z * scale)


def simulate_acquisition(
    thin: Volume, scale: int, rng: np.random.Generator, z_blur: float = 1.0, noise_hu: float = 20.0
) -> Volume:
    """Stand-in for a genuinely reconstructed thick series.

    Broader slice profile (z blur before averaging) plus additive noise, so it
    differs systematically from plain decimation.
    """
    vox = thin.voxels.astype(np.float64)
    if z_blur > 0:
        vox = gaussian_filter1d(vox, z_blur, axis=0, mode="nearest")
    thick = degrade_to_thick(thin.with_voxels(vox.astype(np.float32)), scale, "average")
    noisy = thick.voxels + rng.normal(0.0, noise_hu, thick.shape)
    return thick.with_voxels(np.clip(noisy, HU_MIN, HU_MAX).astype(np.float32))


THICK_MODES = ("real", "average", "decimate")


def make_thick(thin: Volume, scale: int, mode: str, rng: np.random.Generator) -> Volume:
    if mode == "real":
        return simulate_acquisition(thin, scale, rng)
    return degrade_to_thick(thin, scale, mode)


def case_rng(seed: int, case: int, stream: int = 0) -> np.random.Generator:
    """Independent RNG per (seed, case) so generation order never matters."""
    return np.random.default_rng(np.random.SeedSequence([seed, case, stream]))


@dataclass(frozen=True)
class Case:
    case_id: str
    thin: Volume
    thick: Volume
    split: str = "train"


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    thin_path: str
    thick_path: str
    split: str

    def line(self) -> str:
        return f"{self.case_id}\t{self.thin_path}\t{self.thick_path}\t{self.split}\n"


def split_counts(n: int, split) -> tuple[int, int, int]:
    """Counts (train, val, test) from explicit counts or fractions."""
    split = tuple(split)
    if len(split) != 3:
        raise ValueError("split needs three entries (train, val, test)")
    if all(float(s).is_integer() and s >= 1 or s == 0 for s in split) and sum(split) == n:
        return tuple(int(s) for s in split)
    total = float(sum(split))
    tr = int(round(n * split[0] / total))
    va = int(round(n * split[1] / total))
    return tr, va, n - tr - va


def assign_splits(n: int, split, seed: int) -> list[str]:
    tr, va, te = split_counts(n, split)
    labels = np.array(["train"] * tr + ["val"] * va + ["test"] * te)
    return list(labels[np.random.default_rng([seed, 7919]).permutation(n)])


@dataclass
class DatasetSpec:
    thick_depth: int = 8
    scale: int = 5
    height: int = 32
    width: int = 32
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    @property
    def thin_dims(self) -> tuple[int, int, int]:
        return (thin_depth(self.thick_depth, self.scale), self.height, self.width)


def generate_case(index: int, spec: DatasetSpec, seed: int, mode: str = "real") -> tuple[Volume, Volume]:
    """Thin phantom and its thick counterpart for case ``index``."""
    pseed = int(case_rng(seed, index, 0).integers(2**31))
    thin = gen_phantom(replace(spec.phantom, dims=spec.thin_dims, seed=pseed))
    thick = make_thick(thin, spec.scale, mode, case_rng(seed, index, 1))
    return thin, thick


def make_cases(n: int, spec: DatasetSpec, seed: int, mode: str = "real", split=(0.4, 0.2, 0.4)) -> list[Case]:
    labels = assign_splits(n, split, seed)
    out = []
    for i in range(n):
        thin, thick = generate_case(i, spec, seed, mode)
        out.append(Case(f"case{i:03d}", thin, thick, labels[i]))
    return out


def make_dataset(
    n_pairs: int,
    spec: DatasetSpec,
    out_dir,
    seed: int = 0,
    mode: str = "real",
    split=(0.4, 0.2, 0.4),
) -> list[ManifestEntry]:
    """Write thin/thick pairs plus ``manifest.tsv``; returns the manifest entries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in make_cases(n_pairs, spec, seed, mode, split):
        thin_p, thick_p = f"{case.case_id}_thin.vol", f"{case.case_id}_thick.vol"
        write_volume(case.thin, out / thin_p)
        write_volume(case.thick, out / thick_p)
        entries.append(ManifestEntry(case.case_id, thin_p, thick_p, case.split))
    (out / "manifest.tsv").write_text("".join(e.line() for e in entries))
    log.info("wrote %d cases to %s", len(entries), out)
    return entries


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        entries.append(ManifestEntry(*parts))
    return entries
