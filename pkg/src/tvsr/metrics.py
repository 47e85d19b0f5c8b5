"""PSNR, SSIM, one-sided Wilcoxon signed-rank test and report emission."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import norm, rankdata

from .volume import Volume, as_normalized

SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _arrays(a, b) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(a, Volume):
        a = as_normalized(a).voxels
    if isinstance(b, Volume):
        b = as_normalized(b).voxels
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_val: float = 1.0) -> float:
    """10·log10(max² / MSE) over all voxels; +inf when identical."""
    a, b = _arrays(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def _blur(x: np.ndarray) -> np.ndarray:
    # radius 5 -> 11 taps; "reflect" is the symmetric (edge-repeating) mode
    return gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=(SSIM_WIN // 2) / SSIM_SIGMA)


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM of two 2-D images (float64)."""
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b = _blur(a), _blur(b)
    var_a = _blur(a * a) - mu_a * mu_a
    var_b = _blur(b * b) - mu_b * mu_b
    cov = _blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean over axial slices of the 2-D Gaussian-window SSIM (L = 1)."""
    a, b = _arrays(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-2] < SSIM_WIN or a.shape[-1] < SSIM_WIN:
        raise ValueError(f"SSIM needs slices of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape[-2:]}")
    return float(np.mean([ssim_map(x, y).mean() for x, y in zip(a, b)]))


# ------------------------------------------------------------------ wilcoxon


def signed_rank_distribution(ranks2: Sequence[int]) -> np.ndarray:
    """Null pmf of the doubled positive-rank sum for integer doubled ranks.

    Entry ``k`` is P(2·W+ == k) when every sign is an independent fair coin.
    """
    total = int(sum(ranks2))
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in ranks2:
        r = int(r)
        nxt = counts.copy()
        nxt[r:] += counts[: total + 1 - r]
        counts = nxt
    return counts / 2.0 ** len(ranks2)


def wilcoxon_one_sided(diffs, exact_max: int = 25, method: str = "auto") -> float:
    """p-value for H1: median(diff) > 0.

    Zero differences are dropped and tied magnitudes share mid-ranks.  Exact
    enumeration for n <= ``exact_max``; otherwise normal approximation with
    continuity and tie correction.
    """
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("all differences are zero; the signed-rank test is undefined")
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))  # mid-ranks
    w_plus = float(ranks[d > 0].sum())
    if method == "exact" or (method == "auto" and n <= exact_max):
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        pmf = signed_rank_distribution(ranks2)
        return float(min(1.0, pmf[int(round(2 * w_plus)) :].sum()))
    mean = n * (n + 1) / 4.0
    _, t = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(t**3 - t)) / 48.0
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return float(norm.sf(z))


# ------------------------------------------------------------ slice pairs

CATEGORIES = {"Match": 0, "Near": 1, "Far": 2}


def slice_pair_indices(thick_depth: int, scale: int, offset: int) -> list[tuple[int, int]]:
    """(thin index, thick index) pairs ``offset`` thin slices from a match position."""
    thin_depth = (thick_depth - 1) * scale + 1
    out = []
    for i in range(thick_depth):
        for k in sorted({scale * i - offset, scale * i + offset}):
            if 0 <= k < thin_depth:
                out.append((k, i))
    return out


def slice_pair_analysis(thin: Volume, thick: Volume, scale: int) -> dict[str, dict[str, float]]:
    """Mean PSNR/SSIM per category (Match, Near, Far) with pair counts."""
    a = as_normalized(thin).voxels
    b = as_normalized(thick).voxels
    if a.shape[0] != (b.shape[0] - 1) * scale + 1 or a.shape[1:] != b.shape[1:]:
        raise ValueError(f"thin {a.shape} and thick {b.shape} are not aligned at scale {scale}")
    out = {}
    for name, off in CATEGORIES.items():
        if name == "Far" and scale < 5:
            warnings.warn(f"scale {scale} < 5: Far slices are not distinct from other categories; omitted")
            continue
        pairs = slice_pair_indices(b.shape[0], scale, off)
        ps = [psnr(a[k], b[i]) for k, i in pairs]
        ss = [ssim(a[k], b[i]) for k, i in pairs]
        out[name] = {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "pairs": len(pairs)}
    return out


# ----------------------------------------------------------------- reports


@dataclass
class MetricReport:
    rows: list[tuple[str, float, float]] = field(default_factory=list)  # (case, psnr, ssim)
    comparisons: list[dict] = field(default_factory=list)

    def add(self, case_id: str, pred, truth) -> None:
        self.rows.append((case_id, psnr(pred, truth), ssim(pred, truth)))

    def values(self, metric: str) -> np.ndarray:
        col = {"psnr": 1, "ssim": 2}[metric]
        return np.array([r[col] for r in self.rows], dtype=np.float64)

    def summary(self) -> dict[str, dict]:
        out = {}
        for m in ("psnr", "ssim"):
            v = self.values(m)
            mean, std = float(v.mean()), float(v.std())
            out[m] = {"mean": mean, "std": std, "text": f"{mean:.3f} ± {std:.3f}"}
        return out

    def by_case(self) -> dict[str, tuple[float, float]]:
        return {c: (p, s) for c, p, s in self.rows}


def compare_reports(a: MetricReport, b: MetricReport, label_a: str = "A", label_b: str = "B") -> dict:
    """One-sided Wilcoxon p per metric for H1: ``a`` beats ``b`` on matched cases."""
    ca, cb = a.by_case(), b.by_case()
    common = [c for c in ca if c in cb]
    if not common:
        raise ValueError("reports share no case ids")
    out = {"a": label_a, "b": label_b, "n": len(common)}
    for j, m in enumerate(("psnr", "ssim")):
        diffs = [ca[c][j] - cb[c][j] for c in common]
        try:
            out[f"p_{m}"] = wilcoxon_one_sided(diffs)
        except ValueError:
            out[f"p_{m}"] = None
    return out


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.6f}"


def report_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "psnr", "ssim"])
    for c, p, s in report.rows:
        w.writerow([c, _fmt(p), _fmt(s)])
    return buf.getvalue()


def report_json(report: MetricReport) -> str:
    doc = {
        "rows": [{"case": c, "psnr": p, "ssim": s} for c, p, s in report.rows],
        "summary": report.summary(),
        "comparisons": report.comparisons,
    }
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def emit_report(report: MetricReport, path_csv, path_json) -> None:
    if not report.rows:
        raise ValueError("empty report")
    Path(path_csv).parent.mkdir(parents=True, exist_ok=True)
    Path(path_csv).write_text(report_csv(report))
    Path(path_json).write_text(report_json(report), encoding="utf-8")


def read_report(path_json) -> MetricReport:
    doc = json.loads(Path(path_json).read_text(encoding="utf-8"))
    rows = [(r["case"], float(r["psnr"]), float(r["ssim"])) for r in doc["rows"]]
    return MetricReport(rows, list(doc.get("comparisons", [])))
