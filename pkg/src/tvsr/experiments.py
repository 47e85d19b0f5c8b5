"""Desk-scale experiments: domain gap (real vs pseudo thick pairs) and ablations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .infer import infer_with_model
from .metrics import MetricReport, compare_reports, wilcoxon_one_sided
from .model import Tvsrn, TvsrnConfig
from .synth import Case, DatasetSpec, gen_phantom, make_thick
from .synth import case_rng
from .train import Pair, TrainConfig, train

log = logging.getLogger(__name__)

TRAIN_MODES = {"real_pair": "real", "pseudo_pair": "decimate"}


@dataclass
class ExperimentSetup:
    data: DatasetSpec = field(default_factory=lambda: DatasetSpec(thick_depth=4, scale=5, height=32, width=32))
    model: TvsrnConfig = field(default_factory=lambda: TvsrnConfig(c=4, n_enc=2))
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(lr=1e-3, steps=300, cube=(4, 32, 32), random_crop=True, hflip=True)
    )
    n_train: int = 8
    n_test: int = 20
    seed: int = 0


def _phantom(spec: DatasetSpec, seed: int, index: int):
    pseed = int(case_rng(seed, index, 0).integers(2**31))
    return gen_phantom(replace(spec.phantom, dims=spec.thin_dims, seed=pseed))


def build_cases(spec: DatasetSpec, seed: int, start: int, n: int, mode: str) -> list[Case]:
    """Cases ``start .. start+n-1`` with thick inputs made by ``mode``."""
    out = []
    for i in range(start, start + n):
        thin = _phantom(spec, seed, i)
        thick = make_thick(thin, spec.scale, mode, case_rng(seed, i, 1))
        out.append(Case(f"case{i:03d}", thin, thick))
    return out


def fit(cases: list[Case], setup: ExperimentSetup, model_cfg: TvsrnConfig | None = None) -> Tvsrn:
    cfg = model_cfg or setup.model
    model = Tvsrn.create(replace(cfg, scale=setup.data.scale, depth=setup.train.cube[0]), setup.seed)
    pairs = [Pair.from_volumes(c.thick, c.thin, setup.data.scale) for c in cases]
    train(pairs, model, setup.train)
    return model


def evaluate(model: Tvsrn, cases: list[Case]) -> MetricReport:
    rep = MetricReport()
    for c in cases:
        rep.add(c.case_id, infer_with_model(c.thick, model), c.thin)
    return rep


def domain_gap_experiment(setup: ExperimentSetup | None = None, modes=("real_pair", "pseudo_pair")):
    """Train one model per thick-generation mode; test both on "real" thick inputs.

    Returns (report_a, report_b, p) with ``p`` the one-sided Wilcoxon p-value for
    PSNR(a) > PSNR(b) over test cases.
    """
    setup = setup or ExperimentSetup()
    test = build_cases(setup.data, setup.seed, 10_000, setup.n_test, "real")
    reports = []
    for mode in modes:
        cases = build_cases(setup.data, setup.seed, 0, setup.n_train, TRAIN_MODES[mode])
        reports.append(evaluate(fit(cases, setup), test))
        log.info("%s: mean psnr %.3f", mode, reports[-1].values("psnr").mean())
    a, b = reports
    diffs = a.values("psnr") - b.values("psnr")
    p = wilcoxon_one_sided(diffs) if np.any(diffs != 0) else 0.5
    a.comparisons.append(compare_reports(a, b, modes[0], modes[1]))
    return a, b, p


def ablation_experiment(setup: ExperimentSetup | None = None, variants: dict[str, TvsrnConfig] | None = None):
    """Validation reports per variant on a shared dataset and step budget."""
    setup = setup or ExperimentSetup()
    if variants is None:
        base = setup.model
        variants = {
            "full": base,
            "no_tab": replace(base, variant="no_tab"),
            "encoder_only": replace(base, variant="encoder_only", c=4 * base.c, n_enc=2 * base.n_enc),
        }
    train_cases = build_cases(setup.data, setup.seed, 0, setup.n_train, "average")
    val_cases = build_cases(setup.data, setup.seed, 10_000, setup.n_test, "average")
    return {name: evaluate(fit(train_cases, setup, cfg), val_cases) for name, cfg in variants.items()}
