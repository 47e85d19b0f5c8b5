"""``tvsr`` command line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .model import TvsrnConfig, count_params_total, init_params, param_summary
from .swin import ConfigError
from .volume import FormatError

log = logging.getLogger("tvsr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MODEL_KEYS = {f.name for f in fields(TvsrnConfig)} - {"depth"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _triple(text: str) -> tuple[int, int, int]:
    parts = [int(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected D,H,W, got {text!r}")
    return tuple(parts)


def _pair(text: str) -> tuple[float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected CENTER,WIDTH, got {text!r}")
    return tuple(parts)


def read_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} not found")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _model_values(values: dict) -> dict:
    kinds = {f.name: f.type for f in fields(TvsrnConfig)}
    out = {}
    for k, v in values.items():
        kind = kinds[k]
        out[k] = str(v) if kind == "str" else float(v) if kind == "float" else int(v)
    return out


def split_config(values: dict) -> tuple[dict, dict]:
    """Partition merged key=value settings into (model, train) dicts; unknown keys raise."""
    from .train import TrainConfig

    train_keys = {f.name for f in fields(TrainConfig)}
    model, trn = {}, {}
    for k, v in values.items():
        if k in MODEL_KEYS:
            model[k] = v
        elif k in train_keys:
            trn[k] = v
        else:
            raise UsageError(f"unknown config key {k!r}")
    return model, trn


def echo(title: str, items: dict) -> None:
    print(f"# {title}")
    for k, v in items.items():
        print(f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
    sys.stdout.flush()


def print_model_summary(cfg: TvsrnConfig, out=None) -> str:
    """Per-block and total parameter counts, variant and depth law."""
    params = init_params(cfg, 0)
    rows = param_summary(params)
    total = count_params_total(params)
    lines = [
        f"variant: {cfg.variant}",
        f"N={cfg.n_enc} C={cfg.c} M={cfg.m_fim if cfg.variant != 'encoder_only' else 0} scale={cfg.scale}",
        f"depth: {cfg.depth} -> {cfg.out_depth}  (D-1)*{cfg.scale}+1",
    ]
    width = max(len(n) for n, _ in rows)
    lines += [f"  {n:<{width}}  {k:>10,}" for n, k in rows]
    lines.append(f"  {'total':<{width}}  {total:>10,}")
    text = "\n".join(lines) + "\n"
    (out or sys.stdout).write(text)
    return text


# ---------------------------------------------------------------- commands


def _model_cfg_from(args, file_values: dict) -> TvsrnConfig:
    variant = args.variant or file_values.get("variant", "full")
    values = _model_values(file_values)
    for k in ("c", "n_enc", "m_fim", "scale"):
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    values.pop("variant", None)
    return TvsrnConfig.for_variant(variant, **values)


def cmd_count_params(args) -> int:
    cfg = _model_cfg_from(args, read_config_file(args.config) if args.config else {})
    print_model_summary(cfg)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .synth import DatasetSpec, make_dataset

    spec = DatasetSpec(thick_depth=args.thick_depth, scale=args.scale, height=args.size, width=args.size)
    echo("gen-data", {"n": args.n, "out": args.out, "seed": args.seed, "mode": args.mode,
                      "thick_depth": args.thick_depth, "scale": args.scale, "size": args.size, "split": args.split})
    split = tuple(float(x) for x in args.split.split(","))
    entries = make_dataset(args.n, spec, args.out, seed=args.seed, mode=args.mode, split=split)
    counts = {s: sum(e.split == s for e in entries) for s in ("train", "val", "test")}
    print(f"wrote {len(entries)} cases to {args.out} " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def _load_pairs(data_dir, split: str, scale: int):
    from .synth import read_manifest
    from .train import Pair
    from .volume import load_any

    root = Path(data_dir)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest {manifest} not found")
    entries = [e for e in read_manifest(manifest) if split in ("all", e.split)]
    if not entries:
        raise ValueError(f"no cases with split {split!r} in {manifest}")
    return [Pair.from_volumes(load_any(root / e.thick_path), load_any(root / e.thin_path), scale) for e in entries]


def cmd_train(args) -> int:
    from .model import Tvsrn
    from .train import TrainConfig, load_checkpoint, parse_train_values, train

    file_values = read_config_file(args.config) if args.config else {}
    model_vals, train_vals = split_config(file_values)
    tvals = parse_train_values(train_vals)
    for k in ("lr", "steps", "seed", "batch", "ckpt_every"):
        v = getattr(args, k)
        if v is not None:
            tvals[k] = v
    if args.cube is not None:
        tvals["cube"] = args.cube
    if args.no_aug:
        tvals["random_crop"] = tvals["hflip"] = False
    tcfg = TrainConfig(**tvals)
    if args.resume:
        model, state = load_checkpoint(args.resume)
    else:
        mcfg = replace(_model_cfg_from(args, model_vals), depth=tcfg.cube[0])
        model, state = Tvsrn.create(mcfg, tcfg.seed), None
    echo("model", {f.name: getattr(model.cfg, f.name) for f in fields(model.cfg)})
    echo("train", {f.name: getattr(tcfg, f.name) for f in fields(tcfg)})
    pairs = _load_pairs(args.data, args.split, model.cfg.scale)

    def progress(step, loss):
        if step % args.log_every == 0 or step == tcfg.steps:
            print(f"step {step} loss {loss:.6f}", flush=True)

    state = train(pairs, model, tcfg, state, out_dir=args.out, on_step=progress)
    print(f"final loss {state.losses[-1] if state.losses else float('nan'):.6f}; checkpoint {Path(args.out) / 'final.ck'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .checkpoint import load_model
    from .infer import infer_with_model
    from .model import Tvsrn
    from .volume import load_any, save_any

    cfg, params, _ = load_model(args.weights)
    model = Tvsrn(cfg, params)
    thick = load_any(args.input)
    tile = args.tile or (cfg.depth, thick.shape[1], thick.shape[2])
    echo("infer", {"weights": args.weights, "input": args.input, "output": args.output,
                   "tile": tile, "threads": args.threads})
    out = infer_with_model(thick, model, tile, threads=args.threads)
    save_any(out, args.output)
    print(f"wrote {args.output} shape {out.shape} spacing_z {out.spacing_z:g}")
    return EXIT_OK


_STRIP = ("_pred", "_thin", "_thick", "_sr")


def case_key(path: Path) -> str:
    stem = path.stem
    for s in _STRIP:
        if stem.endswith(s):
            return stem[: -len(s)]
    return stem


def _volumes_in(d) -> dict[str, Path]:
    root = Path(d)
    if not root.is_dir():
        raise FileNotFoundError(f"directory {root} not found")
    files = sorted(p for p in root.iterdir() if p.suffix in (".vol", ".nii") and not p.stem.endswith("_thick"))
    return {case_key(p): p for p in files}


def cmd_eval(args) -> int:
    from .metrics import MetricReport, compare_reports, emit_report, read_report
    from .volume import load_any

    preds, truths = _volumes_in(args.pred_dir), _volumes_in(args.truth_dir)
    common = [k for k in preds if k in truths]
    if not common:
        raise ValueError(f"no matching case ids between {args.pred_dir} and {args.truth_dir}")
    echo("eval", {"pred_dir": args.pred_dir, "truth_dir": args.truth_dir, "out": args.out, "cases": len(common)})
    rep = MetricReport()
    for k in common:
        rep.add(k, load_any(preds[k]), load_any(truths[k]))
    if args.compare:
        rep.comparisons.append(compare_reports(rep, read_report(args.compare), "this", str(args.compare)))
    out = Path(args.out)
    stem = out.with_suffix("")
    emit_report(rep, stem.with_suffix(".csv"), stem.with_suffix(".json"))
    s = rep.summary()
    print(f"PSNR {s['psnr']['text']}  SSIM {s['ssim']['text']}  (n={len(rep.rows)})")
    for c in rep.comparisons:
        print(f"wilcoxon one-sided vs {c['b']}: p_psnr={c['p_psnr']} p_ssim={c['p_ssim']}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .metrics import slice_pair_analysis
    from .volume import load_any

    echo("analyze", {"thin": args.thin, "thick": args.thick, "scale": args.scale})
    table = slice_pair_analysis(load_any(args.thin), load_any(args.thick), args.scale)
    print(f"{'category':<8} {'pairs':>5} {'psnr':>9} {'ssim':>7}")
    for name, row in table.items():
        print(f"{name:<8} {row['pairs']:>5} {row['psnr']:>9.3f} {row['ssim']:>7.4f}")
    return EXIT_OK


def cmd_domain_gap(args) -> int:
    from .experiments import ExperimentSetup, domain_gap_experiment
    from .metrics import emit_report

    setup = ExperimentSetup(n_train=args.n_train, n_test=args.n_test, seed=args.seed)
    setup.train = replace(setup.train, steps=args.steps, seed=args.seed)
    echo("domain-gap", {"n_train": args.n_train, "n_test": args.n_test, "steps": args.steps, "seed": args.seed})
    a, b, p = domain_gap_experiment(setup)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_report(a, out / "real_pair.csv", out / "real_pair.json")
    emit_report(b, out / "pseudo_pair.csv", out / "pseudo_pair.json")
    print(f"real_pair   PSNR {a.summary()['psnr']['text']}  SSIM {a.summary()['ssim']['text']}")
    print(f"pseudo_pair PSNR {b.summary()['psnr']['text']}  SSIM {b.summary()['ssim']['text']}")
    print(f"one-sided wilcoxon p (real > pseudo, PSNR): {p:.3g}")
    return EXIT_OK


def cmd_export_slice(args) -> int:
    from .volume import export_slice_pgm, load_any

    img = export_slice_pgm(load_any(args.input), args.axis, args.index, args.window, args.output)
    print(f"wrote {args.output} ({img.shape[1]}x{img.shape[0]})")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _model_flags(p):
    p.add_argument("--variant", choices=["full", "no_tab", "encoder_only"], default=None, help="network variant (default: full)")
    p.add_argument("--c", type=int, default=None, help="embedding channels (default: 8, encoder_only 32)")
    p.add_argument("--n-enc", dest="n_enc", type=int, default=None, help="encoder STLs (default: 4, encoder_only 8)")
    p.add_argument("--m-fim", dest="m_fim", type=int, default=None, help="decoder FIMs (default: 1)")
    p.add_argument("--scale", type=int, default=None, help="through-plane factor (default: 5)")


class _HelpFormatter(argparse.HelpFormatter):
    """Append ``(default: x)`` unless the help already states it or there is none."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or any(action.default is v for v in (None, False, argparse.SUPPRESS)) or not action.option_strings:
            return text
        return f"{text} (default: %(default)s)"


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="tvsr", description="Through-plane CT super-resolution toolkit.")
    parser.add_argument("--log-level", default="WARNING", help="logging level")
    parser.add_argument("--threads", type=int, default=1, help="worker/BLAS threads; 1 is bit-deterministic")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic thin/thick dataset", formatter_class=fmt)
    p.add_argument("--n", type=int, required=True, help="number of cases")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--mode", choices=["real", "average", "decimate"], default="real", help="thick generation")
    p.add_argument("--thick-depth", dest="thick_depth", type=int, default=4, help="thick slices per case")
    p.add_argument("--scale", type=int, default=5, help="thin/thick spacing ratio")
    p.add_argument("--size", type=int, default=32, help="in-plane extent")
    p.add_argument("--split", default="0.4,0.2,0.4", help="train,val,test counts or fractions")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset", formatter_class=fmt)
    p.add_argument("--config", default=None, help="key=value file (model and training keys)")
    p.add_argument("--data", required=True, help="dataset directory with manifest.tsv")
    p.add_argument("--split", default="train", help="manifest split to train on (or 'all')")
    p.add_argument("--out", required=True, help="output directory for checkpoints and loss.csv")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default: 1e-4)")
    p.add_argument("--steps", type=int, default=None, help="total optimisation steps (default: 1000)")
    p.add_argument("--seed", type=int, default=None, help="init and sampling seed (default: 0)")
    p.add_argument("--batch", type=int, default=None, help="cubes per step (default: 1)")
    p.add_argument("--cube", type=_triple, default=None, help="thick cube D,H,W (default: 4,64,64)")
    p.add_argument("--ckpt-every", dest="ckpt_every", type=int, default=None, help="checkpoint period (default: end only)")
    p.add_argument("--no-aug", action="store_true", help="disable random crop and flip")
    p.add_argument("--log-every", dest="log_every", type=int, default=50, help="loss print period")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window inference on a thick volume", formatter_class=fmt)
    p.add_argument("--weights", required=True, help="checkpoint (.cfg sidecar alongside)")
    p.add_argument("--input", required=True, help="thick volume (.vol or .nii)")
    p.add_argument("--output", required=True, help="output thin volume")
    p.add_argument("--tile", type=_triple, default=None, help="tile D,H,W (default: model depth x full slice)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM report for predicted vs reference volumes", formatter_class=fmt)
    p.add_argument("--pred-dir", dest="pred_dir", required=True, help="predicted volumes")
    p.add_argument("--truth-dir", dest="truth_dir", required=True, help="reference thin volumes")
    p.add_argument("--out", required=True, help="report path; .csv and .json are written")
    p.add_argument("--compare", default=None, help="other report JSON for a paired Wilcoxon test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="Match/Near/Far slice-pair similarity", formatter_class=fmt)
    p.add_argument("--thin", required=True, help="thin volume")
    p.add_argument("--thick", required=True, help="thick volume")
    p.add_argument("--scale", type=int, default=5, help="thin/thick spacing ratio")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("domain-gap", help="real-pair vs pseudo-pair training experiment", formatter_class=fmt)
    p.add_argument("--n-train", dest="n_train", type=int, default=8, help="training cases per model")
    p.add_argument("--n-test", dest="n_test", type=int, default=20, help="test cases")
    p.add_argument("--steps", type=int, default=300, help="steps per model")
    p.add_argument("--seed", type=int, default=0, help="experiment seed")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_domain_gap)

    p = sub.add_parser("count-params", help="print the parameter summary", formatter_class=fmt)
    p.add_argument("--config", default=None, help="key=value model config")
    _model_flags(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("export-slice", help="write one slice as an 8-bit PGM", formatter_class=fmt)
    p.add_argument("--input", required=True, help="volume file")
    p.add_argument("--axis", choices=["axial", "coronal", "sagittal"], default="axial", help="slice orientation")
    p.add_argument("--index", type=int, required=True, help="slice index")
    p.add_argument("--window", type=_pair, default=(40.0, 400.0), help="display CENTER,WIDTH in HU")
    p.add_argument("--output", required=True, help="PGM path")
    p.set_defaults(func=cmd_export_slice)
    for p in sub.choices.values():
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="same as the global --threads")
    return parser


def main(argv=None) -> int:
    from .train import NumericError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required (see tvsr --help)")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(args.threads):
            return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, argparse.ArgumentTypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
