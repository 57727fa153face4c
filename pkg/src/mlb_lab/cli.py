"""``mlb-lab`` command line: train, gradcheck, sweep, diag, plotdata.

Exit codes: 0 success, 1 failed check, 2 invalid config or missing input,
3 non-finite training loss. ``MLB_LAB_LOG`` sets the log level (default
``WARNING``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from mlb_lab import balancer as bal
from mlb_lab import gradcheck as gc
from mlb_lab import runner
from mlb_lab.diagnostics import cross_modal_grad_diagnostic
from mlb_lab.metrics import AGREEMENT_COLUMNS, AGREEMENT_ROWS
from mlb_lab.errors import ConfigError, NonFiniteLossError
from mlb_lab.fileio import atomic_write_text
from mlb_lab.model import FUSIONS, ModelSpec

log = logging.getLogger("mlb_lab")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NONFINITE = 0, 1, 2, 3
DIAG_TOLERANCE = 1e-10

# small network used by gradcheck/diag when no config is given
SMALL_SPEC = dict(in_v=5, in_a=4, feat_v=4, feat_a=4, n_classes=3,
                  encoder_depth=2, encoder_hidden=6, fusion_hidden=5)

# coefficient-curve grid: r = i / 20 for i = 1..200
CURVE_STEPS = 200
CURVE_DENOM = 20
CURVE_ALPHAS = (0.5, 1.0, 2.0)
CURVE_BETAS = (2.0, 5.0, 10.0)


def _setup_logging():
    level = os.environ.get("MLB_LAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load(args) -> runner.RunConfig:
    if args.config.startswith("preset:"):
        cfg = runner.load_preset(args.config[len("preset:"):])
    else:
        cfg = runner.load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(args.out or "run")
    res = runner.train(cfg, out_dir=out)
    t = res.summary["test"]
    print(f"best epoch {res.summary['best_epoch']}: test acc_mm={t['acc_mm']:.4f} ece={t['ece']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def _gradcheck_setup(args):
    opts = {}
    base = dict(SMALL_SPEC)
    if args.config:
        cfg = _load(args)
        opts = dict(cfg.gradcheck)
        base.update(opts.pop("model", {}))
    seeds = opts.pop("seeds", [0, 1, 2])
    if args.seed is not None:
        seeds = [args.seed]
    fusions = opts.pop("fusions", list(FUSIONS))
    heads = opts.pop("heads", [True, False])
    cosine = opts.pop("cosine", True)
    batch = opts.pop("batch", 6)
    eps = opts.pop("eps", 1e-5)
    if opts:
        raise ConfigError(f"{args.config}: unknown gradcheck field {sorted(opts)[0]!r}")
    bad = [f for f in fusions if f not in FUSIONS]
    if bad:
        raise ConfigError(f"{args.config}: unknown fusion {bad[0]!r}")
    base.update(fusion=fusions[0], heads=True)
    spec = ModelSpec(**base)
    return spec, gc.default_cases(fusions, heads, seeds, cosine), batch, eps


def cmd_gradcheck(args) -> int:
    spec, cases, batch, eps = _gradcheck_setup(args)
    results = gc.run_cases(spec, cases, batch=batch, eps=eps)
    report = []
    for case, errs in results:
        print(f"{case.label}: " + " ".join(f"{g}={e:.2e}" for g, e in errs.items()))
        report.append({"case": case.label, "fusion": case.fusion, "heads": case.heads, "seed": case.seed,
                       "objective": case.objective, "cosine": case.cosine, "errors": errs})
    bad = gc.failures(results)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        atomic_write_text(Path(args.out) / "gradcheck.json",
                          json.dumps({"cases": report, "failures": bad}, indent=2) + "\n")
    worst = max(max(e.values()) for _, e in results)
    if bad:
        print(f"FAIL: {len(bad)} group(s) at or above {gc.TOLERANCE:g}")
        for b in bad:
            print(f"  {b}")
        return EXIT_CHECK
    print(f"PASS: {len(results)} cases, max relative error {worst:.2e}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    seeds = args.seeds if args.seeds else [cfg.seed]
    out = Path(args.out or "sweep")
    agg = runner.sweep(cfg, seeds, out, jobs=args.jobs)
    for key, m in agg["metrics"].items():
        print(f"{key}: {m['mean']:.4f} +- {m['std']:.4f}")
    print(f"wrote {out / 'sweep.json'}")
    return EXIT_OK


def cmd_diag(args) -> int:
    opts = {}
    base = dict(SMALL_SPEC)
    seed = 0
    if args.config:
        cfg = _load(args)
        opts = dict(cfg.diag)
        base.update(opts.pop("model", {}))
        seed = cfg.seed
    if args.seed is not None:
        seed = args.seed
    base.update(heads=False)
    try:
        report = cross_modal_grad_diagnostic(ModelSpec(**base), seed=seed, **opts)
    except TypeError as e:
        raise ConfigError(f"{args.config}: bad diag options: {e}") from None
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "diag.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    for fusion, f in report["fusions"].items():
        print(f"{fusion}: max residual {f['max_residual']:.2e}, "
              f"sensitivity {f['sensitivity_mean']:.4f} +- {f['sensitivity_std']:.4f}")
    if not report["max_residual"] <= DIAG_TOLERANCE:
        print(f"FAIL: residual {report['max_residual']:.3e} > {DIAG_TOLERANCE:g}")
        return EXIT_CHECK
    return EXIT_OK


def curve_grid():
    return [i / CURVE_DENOM for i in range(1, CURVE_STEPS + 1)]


def coefficient_curves(pairs) -> tuple[list[str], list[list[float]]]:
    """Header and rows of ``k(r)`` for each ``(alpha, beta_max)`` pair."""
    r = curve_grid()
    cols = [bal.k_curve(r, a, b) for a, b in pairs]
    header = ["r"] + [f"k_alpha{a:g}_beta{b:g}" for a, b in pairs]
    rows = [[r[i]] + [float(c[i]) for c in cols] for i in range(len(r))]
    return header, rows


def _csv(header, rows) -> str:
    return runner.rows_to_csv([dict(zip(header, row)) for row in rows], header)


def cmd_plotdata(args) -> int:
    run_dir = Path(args.run_dir)
    needed = [run_dir / n for n in ("epochs.csv", "summary.json")]
    missing = [str(p) for p in needed if not p.is_file()]
    if missing:
        print(f"error: missing run artifacts: {', '.join(missing)}", file=sys.stderr)
        return EXIT_CONFIG
    summary = json.loads((run_dir / "summary.json").read_text())
    bcfg = summary["config"]["balancer"]
    plot = dict(summary["config"].get("plot", {}))
    if args.config:
        plot.update(_load(args).plot)
    pairs = [(float(a), float(b)) for a in plot.get("alphas", CURVE_ALPHAS)
             for b in plot.get("beta_maxes", CURVE_BETAS)]
    own = (float(bcfg["alpha"]), float(bcfg["beta_max"]))
    if own not in pairs:
        pairs.append(own)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    header, rows = coefficient_curves(pairs)
    atomic_write_text(out / "coef_curve.csv", _csv(header, rows))

    with open(run_dir / "epochs.csv", newline="") as fh:
        epochs = list(csv.DictReader(fh))
    series_cols = ("epoch", "train_acc_mm", "val_acc_mm", "val_acc_v", "val_acc_a", "k_v", "k_a")
    atomic_write_text(out / "accuracy_series.csv", runner.rows_to_csv(epochs, series_cols))

    agree_cols = ("split", "mm") + AGREEMENT_COLUMNS
    agree_rows = []
    for split in ("val", "test"):
        mat = summary[split].get("agreement")
        if mat is None:
            continue
        for label, row in zip(AGREEMENT_ROWS, mat):
            agree_rows.append(dict(zip(agree_cols, [split, label] + list(row))))
    atomic_write_text(out / "agreement.csv", runner.rows_to_csv(agree_rows, agree_cols))
    print(f"wrote coef_curve.csv, accuracy_series.csv, agreement.csv to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlb-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON run config, or preset:NAME for a bundled one")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed (u64)")

    common(sub.add_parser("train", help="train one model"))
    common(sub.add_parser("gradcheck", help="finite-difference gradient check"), config_required=False)
    sp = sub.add_parser("sweep", help="train over several seeds and aggregate")
    common(sp)
    sp.add_argument("--seeds", type=int, nargs="+", help="seeds to run")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common(sub.add_parser("diag", help="closed-form fusion gradient diagnostic"), config_required=False)
    sp = sub.add_parser("plotdata", help="emit plot-ready CSVs for a finished run")
    sp.add_argument("run_dir", help="directory written by train")
    common(sp, config_required=False)
    return p


COMMANDS = {
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
    "diag": cmd_diag,
    "plotdata": cmd_plotdata,
}


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        print(f"error: seed must be an unsigned 64-bit integer, got {args.seed}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except NonFiniteLossError as e:
        print(f"error: non-finite loss at step {e.step}: {e.value}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
