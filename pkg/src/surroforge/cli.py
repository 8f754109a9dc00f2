"""``surroforge`` command line: generate, train, evaluate, analyze/plot.

Exit codes: 0 success, 1 usage error, 2 I/O or data error.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import plotting
from .errors import SurroforgeError
from .evaluation import (
    EvalReport,
    aggregate,
    comparison_csv,
    difficulty_analysis,
    ensemble_provider,
    evaluate_model,
    head_analysis,
    passthrough_provider,
    read_report_rows,
    report_rows_csv,
    summary_json,
    trained_provider,
)
from .models import ModelSpec, load_checkpoint, save_checkpoint
from .synth import (
    BreathingParams,
    NoiseModel,
    generate_cohort,
    params_from_dict,
    read_cohort,
    write_cohort,
)
from .training import STRATEGIES, FoldPlan, TrainConfig, cross_validate, kfold_split

PRESETS = {
    "fc200": ModelSpec("fully_connected", 200, hidden_units=200),
    "fc50": ModelSpec("fully_connected", 50, hidden_units=20),
    "unet2d": ModelSpec("unet2d", 1024),
    "unet1d-se": ModelSpec("unet1d", 1000, se_enabled=True),
}
DISPLAY_NAMES = {
    "fc200": "FullyConn-200",
    "fc50": "FullyConn-50",
    "unet2d": "U-Net(2D)",
    "unet1d-se": "U-Net(1D+SE)",
    "modelavg": "ModelAvg",
    "passthrough": "Passthrough",
}
# U-Nets are ~100x costlier per window than the dense nets on CPU.
PRESET_TRAIN = {"unet2d": {"epochs": 30, "batch_size": 16}, "unet1d-se": {"epochs": 30, "batch_size": 16}}
RUN_VERSION = 1


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _threads():
    try:
        return max(1, int(os.environ.get("SURROFORGE_THREADS", "1")))
    except ValueError:
        return 1


def load_config(path):
    """JSON or TOML, chosen by file extension."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    if p.suffix.lower() == ".toml":
        import tomli

        with open(p, "rb") as fh:
            return tomli.load(fh)
    with open(p) as fh:
        return json.load(fh)


def _write_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _ensure_dir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise DataError(f"output directory {path} is not writable")


def _relative_to(target, start):
    # Paths stored in outputs are relative to the output directory, so a
    # results tree can be moved or compared byte for byte.
    return Path(os.path.relpath(Path(target).resolve(), Path(start).resolve())).as_posix()


def _load_cohort(path):
    if not (Path(path) / "manifest.json").is_file():
        raise DataError(f"no cohort manifest in {path}")
    return read_cohort(path)


# -- generate --------------------------------------------------------------------

def cmd_generate(args):
    if args.patients < 1:
        raise UsageError("--patients must be >= 1")
    if not 0.0 <= args.difficult_frac <= 1.0:
        raise UsageError("--difficult-frac must lie in [0, 1]")
    p, noise = BreathingParams(), NoiseModel()
    if args.params:
        p, noise = params_from_dict(load_config(args.params))
    records = generate_cohort(args.patients, p, noise, args.difficult_frac, args.seed)
    _ensure_dir(args.out)
    write_cohort(records, args.out, p, noise, args.seed, args.difficult_frac)
    n_hard = sum(r.difficult for r in records)
    print(f"wrote {len(records)} patients ({n_hard} difficult) to {args.out}")


# -- train -----------------------------------------------------------------------

def resolve_run_config(preset, config, seed):
    if preset not in PRESETS:
        raise UsageError(f"unknown model preset {preset!r}; valid presets: {', '.join(PRESETS)}")
    spec = replace(PRESETS[preset], **config.get("model", {}))
    train_cfg = dict(PRESET_TRAIN.get(preset, {}))
    train_cfg.update(config.get("train", {}))
    if seed is not None:
        train_cfg["seed"] = seed
    cfg = TrainConfig.from_dict(train_cfg)
    strategy = config.get("difficulty", {}).get("strategy", "none")
    if strategy not in STRATEGIES:
        raise UsageError(f"unknown difficulty strategy {strategy!r}; valid: {', '.join(STRATEGIES)}")
    return spec.validate(), cfg.validate(), strategy


def cmd_train(args):
    if args.folds < 2:
        raise UsageError("--folds must be >= 2")
    config = load_config(args.config)
    spec, cfg, strategy = resolve_run_config(args.model, config, args.seed)
    if args.strategy:
        strategy = args.strategy
    if cfg.window_len and cfg.window_len != spec.window_len:
        raise UsageError("train.window_len must match the model window")
    records = _load_cohort(args.cohort)
    if len(records) < args.folds:
        raise DataError(f"cohort has {len(records)} patients, fewer than {args.folds} folds")
    plan = kfold_split([r.patient_id for r in records], args.folds, cfg.seed)
    _ensure_dir(args.out)
    out = Path(args.out)
    results = cross_validate(records, spec, cfg, plan, strategy, jobs=_threads())
    fold_rows = ["fold,train_r,val_r,best_epoch"]
    for res in results:
        save_checkpoint(res.model, out / f"fold{res.fold}.ckpt", extra={"fold": res.fold, "preset": args.model})
        _write_text(out / f"history_fold{res.fold}.csv", res.history.csv())
        fold_rows.append(f"{res.fold},{res.train_r:.9g},{res.val_r:.9g},{res.history.best_epoch}")
        print(f"fold {res.fold}: train R {res.train_r:.3f}  val R {res.val_r:.3f}")
    _write_text(out / "folds.csv", "\n".join(fold_rows) + "\n")
    run = {
        "format_version": RUN_VERSION,
        "preset": args.model,
        "name": DISPLAY_NAMES[args.model],
        "cohort": _relative_to(args.cohort, out),
        "spec": spec.to_dict(),
        "train": asdict(cfg),
        "strategy": strategy,
        "fold_plan": plan.to_dict(),
        "checkpoints": [f"fold{f}.ckpt" for f in range(plan.k)],
    }
    _write_text(out / "run.json", json.dumps(run, indent=2, sort_keys=True) + "\n")


# -- evaluate --------------------------------------------------------------------

def load_run(run_dir):
    run_dir = Path(run_dir)
    if not (run_dir / "run.json").is_file():
        raise DataError(f"no run.json in {run_dir}")
    run = json.loads((run_dir / "run.json").read_text())
    models = {}
    for f, name in enumerate(run["checkpoints"]):
        path = run_dir / name
        if not path.is_file():
            raise DataError(f"missing checkpoint {path} for fold {f}")
        models[f] = load_checkpoint(path)
    run["models"] = models
    run["plan"] = FoldPlan.from_dict(run["fold_plan"])
    return run


def _predictions_csv(report, cohort):
    ids = [r.patient_id for r in cohort]
    cols = [report.predictions[p] for p in ids]
    lines = ["index," + ",".join(ids)]
    for i in range(len(cols[0])):
        lines.append(f"{i}," + ",".join(f"{c[i]:.9g}" for c in cols))
    return "\n".join(lines) + "\n"


def cmd_evaluate(args):
    if not args.runs and not args.baseline:
        raise UsageError("give at least one --runs directory or --baseline")
    cohort = _load_cohort(args.cohort)
    runs = [load_run(d) for d in args.runs]
    ids = sorted(r.patient_id for r in cohort)
    plan = runs[0]["plan"] if runs else kfold_split(ids, min(5, len(ids)), args.seed)
    for run in runs:
        if run["plan"].assignment != plan.assignment:
            raise DataError(f"run {run['preset']} was trained on a different fold plan")
        if len(run["models"]) != plan.k:
            raise DataError(f"run {run['preset']} has {len(run['models'])} checkpoints for {plan.k} folds")
    if sorted(plan.assignment) != ids:
        raise DataError("fold plan patients do not match the cohort")

    providers = {}
    for run in runs:
        spec = ModelSpec.from_dict(run["spec"])
        providers[run["preset"]] = trained_provider(run["models"], spec.window_len, run["train"]["preprocessing"])
    if args.ensemble:
        members = [m.strip() for m in args.ensemble.split(",") if m.strip()]
        missing = [m for m in members if m not in providers]
        if len(members) < 2 or missing:
            raise UsageError(f"--ensemble needs >= 2 evaluated runs; missing {missing}")
        providers["modelavg"] = ensemble_provider([providers[m] for m in members])
    if args.baseline:
        providers["passthrough"] = passthrough_provider

    _ensure_dir(args.out)
    out = Path(args.out)
    reports = []
    for slug, provider in providers.items():
        report = evaluate_model(provider, cohort, plan, DISPLAY_NAMES.get(slug, slug), keep_predictions=True)
        reports.append(report)
        _write_text(out / f"report_{slug}.csv", report_rows_csv(report))
        _write_text(out / f"predictions_{slug}.csv", _predictions_csv(report, cohort))
        extra = {"slug": slug, "cohort": _relative_to(args.cohort, out),
                 "rows": f"report_{slug}.csv", "predictions": f"predictions_{slug}.csv"}
        _write_text(out / f"summary_{slug}.json", summary_json(report, extra))
        print(f"{report.model}: mean R {report.aggregates['mean_r']:.4f}")
    _write_text(out / "comparison.csv", comparison_csv(reports))


# -- analyze / plot --------------------------------------------------------------

def _read_predictions(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")[1:]
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return {pid: data[:, j + 1] for j, pid in enumerate(header)}


def cmd_analyze(args):
    report_path = Path(args.report)
    if not report_path.is_file():
        raise DataError(f"report not found: {report_path}")
    summary = json.loads(report_path.read_text())
    base = report_path.parent
    rows = read_report_rows((base / summary["rows"]).read_text())
    report = EvalReport(summary["model"], rows, aggregate(rows))
    cohort = _load_cohort(base / summary["cohort"])
    preds = _read_predictions(base / summary["predictions"])
    _ensure_dir(args.out)
    out = Path(args.out)

    strata, scatter = difficulty_analysis(report, cohort)
    heads = head_analysis(cohort)
    doc = {"model": report.model, "strata": strata,
           "head_quarter_mean_r": heads["head_quarter_mean_r"].tolist(),
           "combined_quarter_mean_r": heads["combined_quarter_mean_r"].tolist()}
    _write_text(out / "analysis.json", json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")
    plotting.plot_cycles_vs_r(out / "cycles_vs_r", scatter, strata["mean_r"])
    plotting.plot_baseline_vs_r(out / "baseline_vs_r", scatter, strata["mean_r"])
    plotting.plot_head_quarters(out / "head_quarters", heads["head_quarter_mean_r"], heads["combined_quarter_mean_r"])

    scored = sorted((r for r in rows if r.r_pred_emt == r.r_pred_emt), key=lambda r: r.r_pred_emt)
    by_id = {r.patient_id: r for r in cohort}
    picks = {"signals_best": scored[-1], "signals_worst": scored[0]} if scored else {}
    lo, hi = args.segment
    for stem, row in picks.items():
        rec = by_id[row.patient_id]
        hi_ = min(hi, rec.emt.size)
        idx = np.arange(lo, hi_)
        plotting.plot_signals(out / stem, idx, rec.com_combined[lo:hi_], rec.emt[lo:hi_],
                              preds[row.patient_id][lo:hi_], f"{row.patient_id}  R = {row.r_pred_emt:.2f}")
    print(f"wrote analysis for {report.model} to {out}")


# -- entry point -----------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="surroforge", description="COM-to-EMT surrogate signal toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic cohort")
    g.add_argument("--patients", type=int, default=40)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--difficult-frac", type=float, default=0.0)
    g.add_argument("--out", default="cohort")
    g.add_argument("--params", help="JSON/TOML with 'breathing' and 'noise' tables")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="k-fold training of one model preset")
    t.add_argument("--cohort", required=True)
    t.add_argument("--model", required=True, help=f"one of {', '.join(PRESETS)}")
    t.add_argument("--config", help="JSON/TOML with 'train', 'model', 'difficulty' tables")
    t.add_argument("--folds", type=int, default=5)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--strategy", choices=STRATEGIES)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score trained runs on full-length signals")
    e.add_argument("--cohort", required=True)
    e.add_argument("--runs", nargs="*", default=[])
    e.add_argument("--ensemble", help="comma-separated presets to average (ModelAvg)")
    e.add_argument("--baseline", action="store_true", help="add the raw-COM passthrough column")
    e.add_argument("--seed", type=int, default=7, help="fold seed when only --baseline is given")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    for name in ("analyze", "plot"):
        a = sub.add_parser(name, help="difficulty/head analyses and figures")
        a.add_argument("--report", required=True, help="summary_<model>.json written by evaluate")
        a.add_argument("--out", required=True)
        a.add_argument("--segment", type=int, nargs=2, default=(3000, 3600), metavar=("START", "STOP"))
        a.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"surroforge: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, SurroforgeError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"surroforge: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
