"""Full-length surrogate assembly, cohort scoring and the difficulty analyses."""

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameter, MissingArtifact, MissingChannel
from .models import model_avg
from .signal_core import (
    head_quarter_scores,
    moving_average,
    quarter_scores,
    safe_pearson_r,
    stitch_windows,
    window_signal,
    zero_mean,
)
from .synth import BASELINE_R_THRESHOLD, CYCLE_THRESHOLD

SUMMARY_VERSION = 1


def parse_preprocessing(mode):
    """``"none"``, ``"z_normalize"`` or ``"smooth:K"`` -> (name, k)."""
    mode = (mode or "none").strip()
    if mode in ("none", "z_normalize"):
        return mode, None
    if mode.startswith("smooth"):
        _, _, k = mode.partition(":")
        return "smooth", int(k or 5)
    raise InvalidParameter(f"unknown preprocessing {mode!r}")


def preprocess_windows(windows, mode):
    """Apply the configured input preprocessing to each row of ``windows``."""
    name, k = parse_preprocessing(mode)
    w = np.asarray(windows, dtype=np.float64)
    if name == "none":
        return w
    if name == "smooth":
        return np.stack([moving_average(row, k) for row in w])
    out = w - w.mean(axis=1, keepdims=True)
    sd = out.std(axis=1, keepdims=True)
    # Flat windows stay centred rather than failing the whole batch.
    return np.divide(out, sd, out=np.zeros_like(out), where=sd > 1e-12)


def predict_full(model, com, window_len, preprocessing="none"):
    """Translate a whole COM trace: tile, preprocess, predict, overlap-average, zero-mean."""
    ws = window_signal(com, window_len, window_len, "align_end")
    ws.windows = model.predict(preprocess_windows(ws.windows, preprocessing))
    return zero_mean(stitch_windows(ws))


# -- surrogate providers --------------------------------------------------------
# A provider maps (fold, record) -> full-length surrogate signal.

def trained_provider(models_by_fold, window_len, preprocessing="none"):
    def provide(fold, rec):
        if fold not in models_by_fold:
            raise MissingArtifact(f"no trained checkpoint for fold {fold}")
        return predict_full(models_by_fold[fold], rec.com_combined, window_len, preprocessing)
    return provide


def passthrough_provider(fold, rec):
    # Unmodified COM, so its score is the baseline R bit for bit.
    return rec.com_combined.copy()


def oracle_provider(fold, rec):
    return rec.emt.copy()


def ensemble_provider(providers):
    """Element-wise mean of member surrogates (the ModelAvg column)."""
    def provide(fold, rec):
        return model_avg([p(fold, rec) for p in providers])
    return provide


# -- reports --------------------------------------------------------------------

@dataclass
class PatientRow:
    patient_id: str
    fold: int
    r_pred_emt: float
    baseline_r: float
    breathing_cycles: int
    difficult: bool
    quarter_scores: list
    head_quarter_scores: list


@dataclass
class EvalReport:
    model: str
    rows: list
    aggregates: dict = field(default_factory=dict)

    def by_patient(self):
        return {r.patient_id: r for r in self.rows}


def _nanmean(values):
    v = [x for x in values if not math.isnan(x)]
    return float(np.mean(v)) if v else math.nan


def _nanmedian(values):
    v = [x for x in values if not math.isnan(x)]
    return float(np.median(v)) if v else math.nan


def _group(rows):
    rs = [r.r_pred_emt for r in rows]
    return {"n": len(rows), "mean_r": _nanmean(rs)}


def aggregate(rows, k=None):
    """Cohort aggregates; undefined per-patient R values are excluded and counted."""
    rows = sorted(rows, key=lambda r: r.patient_id)
    rs = [r.r_pred_emt for r in rows]
    folds = sorted({r.fold for r in rows}) if k is None else range(k)
    return {
        "n": len(rows),
        "undefined_n": sum(math.isnan(x) for x in rs),
        "mean_r": _nanmean(rs),
        "median_r": _nanmedian(rs),
        "mean_baseline_r": _nanmean([r.baseline_r for r in rows]),
        "fold_mean_r": {str(f): _nanmean([r.r_pred_emt for r in rows if r.fold == f]) for f in folds},
        "cycles_le_175": _group([r for r in rows if r.breathing_cycles <= CYCLE_THRESHOLD]),
        "cycles_gt_175": _group([r for r in rows if r.breathing_cycles > CYCLE_THRESHOLD]),
        "baseline_lt_035": _group([r for r in rows if r.baseline_r < BASELINE_R_THRESHOLD]),
        "baseline_ge_035": _group([r for r in rows if r.baseline_r >= BASELINE_R_THRESHOLD]),
    }


def evaluate_model(provider, cohort, fold_plan, name="model", keep_predictions=False):
    """Score every patient with the surrogate produced for its own validation fold."""
    rows, predictions = [], {}
    for rec in cohort:
        if rec.patient_id not in fold_plan.assignment:
            raise MissingArtifact(f"patient {rec.patient_id} is not in the fold plan")
        fold = fold_plan.assignment[rec.patient_id]
        pred = provider(fold, rec)
        if keep_predictions:
            predictions[rec.patient_id] = pred
        try:
            hq = head_quarter_scores(rec).tolist()
        except MissingChannel:
            hq = []
        rows.append(PatientRow(
            rec.patient_id, fold, safe_pearson_r(pred, rec.emt), rec.baseline_r, rec.breathing_cycles,
            rec.difficult, quarter_scores(rec.com_combined, rec.emt).tolist(), hq,
        ))
    report = EvalReport(name, rows, aggregate(rows, fold_plan.k))
    if keep_predictions:
        report.predictions = predictions
    return report


def difficulty_analysis(report, cohort=None):
    """Stratified means around the cycle and baseline-R thresholds plus scatter series.

    "Above average" compares a stratum's mean R with the mean R of the whole report.
    When ``cohort`` is given, every cohort patient must appear in the report once.
    """
    rows = sorted(report.rows, key=lambda r: r.patient_id)
    if cohort is not None:
        ids = [r.patient_id for r in rows]
        if sorted(ids) != sorted(rec.patient_id for rec in cohort) or len(set(ids)) != len(ids):
            raise MissingArtifact("report rows do not cover the cohort exactly once")
    overall = _nanmean([r.r_pred_emt for r in rows])
    strata = {
        "cycles_le_175": [r for r in rows if r.breathing_cycles <= CYCLE_THRESHOLD],
        "cycles_gt_175": [r for r in rows if r.breathing_cycles > CYCLE_THRESHOLD],
        "baseline_lt_035": [r for r in rows if r.baseline_r < BASELINE_R_THRESHOLD],
        "baseline_ge_035": [r for r in rows if r.baseline_r >= BASELINE_R_THRESHOLD],
    }
    summary = {"mean_r": overall, "cycle_threshold": CYCLE_THRESHOLD,
               "baseline_threshold": BASELINE_R_THRESHOLD}
    for name, group in strata.items():
        g = _group(group)
        g["label"] = f"n={g['n']}"
        g["above_average"] = None if g["n"] == 0 or math.isnan(g["mean_r"]) else bool(g["mean_r"] > overall)
        summary[name] = g
    scatter = [
        {"patient_id": r.patient_id, "breathing_cycles": r.breathing_cycles,
         "baseline_r": r.baseline_r, "r_pred_emt": r.r_pred_emt}
        for r in rows
    ]
    return summary, scatter


def head_analysis(cohort):
    """Mean per-quarter R for each head (2x4) and for the combined COM (4)."""
    if not cohort:
        raise InvalidParameter("head_analysis needs at least one record")
    heads = np.array([head_quarter_scores(rec) for rec in cohort])
    combined = np.array([quarter_scores(rec.com_combined, rec.emt) for rec in cohort])
    return {"head_quarter_mean_r": np.nanmean(heads, axis=0), "combined_quarter_mean_r": np.nanmean(combined, axis=0)}


# -- serialization --------------------------------------------------------------

def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "undefined" if math.isnan(x) else f"{x:.9g}"
    return str(x)


def parse_float(text):
    return math.nan if text == "undefined" else float(text)


ROW_HEADER = ["patient_id", "fold", "r_pred_emt", "baseline_r", "breathing_cycles", "difficult",
              "q1_r", "q2_r", "q3_r", "q4_r",
              "h1_q1_r", "h1_q2_r", "h1_q3_r", "h1_q4_r", "h2_q1_r", "h2_q2_r", "h2_q3_r", "h2_q4_r"]


def report_rows_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_HEADER)
    for r in sorted(report.rows, key=lambda r: r.patient_id):
        hq = [v for row in r.head_quarter_scores for v in row] or [math.nan] * 8
        w.writerow([r.patient_id, r.fold, fmt(r.r_pred_emt), fmt(r.baseline_r), r.breathing_cycles,
                    fmt(r.difficult)] + [fmt(v) for v in r.quarter_scores] + [fmt(v) for v in hq])
    return buf.getvalue()


def read_report_rows(text):
    rows = []
    for d in csv.DictReader(io.StringIO(text)):
        hq = [parse_float(d[f"h{h}_q{q}_r"]) for h in (1, 2) for q in range(1, 5)]
        rows.append(PatientRow(
            d["patient_id"], int(d["fold"]), parse_float(d["r_pred_emt"]), parse_float(d["baseline_r"]),
            int(d["breathing_cycles"]), d["difficult"] == "1",
            [parse_float(d[f"q{q}_r"]) for q in range(1, 5)], [hq[:4], hq[4:]],
        ))
    return rows


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def summary_json(report, extra=None):
    doc = {"format_version": SUMMARY_VERSION, "model": report.model, "aggregates": report.aggregates}
    doc.update(extra or {})
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"


def comparison_csv(reports):
    """Table-1-shaped comparison: one column per model, rows of aggregate R values."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric"] + [r.model for r in reports])
    w.writerow(["mean_r"] + [fmt(r.aggregates["mean_r"]) for r in reports])
    w.writerow(["median_r"] + [fmt(r.aggregates["median_r"]) for r in reports])
    w.writerow(["undefined_n"] + [r.aggregates["undefined_n"] for r in reports])
    folds = sorted(reports[0].aggregates["fold_mean_r"], key=int)
    for f in folds:
        w.writerow([f"fold{f}_mean_r"] + [fmt(r.aggregates["fold_mean_r"].get(f, math.nan)) for r in reports])
    return buf.getvalue()

