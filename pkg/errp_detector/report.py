"""Tables and text summaries of evaluated participants (CSV via pandas, JSON, plain text)."""
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .errors import UndefinedMetricError
from .evaluation import MetricsReport, TrialOutcome, confidence_band

logger = logging.getLogger(__name__)

GROUP_MEAN_ROWS = ("control", "sci")
NOT_REPRODUCIBLE = "published human-EEG group mean, not reproducible with synthetic data"

# group means reported for the human study, shown for context only
REFERENCE_ROWS = [
    {"source": "online", "group": "sci", "tpr": 0.469, "tnr": 0.719},
    {"source": "online", "group": "control", "tpr": 0.564, "tnr": 0.779},
    {"source": "cross-validation", "group": "sci", "tpr": 0.550, "tnr": 0.779},
    {"source": "cross-validation", "group": "control", "tpr": 0.715, "tnr": 0.861},
]

METRIC_COLUMNS = ["tau", "tpr", "tnr", "edr", "far", "far_correct", "far_error"]
CV_CURVES = ("tpr", "tnr", "chance_tpr", "chance_tnr")


def format_p(value: Optional[float]) -> str:
    return "n/a" if value is None or (isinstance(value, float) and np.isnan(value)) else f"{value:.4f}"


def _row(report: MetricsReport) -> dict:
    row = {"participant_id": report.participant_id, "group": report.group}
    row.update({name: getattr(report, name) for name in METRIC_COLUMNS})
    row["product"] = report.product
    for metric in ("tpr", "tnr", "product"):
        row[f"chance_{metric}"] = report.chance.get(metric)
        row[f"p_{metric}"] = report.p_values.get(metric)
    row["n_perm"] = report.n_perm
    return row


def metrics_table(reports: list[MetricsReport]) -> pd.DataFrame:
    """One row per participant followed by the control and SCI group means."""
    df = pd.DataFrame([_row(r) for r in reports])
    numeric = [c for c in df.columns if c not in ("participant_id", "group")]
    df[numeric] = df[numeric].astype(float)
    means = []
    for group in GROUP_MEAN_ROWS:
        members = df[df["group"] == group]
        mean = members[numeric].mean() if len(members) else pd.Series(np.nan, index=numeric)
        means.append({"participant_id": f"{group} mean", "group": group, **mean.to_dict()})
    return pd.concat([df, pd.DataFrame(means)], ignore_index=True)


def reference_table() -> pd.DataFrame:
    df = pd.DataFrame(REFERENCE_ROWS)
    df["note"] = NOT_REPRODUCIBLE
    return df


def cross_validation_table(results: list[dict]) -> pd.DataFrame:
    """Rows from cross-validation summaries (see ``CrossValidationResult.summary``)."""
    rows = []
    for r in results:
        row = {"participant_id": r["participant_id"], "group": r.get("group", ""), "tau_star": r["tau_star"],
               "tpr": r["tpr"], "tnr": r["tnr"], "product": r["tpr"] * r["tnr"], "n_curves": r["n_curves"]}
        for metric in ("tpr", "tnr", "product"):
            row[f"chance_{metric}"] = r["chance"].get(metric)
            row[f"p_{metric}"] = r["p_values"].get(metric)
        row["n_perm"] = r["n_perm"]
        rows.append(row)
    return pd.DataFrame(rows)


def cv_curves_table(summary: dict) -> pd.DataFrame:
    """Per-threshold CV curves of one participant: tau, tpr, tnr (with 95% bands) and chance curves."""
    return pd.DataFrame(summary["curves"])


def cv_group_curves(results: list[dict]) -> pd.DataFrame:
    """Grand average over participants of each group's CV and chance curves, with 95% confidence bands."""
    frames = []
    groups = sorted({r.get("group", "") for r in results})
    for group in groups:
        members = [r["curves"] for r in results if r.get("group", "") == group and "curves" in r]
        if not members:
            continue
        df = pd.DataFrame({"group": group, "tau": members[0]["tau"], "n_participants": len(members)})
        for curve in CV_CURVES:
            if not all(curve in m for m in members):
                continue
            mean, low, high = confidence_band([m[curve] for m in members])
            df[curve] = mean
            df[f"{curve}_ci_low"] = low
            df[f"{curve}_ci_high"] = high
        frames.append(df)
    if not frames:
        return pd.DataFrame(columns=["group", "tau", "n_participants"])
    return pd.concat(frames, ignore_index=True)


def curves_table(curves: dict) -> pd.DataFrame:
    """Sweep curves as columns tau, tpr, tnr, tpr_smooth, tnr_smooth."""
    return pd.DataFrame({k: curves[k] for k in ("tau", "tpr", "tnr", "tpr_smooth", "tnr_smooth")})


def outcomes_table(outcomes: list[TrialOutcome]) -> pd.DataFrame:
    return pd.DataFrame([{"trial_id": o.trial_id, "block": o.block, "label": o.label, "verdict": o.verdict,
                          "n_detections": len(o.detections), "first_latency_s": o.first_latency}
                         for o in outcomes])


def render_summary(reports: list[MetricsReport], cv_results=None) -> str:
    lines = ["participant group    tau    TPR    TNR    EDR    FAR    chance(TPR*TNR)  p(TPR*TNR)  p(TPR)  p(TNR)"]
    for r in reports:
        chance = r.chance.get("product")
        chance_txt = "n/a" if chance is None else f"{chance:.3f}"
        lines.append(f"{r.participant_id:<11} {r.group:<8} {r.tau:.3f}  {r.tpr:.3f}  {r.tnr:.3f}  {r.edr:.3f}  "
                     f"{r.far:.3f}  {chance_txt:>15}  {format_p(r.p_values.get('product')):>10}  "
                     f"{format_p(r.p_values.get('tpr')):>6}  {format_p(r.p_values.get('tnr')):>6}")
    table = metrics_table(reports)
    for group in GROUP_MEAN_ROWS:
        row = table[table["participant_id"] == f"{group} mean"].iloc[0]
        if not np.isnan(row["tpr"]):
            lines.append(f"{group} mean: TPR {row['tpr']:.3f}, TNR {row['tnr']:.3f}, "
                         f"EDR {row['edr']:.3f}, FAR {row['far']:.3f}")
    if cv_results:
        lines.append("")
        lines.append("cross-validation (personalized classifier):")
        for r in cv_results:
            lines.append(f"  {r['participant_id']}: tau*={r['tau_star']:.3f} TPR={r['tpr']:.3f} "
                         f"TNR={r['tnr']:.3f} p(TPR*TNR)={format_p(r['p_values'].get('product'))}")
    lines.append("")
    lines.append(f"reference ({NOT_REPRODUCIBLE}):")
    for ref in REFERENCE_ROWS:
        lines.append(f"  {ref['source']:<16} {ref['group']:<8} TPR {100 * ref['tpr']:.1f}%  TNR {100 * ref['tnr']:.1f}%")
    return "\n".join(lines) + "\n"


def write_report(reports: list[MetricsReport], out_dir, cv_results=None) -> Path:
    """metrics.csv, metrics.json, reference.csv, per-participant sweep curves and summary.txt."""
    if not reports:
        raise UndefinedMetricError("report needs at least one evaluated participant")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    table = metrics_table(reports)
    for col in [c for c in table.columns if c.startswith("p_")]:
        table[col] = table[col].map(format_p)
    table.to_csv(out / "metrics.csv", index=False, float_format="%.6f")
    reference_table().to_csv(out / "reference.csv", index=False)
    with open(out / "metrics.json", "w", encoding="utf-8") as f:
        json.dump([r.model_dump() for r in reports], f, indent=2)
    for r in reports:
        if r.sweep:
            curves_table(r.sweep).to_csv(out / f"{r.participant_id}_curves.csv", index=False)
    if cv_results:
        table = cross_validation_table(cv_results)
        for col in [c for c in table.columns if c.startswith("p_")]:
            table[col] = table[col].map(format_p)
        table.to_csv(out / "cross_validation.csv", index=False, float_format="%.6f")
        cv_group_curves(cv_results).to_csv(out / "cross_validation_curves.csv", index=False, float_format="%.6f")

    with open(out / "summary.txt", "w", encoding="utf-8") as f:
        f.write(render_summary(reports, cv_results))
    logger.info(f"[EVAL] Report for {len(reports)} participants written to {out}")
    return out
