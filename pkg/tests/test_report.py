import json

import pandas as pd
import pytest

from errp_detector.errors import UndefinedMetricError
from errp_detector.evaluation import MetricsReport
from errp_detector.report import (NOT_REPRODUCIBLE, cv_group_curves, format_p, metrics_table, reference_table,
                                  render_summary, write_report)


def _report(pid, group, tpr, tnr, p=None):
    report = MetricsReport(participant_id=pid, group=group, blocks=[4, 5], tau=0.6, tpr=tpr, tnr=tnr,
                           edr=min(1.0, tpr + 0.1), far=0.2,
                           sweep={"tau": [0.0, 0.5, 1.0], "tpr": [1.0, 0.5, 0.0], "tnr": [0.0, 0.5, 1.0],
                                  "tpr_smooth": [0.75, 0.5, 0.25], "tnr_smooth": [0.25, 0.5, 0.75]})
    if p is not None:
        report.chance = {"tpr": 0.2, "tnr": 0.5, "edr": 0.3, "product": 0.1}
        report.p_values = {"tpr": p, "tnr": p, "edr": p, "product": p}
        report.n_perm = 99
    return report


@pytest.fixture
def reports():
    return [_report("P01", "control", 0.6, 0.8, p=0.01), _report("P02", "control", 0.4, 0.6, p=0.03),
            _report("P09", "sci", 0.5, 0.7), _report("P13", "null", 0.1, 0.5, p=0.6)]


def test_format_p():
    assert format_p(None) == "n/a"
    assert format_p(float("nan")) == "n/a"
    assert format_p(0.01) == "0.0100"


def test_metrics_table_adds_group_means(reports):
    table = metrics_table(reports)
    assert len(table) == len(reports) + 2
    control = table[table["participant_id"] == "control mean"].iloc[0]
    assert control["tpr"] == pytest.approx(0.5)
    assert control["product"] == pytest.approx((0.48 + 0.24) / 2)
    assert table[table["participant_id"] == "sci mean"].iloc[0]["tnr"] == pytest.approx(0.7)
    assert pd.isna(table[table["participant_id"] == "P09"].iloc[0]["p_product"])


def test_reference_rows_are_labelled():
    ref = reference_table()
    assert len(ref) == 4
    assert set(ref["note"]) == {NOT_REPRODUCIBLE}
    online_sci = ref[(ref["source"] == "online") & (ref["group"] == "sci")].iloc[0]
    assert (online_sci["tpr"], online_sci["tnr"]) == (0.469, 0.719)


def test_summary_mentions_everyone(reports):
    text = render_summary(reports, cv_results=[{"participant_id": "P01", "tau_star": 0.5, "tpr": 0.7, "tnr": 0.8,
                                                "n_curves": 50, "chance": {}, "p_values": {}, "n_perm": 0}])
    for pid in ("P01", "P02", "P09", "P13"):
        assert pid in text
    assert "control mean" in text and "sci mean" in text
    assert "cross-validation" in text


def test_write_report_files(reports, tmp_path):
    out = write_report(reports, tmp_path / "report")
    for name in ("metrics.csv", "metrics.json", "reference.csv", "summary.txt", "P01_curves.csv"):
        assert (out / name).is_file()
    metrics = pd.read_csv(out / "metrics.csv", keep_default_na=False)
    assert metrics.loc[metrics["participant_id"] == "P09", "p_product"].iloc[0] == "n/a"
    assert metrics.loc[metrics["participant_id"] == "P01", "p_product"].iloc[0] == "0.0100"
    assert len(json.loads((out / "metrics.json").read_text(encoding="utf-8"))) == 4
    curves = pd.read_csv(out / "P01_curves.csv")
    assert list(curves.columns) == ["tau", "tpr", "tnr", "tpr_smooth", "tnr_smooth"]


def test_empty_report_is_an_error(tmp_path):
    with pytest.raises(UndefinedMetricError):
        write_report([], tmp_path)


def _cv_summary(pid, group, shift):
    tau = [0.0, 0.5, 1.0]
    curves = {"tau": tau, "tpr": [1.0 - shift, 0.5, shift], "tnr": [shift, 0.5, 1.0 - shift],
              "chance_tpr": [0.9, 0.3, 0.0], "chance_tnr": [0.1, 0.6, 1.0]}
    return {"participant_id": pid, "group": group, "tau_star": 0.5, "tpr": 0.5, "tnr": 0.5, "n_curves": 50,
            "chance": {"tpr": 0.3, "tnr": 0.6, "product": 0.18}, "p_values": {"tpr": 0.02, "tnr": 0.5,
                                                                              "product": 0.04},
            "n_perm": 50, "curves": curves}


def test_cv_group_curves_average_participants():
    results = [_cv_summary("P01", "control", 0.0), _cv_summary("P02", "control", 0.2),
               _cv_summary("P09", "sci", 0.1)]
    table = cv_group_curves(results)
    control = table[table["group"] == "control"].reset_index(drop=True)
    assert len(control) == 3 and set(control["n_participants"]) == {2}
    assert control.loc[0, "tpr"] == pytest.approx(0.9)
    assert control.loc[0, "tpr_ci_low"] < 0.9 < control.loc[0, "tpr_ci_high"]
    assert control.loc[1, "tpr_ci_low"] == pytest.approx(0.5)
    assert control.loc[2, "chance_tnr"] == pytest.approx(1.0)
    sci = table[table["group"] == "sci"]
    assert sci["tpr_ci_low"].isna().all()


def test_write_report_cross_validation_files(reports, tmp_path):
    results = [_cv_summary("P01", "control", 0.0), _cv_summary("P02", "control", 0.2)]
    out = write_report(reports, tmp_path / "report", cv_results=results)
    cv = pd.read_csv(out / "cross_validation.csv")
    assert list(cv["p_product"]) == pytest.approx([0.04, 0.04])
    assert "chance_tpr" in cv.columns
    curves = pd.read_csv(out / "cross_validation_curves.csv")
    assert {"tau", "tpr", "tpr_ci_low", "chance_tpr", "chance_tnr_ci_high"} <= set(curves.columns)
