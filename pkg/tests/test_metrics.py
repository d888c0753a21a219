import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portionmtl.metrics import (
    EvalRecord, MetricsReport, MetricUnavailable, accuracy, append_report, build_report, error_percentage,
    mae, mccr, read_reports,
)

# pred class, true class, pred kcal, true kcal
FIXTURE = [
    EvalRecord(0, 0, 110.0, 100.0),
    EvalRecord(1, 1, 190.0, 200.0),
    EvalRecord(2, 1, 330.0, 300.0),
    EvalRecord(3, 3, 400.0, 400.0),
]


def test_fixture_by_hand():
    assert accuracy(FIXTURE) == 0.75
    assert mae(FIXTURE) == 12.5                      # (10+10+30+0)/4
    assert mae(FIXTURE, "correct_only") == 20.0 / 3  # (10+10+0)/3
    assert mccr(FIXTURE) == (20.0 / 3) / 3
    assert mccr(FIXTURE, C=2.0) == 2.0 * (20.0 / 3) / 3
    assert error_percentage(FIXTURE) == 50.0 / 1000.0 * 100.0


def test_unavailable_cases():
    wrong = [EvalRecord(1, 0, 1.0, 2.0)]
    with pytest.raises(MetricUnavailable):
        mae(wrong, "correct_only")
    with pytest.raises(MetricUnavailable):
        mccr(wrong)
    with pytest.raises(MetricUnavailable):
        accuracy([])
    with pytest.raises(MetricUnavailable):
        error_percentage([EvalRecord(0, 0, 1.0, 0.0)])
    with pytest.raises(ValueError):
        mae(FIXTURE, "some")


records = st.lists(
    st.builds(
        EvalRecord,
        st.integers(0, 3), st.integers(0, 3),
        st.floats(0, 1000, allow_nan=False), st.floats(0.5, 1000, allow_nan=False),
    ),
    min_size=1, max_size=60,
)


@settings(max_examples=100, deadline=None)
@given(records)
def test_mccr_identity(recs):
    n = sum(1 for r in recs if r.predicted_class == r.true_class)
    if n == 0:
        with pytest.raises(MetricUnavailable):
            mccr(recs)
        return
    assert mccr(recs, 1.0) == mae(recs, "correct_only") / n


@settings(max_examples=100, deadline=None)
@given(records)
def test_metric_ranges(recs):
    assert 0.0 <= accuracy(recs) <= 1.0
    assert mae(recs) >= 0.0
    assert error_percentage(recs) >= 0.0


def test_report_for_single_task_models():
    rep = build_report(FIXTURE, classification=False)
    d = rep.to_dict()
    assert "Accuracy" not in d and "MCCR" not in d and "MAE-Correct" not in d
    assert d["MAE"] == 12.5
    assert "accuracy" in d["absent"]
    cls = [EvalRecord(r.predicted_class, r.true_class, None, r.true_portion) for r in FIXTURE]
    rep = build_report(cls, portion=False)
    assert rep.accuracy == 0.75 and rep.mae is None and "mae" in rep.absent


def test_report_records_undefined_metric():
    rep = build_report([EvalRecord(1, 0, 5.0, 6.0)])
    assert rep.accuracy == 0.0 and rep.mccr is None
    assert "mccr" in rep.absent


def test_report_round_trip(tmp_path):
    rep = build_report(FIXTURE, C=2.0, labels={"mode": "sps", "seed": 1})
    path = tmp_path / "r.jsonl"
    append_report(rep, path)
    append_report(rep, path)
    back = read_reports(path)
    assert len(back) == 2 and back[0] == rep
    line = json.loads(path.read_text().splitlines()[0])
    assert line["mode"] == "sps" and line["C"] == 2.0


def test_rounded_view():
    r = build_report(FIXTURE).rounded()
    assert r == {"Accuracy": 75.0, "MAE": 12.5, "MAE-Correct": 6.67, "MCCR": 2.2222, "EP": 5.0}


def test_summation_order_is_fixed():
    rng = np.random.default_rng(0)
    recs = [EvalRecord(0, 0, float(p), float(t)) for p, t in rng.random((50, 2)) * 1000]
    assert mae(recs) == mae(list(recs))
    assert isinstance(MetricsReport(n_total=1).to_dict(), dict)
