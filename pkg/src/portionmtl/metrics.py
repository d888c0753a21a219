"""Classification and portion-estimation metrics.

Summation is plain left-to-right over the record order, so results are
reproducible bit for bit for a fixed record list.
"""

import json
from dataclasses import dataclass, field


class MetricUnavailable(ValueError):
    """A metric is undefined for the given records (e.g. nothing correct)."""


@dataclass(frozen=True)
class EvalRecord:
    predicted_class: object  # int or None for portion-only models
    true_class: int
    predicted_portion: object  # float or None for classification-only models
    true_portion: float


def _correct(r):
    return r.predicted_class is not None and r.predicted_class == r.true_class


def _require(records):
    if not records:
        raise MetricUnavailable("no records")


def accuracy(records):
    _require(records)
    return sum(1 for r in records if _correct(r)) / len(records)


def _abs_errors(records):
    return [abs(r.predicted_portion - r.true_portion) for r in records]


def mae(records, subset="all"):
    """Mean absolute portion error over all records or only the correctly
    classified ones (``subset="correct_only"``)."""
    if subset == "all":
        chosen = list(records)
    elif subset == "correct_only":
        chosen = [r for r in records if _correct(r)]
    else:
        raise ValueError(f"subset must be 'all' or 'correct_only', got {subset!r}")
    if not chosen:
        raise MetricUnavailable(f"no records in subset {subset!r}")
    return sum(_abs_errors(chosen)) / len(chosen)


def mccr(records, C=1.0):
    """C * (sum of abs errors over correctly classified) / n_correct**2.

    Evaluated as ``C * (S / n) / n`` so that with C=1 it equals
    ``mae(records, "correct_only") / n_correct`` exactly.
    """
    correct = [r for r in records if _correct(r)]
    if not correct:
        raise MetricUnavailable("MCCR needs at least one correctly classified record")
    n = len(correct)
    return C * (sum(_abs_errors(correct)) / n) / n


def error_percentage(records):
    """Aggregate error: sum |pred - true| / sum true * 100."""
    _require(records)
    total = sum(r.true_portion for r in records)
    if total <= 0:
        raise MetricUnavailable("error percentage needs a positive groundtruth total")
    return sum(_abs_errors(records)) / total * 100.0


# Table column names used in serialized reports
COLUMNS = ("Accuracy", "MAE", "MAE-Correct", "MCCR", "EP")


@dataclass
class MetricsReport:
    n_total: int
    n_correct: object = None
    accuracy: object = None
    mae: object = None
    mae_correct: object = None
    mccr: object = None
    ep: object = None
    mccr_constant: float = 1.0
    absent: dict = field(default_factory=dict)  # metric -> reason
    labels: dict = field(default_factory=dict)  # mode, split, seed, ...

    def to_dict(self):
        d = dict(self.labels)
        d.update({
            "Accuracy": self.accuracy,
            "MAE": self.mae,
            "MAE-Correct": self.mae_correct,
            "MCCR": self.mccr,
            "EP": self.ep,
            "n_total": self.n_total,
            "n_correct": self.n_correct,
            "C": self.mccr_constant,
            "absent": dict(self.absent),
        })
        # absent metrics are dropped, not written as 0 or null
        return {k: v for k, v in d.items() if v is not None}

    def rounded(self):
        """Human view: accuracy in percent, kcal to 2 places."""
        out = {}
        if self.accuracy is not None:
            out["Accuracy"] = round(100 * self.accuracy, 2)
        for key, val, nd in (("MAE", self.mae, 2), ("MAE-Correct", self.mae_correct, 2),
                             ("MCCR", self.mccr, 4), ("EP", self.ep, 2)):
            if val is not None:
                out[key] = round(val, nd)
        return out

    @classmethod
    def from_dict(cls, d):
        labels = {k: v for k, v in d.items()
                  if k not in (*COLUMNS, "n_total", "n_correct", "C", "absent")}
        return cls(
            n_total=d["n_total"], n_correct=d.get("n_correct"), accuracy=d.get("Accuracy"),
            mae=d.get("MAE"), mae_correct=d.get("MAE-Correct"), mccr=d.get("MCCR"),
            ep=d.get("EP"), mccr_constant=d.get("C", 1.0), absent=d.get("absent", {}),
            labels=labels,
        )


def build_report(records, C=1.0, classification=True, portion=True, labels=None):
    """Compute every applicable metric from one record list.

    Metrics that are undefined (or not applicable to the model) are left
    as ``None`` with a reason in ``report.absent``.
    """
    _require(records)
    rep = MetricsReport(n_total=len(records), mccr_constant=C, labels=dict(labels or {}))
    if not classification:
        for k in ("accuracy", "mae_correct", "mccr"):
            rep.absent[k] = "model has no classification head"
    if not portion:
        for k in ("mae", "mae_correct", "mccr", "ep"):
            rep.absent[k] = "model has no portion head"

    def attempt(name, fn):
        if name in rep.absent:
            return
        try:
            setattr(rep, name, fn())
        except MetricUnavailable as exc:
            rep.absent[name] = str(exc)

    if classification:
        rep.n_correct = sum(1 for r in records if _correct(r))
    attempt("accuracy", lambda: accuracy(records))
    attempt("mae", lambda: mae(records))
    attempt("mae_correct", lambda: mae(records, "correct_only"))
    attempt("mccr", lambda: mccr(records, C))
    attempt("ep", lambda: error_percentage(records))
    return rep


def append_report(report, path):
    """Append one JSON line to a results log."""
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")


def read_reports(path):
    with open(path, encoding="utf-8") as fh:
        return [MetricsReport.from_dict(json.loads(line)) for line in fh if line.strip()]
