"""Run orchestration shared by the CLI and the acceptance tests."""

import csv
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from portionmtl.config import save_config
from portionmtl.metrics import EvalRecord, append_report, build_report
from portionmtl.multitask import TwinModel, predict, save_checkpoint, train

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("Accuracy", "MAE", "MAE-Correct", "MCCR")
# columns reported per mode (the rest stay empty, as in the original table)
MODE_COLUMNS = {
    "classification_only": ("Accuracy",),
    "portion_only": ("MAE",),
    "hps": ("Accuracy", "MAE"),
    "sps": ("Accuracy", "MAE"),
    "sps_cdfa": TABLE_COLUMNS,
    "sps_cdfa_bn": TABLE_COLUMNS,
    "sps_cdfa_ln": TABLE_COLUMNS,
    "sps_cdfa_ln_bn": TABLE_COLUMNS,
}


class SpecMismatch(ValueError):
    pass


def records_for(model, dataset):
    x, y, z = dataset.arrays()
    classes, portions = predict(model, x)
    return [
        EvalRecord(
            None if classes is None else int(classes[i]), int(y[i]),
            None if portions is None else float(portions[i]), float(z[i]),
        )
        for i in range(len(y))
    ]


def check_compatible(model, dataset):
    b = model.spec.backbone
    ds_size = dataset.items[0].pixels.shape if dataset.items else None
    want = (b.input_size, b.input_size, b.in_channels)
    if model.spec.n_classes != dataset.n_classes or (ds_size is not None and tuple(ds_size) != want):
        raise SpecMismatch(
            f"checkpoint spec (n_classes={model.spec.n_classes}, image={want}) does not match "
            f"dataset spec (n_classes={dataset.n_classes}, image={tuple(ds_size) if ds_size else None})"
        )


def evaluate(model, dataset, C=1.0, labels=None):
    check_compatible(model, dataset)
    s = model.spec
    return build_report(records_for(model, dataset), C, s.has_classifier, s.has_regressor, labels)


@dataclass
class RunResult:
    run_dir: Path
    model: TwinModel
    history: list


def run_name(mode, seed):
    return f"{mode}_seed{seed}_{time.strftime('%Y%m%d-%H%M%S')}"


def _unique_dir(root, name):
    d = Path(root) / name
    k = 1
    while d.exists():
        d = Path(root) / f"{name}-{k}"
        k += 1
    d.mkdir(parents=True)
    return d


def train_run(cfg, dataset, out_root, mode=None, seed=None, on_epoch=None):
    """Train one configuration; writes config.yaml, losses.jsonl and
    checkpoint.bin into a fresh run directory under ``out_root``."""
    mode = mode or cfg.mode
    seed = cfg.seed if seed is None else seed
    cfg = cfg.with_overrides(mode=mode, seed=seed)
    spec = cfg.model_spec()
    train_set = dataset.subset("train") if any(it.split for it in dataset.items) else dataset
    model = TwinModel(spec, seed)
    check_compatible(model, train_set)
    run_dir = _unique_dir(out_root, run_name(mode, seed))
    save_config(cfg, run_dir / "config.yaml")
    with open(run_dir / "losses.jsonl", "w", encoding="utf-8") as fh:
        def log_epoch(rec):
            fh.write(json.dumps(rec.to_dict()) + "\n")
            fh.flush()
            log.info("%s seed=%d epoch %d: overall=%.4f l_c=%.4f l_r=%.4f l_ps=%.4f lr=%.2e",
                     mode, seed, rec.epoch, rec.overall, rec.l_c, rec.l_r, rec.l_ps, rec.lr)
            if on_epoch:
                on_epoch(rec)
        result = train(model, train_set, cfg.train, on_epoch=log_epoch)
    save_checkpoint(model, run_dir / "checkpoint.bin")
    return RunResult(run_dir, model, result.history)


def _fmt(v, col):
    if v is None:
        return "-"
    return f"{v:.2f}" if col != "MCCR" else f"{v:.4f}"


@dataclass
class AblationTable:
    rows: list  # dicts: mode, status, seeds, and TABLE_COLUMNS (None when absent)

    def to_dict(self):
        return {"columns": list(TABLE_COLUMNS), "rows": self.rows}

    def row(self, mode):
        return next(r for r in self.rows if r["mode"] == mode)

    @property
    def failed(self):
        return [r["mode"] for r in self.rows if r["status"] != "ok"]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Method", *TABLE_COLUMNS, "status"])
        for r in self.rows:
            w.writerow([r["mode"], *("" if r[c] is None else repr(r[c]) for c in TABLE_COLUMNS), r["status"]])
        return buf.getvalue()

    def render(self):
        head = ["Method", "Accuracy (%)", "MAE (kcal)", "MAE-Correct (kcal)", "MCCR"]
        body = [[r["mode"], *(_fmt(r[c], c) for c in TABLE_COLUMNS)] + ([] if r["status"] == "ok" else ["FAILED"])
                for r in self.rows]
        widths = [max(len(str(x[i])) for x in [head, *body]) for i in range(len(head))]
        lines = ["  ".join(str(v).ljust(w) for v, w in zip(head, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(str(v).ljust(w) for v, w in zip(row, widths)) + "".join(row[len(widths):])
                  for row in body]
        return "\n".join(lines) + "\n"


def aggregate(reports_by_mode, failures=()):
    """Mean of each applicable column over seeds; accuracy in percent."""
    rows = []
    for mode in reports_by_mode:
        reps = reports_by_mode[mode]
        row = {"mode": mode, "status": "failed" if mode in failures else "ok", "seeds": len(reps)}
        for col in TABLE_COLUMNS:
            vals = []
            if mode not in failures and col in MODE_COLUMNS[mode]:
                attr = {"Accuracy": "accuracy", "MAE": "mae", "MAE-Correct": "mae_correct", "MCCR": "mccr"}[col]
                vals = [getattr(r, attr) for r in reps]
            if vals and all(v is not None for v in vals):
                mean = float(np.mean(vals))
                row[col] = 100.0 * mean if col == "Accuracy" else mean
            else:
                row[col] = None
        rows.append(row)
    return AblationTable(rows)


def _one_run(args):
    cfg, dataset, out_root, mode, seed = args
    res = train_run(cfg, dataset, out_root, mode, seed)
    rep = evaluate(res.model, dataset.subset("test"), cfg.mccr_constant,
                   labels={"mode": mode, "seed": seed, "split": "test", "run": res.run_dir.name})
    return rep


def run_ablation(cfg, dataset, out_dir, modes=None, seeds=None, workers=1):
    """Train and test every mode for every seed; returns the aggregated table.

    Per-run reports are appended to ``out_dir/reports.jsonl``; the table is
    written as ``ablation.json``, ``ablation.csv`` and ``ablation.txt``.
    """
    modes = tuple(modes or cfg.ablation_modes)
    seeds = tuple(cfg.ablation_seeds if seeds is None else seeds)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, dataset, out_dir / "runs", m, s) for m in modes for s in seeds]
    reports = {m: [] for m in modes}
    failures = set()
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_one_run, j) for j in jobs]
            outcomes = []
            for j, f in zip(jobs, futures):
                try:
                    outcomes.append((j, f.result(), None))
                except Exception as exc:  # noqa: BLE001 - recorded as a failed row
                    outcomes.append((j, None, exc))
    else:
        outcomes = []
        for j in jobs:
            try:
                outcomes.append((j, _one_run(j), None))
            except Exception as exc:  # noqa: BLE001 - recorded as a failed row
                outcomes.append((j, None, exc))
    for (_, _, _, mode, seed), rep, exc in outcomes:
        if exc is not None:
            log.error("ablation run %s seed=%d failed: %s", mode, seed, exc)
            failures.add(mode)
            continue
        reports[mode].append(rep)
        append_report(rep, out_dir / "reports.jsonl")
    table = aggregate(reports, failures)
    (out_dir / "ablation.json").write_text(json.dumps(table.to_dict(), indent=1) + "\n", encoding="utf-8")
    (out_dir / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
    (out_dir / "ablation.txt").write_text(table.render(), encoding="utf-8")
    return table


__all__ = ["train_run", "evaluate", "run_ablation", "aggregate", "AblationTable", "records_for",
           "SpecMismatch", "RunResult"]
