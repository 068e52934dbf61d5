"""Evaluation: metrics, task definitions, ablation filters, stratified reports."""

import csv
import json
from dataclasses import dataclass

import numpy as np

from ..cohort import YEAR_DAYS, SequenceInput
from .metrics import DegenerateLabels, auprc, auroc, pr_curve, roc_curve

__all__ = [
    "ABLATION_MODES",
    "AblationMode",
    "DegenerateLabels",
    "EvalTask",
    "OraclePredictor",
    "TASKS",
    "auprc",
    "auroc",
    "evaluate",
    "filter_sequence",
    "pr_curve",
    "roc_curve",
    "task_labels",
    "write_curves",
    "write_metrics_csv",
    "write_metrics_json",
]


@dataclass(frozen=True)
class EvalTask:
    kind: str  # "diagnosis" or "risk5y"
    horizon_index: int

    def __post_init__(self):
        if self.kind not in ("diagnosis", "risk5y"):
            raise ValueError(f"unknown task {self.kind!r}")
        if not 0 <= self.horizon_index <= 5:
            raise ValueError("horizon_index must lie in [0, 5]")


TASKS = {"diagnosis": EvalTask("diagnosis", 0), "risk5y": EvalTask("risk5y", 5)}


def task_labels(labels, task):
    """Indices of eligible examples and their binary labels for ``task``.

    Diagnosis uses every example whose 120-day status is known. Five-year
    risk drops cancers found at the index visit and negatives followed for
    less than five years.
    """
    idx, y = [], []
    for i, lab in enumerate(labels):
        if task.kind == "diagnosis":
            if lab.mask[0]:
                idx.append(i)
                y.append(lab.targets[0])
        elif lab.targets[0] == 0 and lab.mask[5]:
            idx.append(i)
            y.append(lab.targets[5])
    return np.array(idx, dtype=np.int64), np.array(y, dtype=np.int64)


@dataclass(frozen=True)
class AblationMode:
    kind: str  # full | mammo_only | no_prior | prior_window
    years: int | None = None

    def __post_init__(self):
        if self.kind not in ("full", "mammo_only", "no_prior", "prior_window"):
            raise ValueError(f"unknown ablation mode {self.kind!r}")
        if (self.kind == "prior_window") != (self.years is not None):
            raise ValueError("prior_window needs years; other modes take none")
        if self.years is not None and self.years not in (1, 2, 3):
            raise ValueError("prior window years must be 1, 2 or 3")

    @property
    def name(self):
        return f"prior_window_{self.years}" if self.kind == "prior_window" else self.kind

    @classmethod
    def parse(cls, text):
        text = text.strip()
        if text.startswith("prior_window_"):
            return cls("prior_window", int(text.rsplit("_", 1)[1]))
        return cls(text)


FULL = AblationMode("full")
ABLATION_MODES = (
    AblationMode("mammo_only"),
    AblationMode("no_prior"),
    AblationMode("prior_window", 1),
    AblationMode("prior_window", 2),
    AblationMode("prior_window", 3),
    FULL,
)


def filter_sequence(seq, mode):
    """Drop exams according to ``mode``; the index exam is always kept."""
    if mode.kind == "full":
        return seq
    t0 = seq.index_exam.exam_time_days
    if mode.kind == "mammo_only":
        keep = [p for p in seq.priors if p.modality != "US"]
    elif mode.kind == "no_prior":
        keep = [p for p in seq.priors if p.exam_time_days == t0]
    else:
        keep = [p for p in seq.priors if t0 - p.exam_time_days <= mode.years * YEAR_DAYS]
    return SequenceInput(seq.index_exam, tuple(keep))


STRATA = {
    "age_bucket": lambda seq: seq.index_exam.age_bucket,
    "density": lambda seq: seq.index_exam.density or "unknown",
}


class OraclePredictor:
    """Looks up the generator's true event probabilities by patient id."""

    def __init__(self, dataset):
        self._by_patient = {
            s.patient_id: dataset.oracle[i] for i, s in enumerate(dataset.sequences)
        }

    def predict(self, seq):
        return self._by_patient[seq.patient_id]


def _score_row(task, mode, stratum, scores, y):
    row = {
        "task": task.kind,
        "mode": mode.name,
        "stratum": stratum,
        "n": int(len(y)),
        "n_pos": int(np.sum(y)),
        "auroc": None,
        "auprc": None,
    }
    try:
        row["auroc"] = auroc(scores, y)
        row["auprc"] = auprc(scores, y)
    except DegenerateLabels:
        pass  # reported as undefined
    return row


def predict_scores(model, dataset, task, mode=FULL):
    """Horizon scores for the task-eligible examples, with their labels."""
    idx, y = task_labels(dataset.labels, task)
    scores = np.array(
        [model.predict(filter_sequence(dataset.sequences[i], mode))[task.horizon_index] for i in idx],
        dtype=np.float64,
    )
    return idx, scores, y


def evaluate(model, dataset, task, mode=FULL, strata=None):
    """Overall and per-stratum AUROC/AUPRC rows for one task and ablation mode.

    ``model`` is anything with ``predict(seq) -> 6 cumulative probabilities``.
    Strata with a single class are kept with ``auroc``/``auprc`` set to None.
    """
    idx, scores, y = predict_scores(model, dataset, task, mode)
    rows = [_score_row(task, mode, "overall", scores, y)]
    if strata is not None:
        if isinstance(strata, str):
            key, label = STRATA[strata], strata
        else:
            key, label = strata, getattr(strata, "__name__", "group")
        groups = np.array([key(dataset.sequences[i]) for i in idx], dtype=object)
        for g in sorted(set(groups.tolist())):
            sel = groups == g
            rows.append(_score_row(task, mode, f"{label}={g}", scores[sel], y[sel]))
    return rows


CSV_COLUMNS = ("task", "mode", "stratum", "n", "n_pos", "auroc", "auprc")


def _fmt(v):
    if v is None:
        return "undefined"
    return repr(v) if isinstance(v, float) else str(v)


def write_metrics_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])


def write_metrics_json(rows, path, extra=None):
    summary = {"rows": rows}
    if extra:
        summary.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_curves(scores, labels, roc_path, pr_path):
    fpr, tpr, thr = roc_curve(scores, labels)
    with open(roc_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "fpr", "tpr"))
        w.writerows(zip(map(repr, thr.tolist()), map(repr, fpr.tolist()), map(repr, tpr.tolist())))
    rec, prec, thr = pr_curve(scores, labels)
    with open(pr_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "recall", "precision"))
        w.writerows(zip(map(repr, thr.tolist()), map(repr, rec.tolist()), map(repr, prec.tolist())))
