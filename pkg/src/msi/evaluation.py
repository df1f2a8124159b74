"""Classification metrics, held-out evaluation and k-fold cross-validation."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import Dataset, kfold_split
from .errors import ShapeError
from .model import Model, ModelConfig, check_dataset, fit, make_batch


@dataclass
class EvalReport:
    accuracy: float
    weighted_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    confusion: list[list[int]]   # rows: true class, columns: predicted class

    @property
    def n_samples(self) -> int:
        return int(sum(map(sum, self.confusion)))

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "n_samples": self.n_samples,
            "per_class": [
                {"class": c, "precision": p, "recall": r, "f1": f, "support": s}
                for c, (p, r, f, s) in enumerate(zip(self.precision, self.recall, self.f1, self.support))
            ],
            "confusion": self.confusion,
        }

    def confusion_table(self, names=None) -> str:
        c = len(self.confusion)
        names = [str(n) for n in (names or range(c))]
        cells = [[str(v) for v in row] for row in self.confusion]
        w = max(len("true\\pred"), *(len(n) for n in names), *(len(x) for row in cells for x in row))
        lines = [" ".join(s.rjust(w) for s in ["true\\pred", *names])]
        for n, row in zip(names, cells):
            lines.append(" ".join(s.rjust(w) for s in [n, *row]))
        return "\n".join(lines)


def report_from_predictions(y_true, y_pred, num_classes: int) -> EvalReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ShapeError("need equally sized, non-empty label and prediction arrays")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return EvalReport(
        accuracy=float(tp.sum() / y_true.size),
        weighted_f1=float((f1 * support).sum() / support.sum()),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=support.tolist(),
        confusion=cm.tolist(),
    )


def evaluate(ds: Dataset, model: Model, batch_size: int = 256) -> EvalReport:
    if len(ds) == 0:
        raise ShapeError("no samples to evaluate")
    preds = []
    for start in range(0, len(ds), batch_size):
        idx = range(start, min(start + batch_size, len(ds)))
        preds.append(model.predict(make_batch(ds, model.cfg.frame_count, idx)))
    labels = [r.label for r in ds.records]
    return report_from_predictions(labels, np.concatenate(preds), model.cfg.num_classes)


def mean_report(reports: list[EvalReport]) -> EvalReport:
    """Arithmetic mean of every rate across folds; confusion counts are summed."""
    def avg(get):
        return np.mean([get(r) for r in reports], axis=0)
    return EvalReport(
        accuracy=float(avg(lambda r: r.accuracy)),
        weighted_f1=float(avg(lambda r: r.weighted_f1)),
        precision=avg(lambda r: r.precision).tolist(),
        recall=avg(lambda r: r.recall).tolist(),
        f1=avg(lambda r: r.f1).tolist(),
        support=np.sum([r.support for r in reports], axis=0).tolist(),
        confusion=np.sum([r.confusion for r in reports], axis=0).tolist(),
    )


def _run_fold(args) -> EvalReport:
    ds, cfg, train_idx, test_idx = args
    model = Model(cfg)
    fit(ds.subset(train_idx), model)
    return evaluate(ds.subset(test_idx), model)


def cross_validate(ds: Dataset, cfg: ModelConfig, k: int = 10, seed: int | None = None,
                   workers: int = 1) -> tuple[list[EvalReport], EvalReport, np.ndarray]:
    """Train on k-1 folds, evaluate on the held-out one, k times.

    Returns per-fold reports, their mean and the fold assignment.
    """
    check_dataset(ds, cfg)
    folds = kfold_split(len(ds), k, cfg.seed if seed is None else seed)
    jobs = [(ds, cfg, np.flatnonzero(folds != f), np.flatnonzero(folds == f)) for f in range(k)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_fold, jobs))
    else:
        reports = [_run_fold(j) for j in jobs]
    return reports, mean_report(reports), folds
