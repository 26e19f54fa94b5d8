"""Stratified k-fold cross-validation, confusion-derived metrics and report rendering."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .bovw import Codebook, CodebookConfig, encode_histogram, kmeans_fit
from .dataset import ClassLabel
from .descriptors import DescriptorSet
from .svm import SvmConfig, train_multiclass

N_CLASSES = len(ClassLabel)
SHORT = {ClassLabel.NORMAL: "Norm", ClassLabel.EXUDATES: "Ex", ClassLabel.DRUSEN: "Dru"}
CSV_COLUMNS = ("pipeline", "param", "class", "acc", "sens", "spec", "fold")


class EvalError(ValueError):
    pass


class TooFewSamples(EvalError):
    pass


class BadK(EvalError):
    pass


class LengthMismatch(EvalError):
    pass


class EmptyMatrix(EvalError):
    pass


class EmptyInput(EvalError):
    pass


# ------------------------------------------------------------------ folds


@dataclass
class FoldAssignment:
    k: int
    folds: np.ndarray  # fold index per sample
    seed: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds != fold)


def stratified_kfold(labels: Sequence[int], k: int = 10, seed: int = 0) -> FoldAssignment:
    """Shuffle each class (seeded) and deal its samples round-robin over the folds.

    The deal for each class continues where the previous class stopped, so
    fold totals stay balanced as well as per-class counts.
    """
    if k < 2:
        raise BadK(f"k must be >= 2, got {k}")
    labels = np.asarray([int(v) for v in labels])
    if len(labels) < k:
        raise TooFewSamples(f"{len(labels)} samples cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(labels), dtype=np.intp)
    start = 0
    for c in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = (start + np.arange(len(idx))) % k
        start = (start + len(idx)) % k
    return FoldAssignment(k, folds, seed)


# ---------------------------------------------------------------- metrics


def confusion(true: Sequence[int], pred: Sequence[int]) -> np.ndarray:
    """3x3 counts, rows = true class, columns = predicted class."""
    true = np.asarray([int(v) for v in true])
    pred = np.asarray([int(v) for v in pred])
    if len(true) != len(pred):
        raise LengthMismatch(f"{len(true)} true labels vs {len(pred)} predictions")
    if len(true) == 0:
        raise LengthMismatch("no samples")
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


@dataclass
class ClassMetrics:
    """Per-class one-vs-rest percentages, indexed by ``ClassLabel``.

    ``undefined`` lists ``(class, metric)`` pairs whose denominator was zero;
    those are reported as 0.
    """

    acc: np.ndarray
    sens: np.ndarray
    spec: np.ndarray
    undefined: list[tuple[ClassLabel, str]] = field(default_factory=list)

    def row(self) -> list[float]:
        return [*self.acc, *self.sens, *self.spec]


def _pct(num: int, den: int) -> float:
    return 100.0 * num / den if den else 0.0


def class_metrics(cm: np.ndarray) -> ClassMetrics:
    cm = np.asarray(cm, dtype=np.int64)
    n = int(cm.sum())
    if n == 0:
        raise EmptyMatrix("confusion matrix is empty")
    acc, sens, spec, undefined = [], [], [], []
    for c in ClassLabel:
        tp = int(cm[c, c])
        fn = int(cm[c, :].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        tn = n - tp - fn - fp
        acc.append(_pct(tp + tn, n))
        sens.append(_pct(tp, tp + fn))
        spec.append(_pct(tn, tn + fp))
        if tp + fn == 0:
            undefined.append((c, "sens"))
        if tn + fp == 0:
            undefined.append((c, "spec"))
    return ClassMetrics(np.array(acc), np.array(sens), np.array(spec), undefined)


def overall_accuracy(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    return 100.0 * int(np.trace(cm)) / int(cm.sum())


# ----------------------------------------------------------------- report


@dataclass
class FoldResult:
    metrics: ClassMetrics
    overall: float
    confusion: np.ndarray | None = None


@dataclass
class CvReport:
    pipeline: str  # "bovw" or "deep"
    param: str  # "W=200", a model id, ...
    folds: list[FoldResult]
    seed: int = 0

    def _stack(self, attr: str) -> np.ndarray:
        return np.array([getattr(f.metrics, attr) for f in self.folds])

    @staticmethod
    def _std(a: np.ndarray) -> np.ndarray:
        return a.std(axis=0, ddof=1) if len(a) > 1 else np.zeros(a.shape[1:])

    def mean(self, attr: str) -> np.ndarray:
        return self._stack(attr).mean(axis=0)

    def std(self, attr: str) -> np.ndarray:
        return self._std(self._stack(attr))

    @property
    def overall_mean(self) -> float:
        return float(np.mean([f.overall for f in self.folds]))

    @property
    def overall_std(self) -> float:
        return float(self._std(np.array([f.overall for f in self.folds])))

    @property
    def flagged(self) -> list[tuple[int, ClassLabel, str]]:
        return [(i, c, m) for i, f in enumerate(self.folds) for c, m in f.metrics.undefined]


# --------------------------------------------------------------- pipelines


class FoldPipeline(Protocol):
    """Fits on training indices only and predicts labels for the test indices."""

    def fit_predict(self, train: np.ndarray, test: np.ndarray,
                    labels: np.ndarray) -> np.ndarray: ...


@dataclass
class PrecomputedPipeline:
    """Fixed per-image feature vectors (deep features) classified by an SVM."""

    features: np.ndarray
    svm: SvmConfig = field(default_factory=lambda: SvmConfig(kernel="rbf"))

    def fit_predict(self, train, test, labels):
        x = np.asarray(self.features, dtype=np.float64)
        model = train_multiclass(x[train], labels[train], self.svm)
        return model.predict_many(x[test])


@dataclass
class BovwPipeline:
    """Per-fold codebook on training descriptors, word histograms, linear SVM.

    ``fit_codebook`` sees only the stacked descriptors of training images.
    """

    descriptor_sets: Sequence[DescriptorSet]
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    svm: SvmConfig = field(default_factory=lambda: SvmConfig(kernel="linear"))
    fit_codebook: Callable[[np.ndarray, CodebookConfig], Codebook] = kmeans_fit

    def fit_predict(self, train, test, labels):
        pool = np.concatenate([self.descriptor_sets[i].values for i in train])
        cb = self.fit_codebook(pool, self.codebook)
        hist = np.array([encode_histogram(self.descriptor_sets[i], cb).values
                         for i in range(len(self.descriptor_sets))])
        model = train_multiclass(hist[train], labels[train], self.svm)
        return model.predict_many(hist[test])


def _run_fold(pipeline, folds: FoldAssignment, labels: np.ndarray, fold: int) -> FoldResult:
    train, test = folds.train_indices(fold), folds.test_indices(fold)
    pred = pipeline.fit_predict(train, test, labels)
    cm = confusion(labels[test], pred)
    return FoldResult(class_metrics(cm), overall_accuracy(cm), cm)


def run_cv(pipeline: FoldPipeline, labels: Sequence[int], k: int = 10, seed: int = 0,
           name: str = "", param: str = "", jobs: int = 1) -> CvReport:
    """k-fold CV: fit on k-1 folds, predict the held-out fold, collect per-fold metrics.

    Folds may run in worker processes; results are gathered in fold order so
    the report does not depend on ``jobs``.
    """
    labels = np.asarray([int(v) for v in labels])
    folds = stratified_kfold(labels, k, seed)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold, pipeline, folds, labels, f) for f in range(k)]
            results = [fut.result() for fut in futures]
    else:
        results = [_run_fold(pipeline, folds, labels, f) for f in range(k)]
    return CvReport(name, param, results, seed)


# --------------------------------------------------------------- rendering


def fmt(v: float) -> str:
    return f"{v:.2f}"


def _metric_header() -> list[str]:
    return [f"{m} {SHORT[c]}" for m in ("Acc", "Sens", "Spec") for c in ClassLabel]


def _grid(title: str, key: str, reports: list[CvReport], with_max: bool) -> list[str]:
    head = [key, *_metric_header()]
    lines = [f"### {title}", "", "| " + " | ".join(head) + " |",
             "|" + "|".join("---" for _ in head) + "|"]
    rows = []
    for r in reports:
        vals = [*r.mean("acc"), *r.mean("sens"), *r.mean("spec")]
        rows.append(vals)
        name = r.param.removeprefix("W=") if key == "W" else r.param
        lines.append("| " + " | ".join([name, *map(fmt, vals)]) + " |")
    if with_max and len(rows) > 1:
        lines.append("| " + " | ".join(["Max", *map(fmt, np.max(rows, axis=0))]) + " |")
    lines.append("")
    return lines


def render_markdown(reports: list[CvReport]) -> str:
    bovw = [r for r in reports if r.pipeline == "bovw"]
    deep = [r for r in reports if r.pipeline != "bovw"]
    lines: list[str] = []
    if bovw:
        lines += _grid("BoVW: mean per-class metrics (%) by codebook size", "W", bovw, True)
    if deep:
        lines += _grid("Deep features: mean per-class metrics (%) by model", "Model", deep, False)
    labels = [("BoVW " + r.param if r.pipeline == "bovw" else r.param) for r in reports]
    lines += ["### Overall accuracy (%), mean ± std over folds", "",
              "| | " + " | ".join(labels) + " |",
              "|---|" + "|".join("---" for _ in reports) + "|",
              "| Accuracy | " + " | ".join(f"{fmt(r.overall_mean)} ± {fmt(r.overall_std)}"
                                          for r in reports) + " |", ""]
    flagged = [(r, f) for r in reports for f in r.flagged]
    if flagged:
        lines.append("Undefined metrics (reported as 0):")
        for r, (fold, c, m) in flagged:
            lines.append(f"- {r.pipeline} {r.param} fold {fold}: {m} of {c.display}")
        lines.append("")
    return "\n".join(lines)


def render_csv(reports: list[CvReport]) -> str:
    """Long-format CSV; ``fold`` is the fold index, ``mean`` or ``std``.

    Values are written with full round-trip precision. Rows with
    ``class=overall`` carry the overall accuracy in ``acc`` and leave
    ``sens``/``spec`` empty.
    """
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for r in reports:
        for i, f in enumerate(r.folds):
            for c in ClassLabel:
                wr.writerow([r.pipeline, r.param, c.name.lower(), repr(float(f.metrics.acc[c])),
                             repr(float(f.metrics.sens[c])), repr(float(f.metrics.spec[c])), i])
            wr.writerow([r.pipeline, r.param, "overall", repr(float(f.overall)), "", "", i])
        for stat, fn in (("mean", r.mean), ("std", r.std)):
            a, s, p = fn("acc"), fn("sens"), fn("spec")
            for c in ClassLabel:
                wr.writerow([r.pipeline, r.param, c.name.lower(), repr(float(a[c])),
                             repr(float(s[c])), repr(float(p[c])), stat])
        wr.writerow([r.pipeline, r.param, "overall", repr(r.overall_mean), "", "", "mean"])
        wr.writerow([r.pipeline, r.param, "overall", repr(r.overall_std), "", "", "std"])
    return buf.getvalue()


def render_report(reports: list[CvReport], format: str = "markdown") -> str:
    if not reports:
        raise EmptyInput("no reports to render")
    if format == "markdown":
        return render_markdown(reports)
    if format == "csv":
        return render_csv(reports)
    raise ValueError(f"unknown format {format!r}")


def parse_csv(text: str) -> list[CvReport]:
    """Rebuild reports (fold values only) from :func:`render_csv` output."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != CSV_COLUMNS:
        raise EvalError("unexpected CSV columns")
    order: dict[tuple[str, str], dict[int, dict]] = {}
    for row in rows:
        if not row["fold"].isdigit():
            continue
        key = (row["pipeline"], row["param"])
        fold = order.setdefault(key, {}).setdefault(int(row["fold"]), {})
        fold[row["class"]] = row
    reports = []
    for (pipeline, param), folds in order.items():
        results = []
        for i in sorted(folds):
            f = folds[i]
            cls = [f[c.name.lower()] for c in ClassLabel]
            m = ClassMetrics(np.array([float(x["acc"]) for x in cls]),
                             np.array([float(x["sens"]) for x in cls]),
                             np.array([float(x["spec"]) for x in cls]))
            results.append(FoldResult(m, float(f["overall"]["acc"])))
        reports.append(CvReport(pipeline, param, results))
    return reports


def report_from_summary(pipeline: str, param: str, acc, sens, spec,
                        overall_mean: float, overall_std: float) -> CvReport:
    """Two-fold report whose means and sample stds equal the given summary values.

    Per-class metrics are placed symmetrically (identical in both folds); the
    overall accuracy folds are ``mean -/+ std / sqrt(2)``.
    """
    half = overall_std / math.sqrt(2.0)
    m = ClassMetrics(np.asarray(acc, float), np.asarray(sens, float), np.asarray(spec, float))
    return CvReport(pipeline, param, [FoldResult(m, overall_mean - half),
                                      FoldResult(m, overall_mean + half)])
