"""Confusion matrices, macro-averaged scores, gate-matrix clustering and report files."""
import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.hierarchy import leaves_list, linkage

from .errors import ShapeError, LabelError, ValidationError

REPORT_VERSION = 1


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: tuple = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0]
        if self.class_names is None:
            self.class_names = tuple(str(i) for i in range(k))
        self.class_names = tuple(self.class_names)

    @property
    def k(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def normalized(self):
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)


@dataclass
class EvalReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: ConfusionMatrix
    zero_support: tuple = ()
    binary: dict = field(default_factory=dict)

    def to_dict(self):
        names = self.confusion.class_names
        return {
            "format": "neurotype-metrics",
            "version": REPORT_VERSION,
            "n_samples": self.confusion.total,
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": {
                name: {"precision": float(p), "recall": float(r), "f1": float(f),
                       "support": int(s)}
                for name, p, r, f, s in zip(names, self.precision, self.recall, self.f1,
                                            self.support)
            },
            "zero_support": list(self.zero_support),
            "binary": self.binary,
            "confusion": self.confusion.counts.tolist(),
            "class_names": list(names),
        }


def confusion(y_true, y_pred, k, class_names=None):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"y_true has {y_true.shape} entries but y_pred has {y_pred.shape}")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= k):
            raise LabelError(f"{name} has labels outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts, class_names)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def binary_summary(cm, positive=1):
    """Accuracy, precision, recall and F1 of one class treated as positive."""
    tp = cm.counts[positive, positive]
    fp = cm.counts[:, positive].sum() - tp
    fn = cm.counts[positive, :].sum() - tp
    precision = float(_safe_div(tp, tp + fp))
    recall = float(_safe_div(tp, tp + fn))
    f1 = float(_safe_div(2 * tp, 2 * tp + fp + fn))
    accuracy = float(np.trace(cm.counts) / cm.total)
    return {"positive": cm.class_names[positive], "accuracy": accuracy,
            "precision": precision, "recall": recall, "f1": f1}


def macro_scores(cm, positive=None, warn=True):
    """Per-class and unweighted macro precision/recall/F1.

    Classes without support contribute 0 to the macro means and are listed in
    ``zero_support``. For ``positive`` set, a one-class summary is attached.
    """
    counts = cm.counts
    if cm.total == 0:
        raise ValidationError("confusion matrix is empty")
    tp = np.diag(counts).astype(np.float64)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * tp, support + predicted)
    zero = tuple(cm.class_names[i] for i in np.flatnonzero(support == 0))
    if zero and warn:
        warnings.warn(f"classes without support count as 0 in macro scores: {zero}",
                      RuntimeWarning, stacklevel=2)
    report = EvalReport(
        accuracy=float(tp.sum() / cm.total),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        precision=precision, recall=recall, f1=f1, support=support,
        confusion=cm, zero_support=zero,
    )
    if positive is not None:
        report.binary = binary_summary(cm, positive)
    return report


def evaluate(y_true, y_pred, k, class_names=None, positive=None):
    return macro_scores(confusion(y_true, y_pred, k, class_names), positive=positive, warn=False)


def cluster_gate_rows(gate_matrix):
    """Average-linkage Euclidean clustering of gate rows.

    Returns ``(order, tree)``: the dendrogram leaf order and the merge tree in
    scipy linkage format (``n - 1`` rows of ``[a, b, height, size]``). Fewer
    than two rows give the identity order and an empty tree.
    """
    G = np.asarray(gate_matrix, dtype=np.float64)
    if G.ndim != 2:
        raise ShapeError(f"gate matrix must be 2-D, got {G.shape}")
    if len(G) < 2:
        return np.arange(len(G)), np.zeros((0, 4))
    tree = linkage(G, method="average", metric="euclidean")
    return leaves_list(tree), tree


# Report files

def _header(kind):
    return f"# neurotype-{kind} v{REPORT_VERSION}\n"


def write_confusion_csv(cm, path, normalized=False):
    path = Path(path)
    values = cm.normalized() if normalized else cm.counts
    with open(path, "w", newline="") as fh:
        fh.write(_header("confusion-normalized" if normalized else "confusion"))
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["true\\predicted"] + list(cm.class_names))
        for name, row in zip(cm.class_names, values):
            writer.writerow([name] + [repr(float(v)) if normalized else int(v) for v in row])
    return path


def read_confusion_csv(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    names = tuple(rows[0][1:])
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return names, values


def write_metrics(report, path, extra=None):
    d = report.to_dict()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    return path


def read_metrics(path):
    return json.loads(Path(path).read_text())


def write_gate_csv(path, gate_matrix, feature_names, sample_ids, predicted, true, order=None):
    order = np.arange(len(gate_matrix)) if order is None else np.asarray(order)
    with open(path, "w", newline="") as fh:
        fh.write(_header("gates"))
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "predicted", "true"] + list(feature_names))
        for i in order:
            writer.writerow([sample_ids[i], predicted[i], true[i]]
                            + [repr(float(v)) for v in gate_matrix[i]])
    return path


def render_reports(report, out_dir, prefix="", gate_matrix=None, feature_names=None,
                   sample_ids=None, predicted=None, true=None, plots=True, title=None):
    """Write confusion CSVs, a metrics JSON and, given gates, the gate-matrix CSVs.

    With ``plots`` the confusion heat map (and clustered gate heat map) are
    also rendered to PNG. Returns a dict of written paths.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot write reports to {out_dir}: {exc}") from None
    paths = {
        "confusion": write_confusion_csv(report.confusion, out_dir / f"{prefix}confusion.csv"),
        "confusion_normalized": write_confusion_csv(
            report.confusion, out_dir / f"{prefix}confusion_normalized.csv", normalized=True),
        "metrics": write_metrics(report, out_dir / f"{prefix}metrics.json"),
    }
    order = tree = None
    if gate_matrix is not None:
        n = len(gate_matrix)
        sample_ids = np.arange(n).astype(str) if sample_ids is None else sample_ids
        predicted = [""] * n if predicted is None else predicted
        true = [""] * n if true is None else true
        order, tree = cluster_gate_rows(gate_matrix)
        paths["gates"] = write_gate_csv(out_dir / f"{prefix}gate_matrix.csv", gate_matrix,
                                        feature_names, sample_ids, predicted, true)
        paths["gates_clustered"] = write_gate_csv(
            out_dir / f"{prefix}gate_matrix_clustered.csv", gate_matrix, feature_names,
            sample_ids, predicted, true, order)
    if plots:
        from . import plotting

        paths["confusion_png"] = plotting.plot_confusion(
            report.confusion, out_dir / f"{prefix}confusion.png", title=title)
        if gate_matrix is not None:
            paths["gates_png"] = plotting.plot_gate_matrix(
                gate_matrix, tree, order, feature_names, out_dir / f"{prefix}gate_matrix.png")
    return paths
