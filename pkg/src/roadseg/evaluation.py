"""Confusion matrices, per-class/total pixel accuracy, and report rendering.

Per-class accuracy is recall: the diagonal of the row-normalized confusion
matrix (rows are ground truth, columns are predictions). Total accuracy is
pixel accuracy, trace over total; a class-mean alternative is available as
`MetricsReport.class_mean_accuracy`. Reports are emitted as CSV and JSON plus
two PNGs: a decodable raw cell rendering of the normalized matrix and an
annotated matplotlib figure.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .errors import ConfigError, EmptyEvaluationError, ShapeError
from .schema import LabelSchema


@dataclass
class ConfusionMatrix:
    """C x C count matrix; counts[t, p] = pixels of true class t predicted p."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ShapeError("confusion matrix counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate_confusion(pred_masks, true_masks, num_classes: int) -> ConfusionMatrix:
    """Count (true, predicted) pairs over one mask pair or a sequence of pairs."""
    if isinstance(pred_masks, np.ndarray) and isinstance(true_masks, np.ndarray):
        pred_masks, true_masks = [pred_masks], [true_masks]
    counts = np.zeros(num_classes * num_classes, dtype=np.int64)
    for pred, true in zip(pred_masks, true_masks, strict=True):
        pred = np.asarray(pred)
        true = np.asarray(true)
        if pred.shape != true.shape:
            raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {true.shape}")
        if pred.max(initial=0) >= num_classes or true.max(initial=0) >= num_classes:
            raise ShapeError(f"mask ids exceed num_classes={num_classes}")
        counts += np.bincount(
            true.ravel().astype(np.int64) * num_classes + pred.ravel().astype(np.int64),
            minlength=num_classes * num_classes,
        )
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def row_normalize(matrix: ConfusionMatrix | np.ndarray) -> np.ndarray:
    """Divide each row by its sum; zero rows stay zero."""
    counts = matrix.counts if isinstance(matrix, ConfusionMatrix) else np.asarray(matrix)
    counts = counts.astype(np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)


@dataclass
class MetricsReport:
    """Derived accuracies; per-class entries are NaN for classes absent from
    the ground truth (reported as absent, not 0 or 1)."""

    per_class_accuracy: np.ndarray
    total_accuracy: float
    matrix: ConfusionMatrix
    normalized_matrix: np.ndarray
    config_name: str = ""

    @property
    def class_mean_accuracy(self) -> float:
        """Alternative total: unweighted mean over classes present in the GT."""
        return float(np.nanmean(self.per_class_accuracy))


def derive_metrics(matrix: ConfusionMatrix, config_name: str = "") -> MetricsReport:
    if matrix.total == 0:
        raise EmptyEvaluationError("confusion matrix has no counts")
    row_sums = matrix.counts.sum(axis=1)
    diag = np.diag(matrix.counts).astype(np.float64)
    per_class = np.divide(
        diag, row_sums, out=np.full(matrix.num_classes, np.nan), where=row_sums > 0
    )
    return MetricsReport(
        per_class_accuracy=per_class,
        total_accuracy=float(np.trace(matrix.counts) / matrix.total),
        matrix=matrix,
        normalized_matrix=row_normalize(matrix),
        config_name=config_name,
    )


def report_to_dict(report: MetricsReport, schema: LabelSchema | None = None) -> dict:
    names = schema.names if schema is not None else [str(i) for i in range(report.matrix.num_classes)]
    per_class = []
    for cid, name in enumerate(names):
        acc = report.per_class_accuracy[cid]
        per_class.append(
            {
                "id": cid,
                "name": name,
                "accuracy": None if math.isnan(acc) else float(acc),
                "pixels": int(report.matrix.counts[cid].sum()),
            }
        )
    return {
        "config_name": report.config_name,
        "total_accuracy": report.total_accuracy,
        "class_mean_accuracy": report.class_mean_accuracy,
        "per_class": per_class,
        "counts": report.matrix.counts.tolist(),
        "normalized": report.normalized_matrix.tolist(),
    }


def report_from_dict(data: dict) -> MetricsReport:
    matrix = ConfusionMatrix(np.array(data["counts"], dtype=np.int64))
    per_class = np.array(
        [np.nan if c["accuracy"] is None else c["accuracy"] for c in data["per_class"]]
    )
    return MetricsReport(
        per_class_accuracy=per_class,
        total_accuracy=float(data["total_accuracy"]),
        matrix=matrix,
        normalized_matrix=np.array(data["normalized"], dtype=np.float64),
        config_name=data.get("config_name", ""),
    )


def write_report_json(report: MetricsReport, schema: LabelSchema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report_to_dict(report, schema), indent=2) + "\n", encoding="utf-8")


def read_report_json(path: str | Path) -> MetricsReport:
    return report_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_report_csv(
    report: MetricsReport, schema: LabelSchema, path: str | Path, include_class_mean: bool = False
) -> None:
    """One row per class plus a Total row; absent classes have empty accuracy."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "name", "accuracy", "pixels"])
        for c in schema.classes:
            acc = report.per_class_accuracy[c.id]
            writer.writerow(
                [
                    c.id,
                    c.name,
                    "" if math.isnan(acc) else repr(float(acc)),
                    int(report.matrix.counts[c.id].sum()),
                ]
            )
        writer.writerow(["", "Total", repr(report.total_accuracy), report.matrix.total])
        if include_class_mean:
            writer.writerow(["", "Class-mean", repr(report.class_mean_accuracy), report.matrix.total])


def render_matrix_cells(normalized: np.ndarray, path: str | Path, cell_size: int = 24) -> None:
    """Raw grayscale rendering: each cell is a uniform block of round(v * 255).

    Decodable: sampling any pixel of cell (i, j) recovers normalized[i, j]
    within 0.5/255.
    """
    gray = np.clip(np.rint(np.asarray(normalized) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(np.kron(gray, np.ones((cell_size, cell_size), dtype=np.uint8))).save(path)


def render_matrix_figure(report: MetricsReport, schema: LabelSchema, path: str | Path) -> None:
    """Annotated row-normalized confusion matrix figure."""
    names = schema.names
    n = len(names)
    fig, ax = plt.subplots(figsize=(0.6 * n + 2.5, 0.6 * n + 2))
    im = ax.imshow(report.normalized_matrix, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(n), names, rotation=90)
    ax.set_yticks(range(n), names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("Ground truth")
    title = "Confusion matrix" + (f" ({report.config_name})" if report.config_name else "")
    ax.set_title(title)
    for i in range(n):
        for j in range(n):
            v = report.normalized_matrix[i, j]
            if v >= 0.005:
                ax.text(
                    j, i, f"{v:.2f}", ha="center", va="center",
                    fontsize=7, color="white" if v > 0.5 else "black",
                )
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


REPORT_FORMATS = ("csv", "json", "png", "figure")


def render_report(
    report: MetricsReport,
    schema: LabelSchema,
    out_dir: str | Path,
    formats: tuple[str, ...] = REPORT_FORMATS,
    include_class_mean: bool = False,
) -> dict[str, Path]:
    """Write the requested report artifacts into out_dir; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    for fmt in formats:
        if fmt == "csv":
            written["csv"] = out_dir / "metrics.csv"
            write_report_csv(report, schema, written["csv"], include_class_mean=include_class_mean)
        elif fmt == "json":
            written["json"] = out_dir / "metrics.json"
            write_report_json(report, schema, written["json"])
        elif fmt == "png":
            written["png"] = out_dir / "confusion_matrix.png"
            render_matrix_cells(report.normalized_matrix, written["png"])
        elif fmt == "figure":
            written["figure"] = out_dir / "confusion_matrix_figure.png"
            render_matrix_figure(report, schema, written["figure"])
        else:
            raise ConfigError(f"unknown report format {fmt!r}; choose from {REPORT_FORMATS}")
    return written
