"""Per-epoch training metrics: collection, CSV storage and reporting.

Each epoch contributes one row with the loss, accuracies, temperature and,
per prunable layer, the normalized Average Pruning Entropy (`H_norm_i`) and
Pruning Diversity (`I_norm_i`, empty for single-distribution layers).

Typical usage:
    from dpp_lib.metrics import MetricsStorage, generate_metrics_report

    storage = MetricsStorage(Path("run/metrics.csv"))
    metrics = storage.load_metrics()
    print(generate_metrics_report(metrics))
"""

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from dpp_lib.fileio import atomic_write_text

logger = logging.getLogger(__name__)

BASE_COLUMNS = ["epoch", "train_loss", "train_acc", "test_acc", "tau"]


class MetricsFormatError(Exception):
    """Raised when a metrics CSV cannot be parsed."""

    pass


@dataclass
class EpochMetrics:
    """Metrics for a single epoch."""

    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    tau: float
    h_norm: List[float] = field(default_factory=list)
    i_norm: List[Optional[float]] = field(default_factory=list)


@dataclass
class TrainingMetrics:
    """Aggregate metrics of one training run."""

    epochs: List[EpochMetrics] = field(default_factory=list)

    @property
    def layer_count(self) -> int:
        return len(self.epochs[0].h_norm) if self.epochs else 0

    @property
    def final(self) -> Optional[EpochMetrics]:
        return self.epochs[-1] if self.epochs else None

    def add_epoch(self, result: EpochMetrics) -> None:
        """Add an epoch row to the metrics collection."""
        self.epochs.append(result)

    def confidence_trend(self) -> List[Dict[str, Optional[bool]]]:
        """Per layer: did H_norm fall and I_norm rise from first to last epoch?"""
        if len(self.epochs) < 2:
            return []
        first, last = self.epochs[0], self.epochs[-1]
        trends: List[Dict[str, Optional[bool]]] = []
        for layer in range(self.layer_count):
            start_i, end_i = first.i_norm[layer], last.i_norm[layer]
            diversity = None
            if start_i is not None and end_i is not None:
                diversity = end_i > start_i
            trends.append(
                {
                    "confidence_increased": last.h_norm[layer] < first.h_norm[layer],
                    "diversity_increased": diversity,
                }
            )
        return trends

    def get_summary(self) -> Dict[str, Any]:
        """Get a summary of the metrics."""
        if not self.epochs:
            return {
                "epochs": 0,
                "final_test_acc": 0.0,
                "best_test_acc": 0.0,
                "final_train_loss": 0.0,
                "layers": [],
            }
        final = self.epochs[-1]
        best = max(self.epochs, key=lambda row: row.test_acc)
        trends = self.confidence_trend()
        layers = []
        for layer in range(self.layer_count):
            entry: Dict[str, Any] = {
                "layer": layer + 1,
                "h_norm": final.h_norm[layer],
                "i_norm": final.i_norm[layer],
            }
            if trends:
                entry.update(trends[layer])
            layers.append(entry)
        return {
            "epochs": len(self.epochs),
            "final_test_acc": final.test_acc,
            "best_test_acc": best.test_acc,
            "best_epoch": best.epoch,
            "final_train_loss": final.train_loss,
            "layers": layers,
        }


def metric_columns(layer_count: int) -> List[str]:
    columns = list(BASE_COLUMNS)
    for layer in range(1, layer_count + 1):
        columns.extend([f"H_norm_{layer}", f"I_norm_{layer}"])
    return columns


def _format(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def _parse(value: str, column: str) -> Optional[float]:
    if value == "":
        return None
    try:
        return float(value)
    except ValueError as e:
        raise MetricsFormatError(f"column {column}: {value!r} is not a number") from e


def _epoch_from_values(
    values: Dict[str, Optional[float]], layer_count: int
) -> EpochMetrics:
    def required(column: str) -> float:
        value = values[column]
        if value is None:
            raise MetricsFormatError(f"column {column} is empty")
        return value

    layers = range(1, layer_count + 1)
    return EpochMetrics(
        epoch=int(required("epoch")),
        train_loss=required("train_loss"),
        train_acc=required("train_acc"),
        test_acc=required("test_acc"),
        tau=required("tau"),
        h_norm=[required(f"H_norm_{i}") for i in layers],
        i_norm=[values[f"I_norm_{i}"] for i in layers],
    )


class MetricsStorage:
    """Class for storing and loading metrics as CSV."""

    def __init__(self, metrics_file: Path) -> None:
        """Initialize the metrics storage.

        Args:
            metrics_file: Path to the metrics CSV, rewritten after every epoch
        """
        self.metrics_file = Path(metrics_file)

    def save_metrics(self, metrics: TrainingMetrics) -> None:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(metric_columns(metrics.layer_count))
        for row in metrics.epochs:
            cells = [
                str(row.epoch),
                _format(row.train_loss),
                _format(row.train_acc),
                _format(row.test_acc),
                _format(row.tau),
            ]
            for h_norm, i_norm in zip(row.h_norm, row.i_norm):
                cells.extend([_format(h_norm), _format(i_norm)])
            writer.writerow(cells)
        atomic_write_text(self.metrics_file, buffer.getvalue())

    def load_metrics(self) -> TrainingMetrics:
        """Load metrics from storage.

        Raises:
            FileNotFoundError: If the metrics file does not exist
            MetricsFormatError: If the header or a cell is malformed
        """
        with open(self.metrics_file, "r", newline="") as f:
            reader = csv.DictReader(f)
            header = reader.fieldnames or []
            if header[: len(BASE_COLUMNS)] != BASE_COLUMNS:
                raise MetricsFormatError(
                    f"{self.metrics_file}: expected columns to start with "
                    f"{BASE_COLUMNS}"
                )
            layer_count = (len(header) - len(BASE_COLUMNS)) // 2
            if header != metric_columns(layer_count):
                raise MetricsFormatError(f"{self.metrics_file}: bad layer columns")
            metrics = TrainingMetrics()
            for record in reader:
                values = {c: _parse(record[c] or "", c) for c in header}
                metrics.add_epoch(_epoch_from_values(values, layer_count))
        return metrics


def generate_metrics_report(metrics: TrainingMetrics) -> str:
    """Generate a human-readable report from metrics.

    Args:
        metrics: TrainingMetrics object to generate report from

    Returns:
        Formatted string report
    """
    summary = metrics.get_summary()
    report = [
        "=================================================",
        "             DPP Training Metrics Report          ",
        "=================================================",
        f"Epochs: {summary['epochs']}",
        f"Final Test Accuracy: {summary['final_test_acc'] * 100:.2f}%",
        f"Best Test Accuracy: {summary['best_test_acc'] * 100:.2f}%",
        f"Final Train Loss: {summary['final_train_loss']:.4f}",
        "",
        "Layer Metrics (final epoch, normalized):",
        "-------------------------------------------------",
    ]
    for layer in summary["layers"]:
        i_norm = layer["i_norm"]
        i_text = "n/a" if i_norm is None else f"{i_norm:.4f}"
        report.append(f"  layer {layer['layer']}:")
        report.append(f"    H_norm: {layer['h_norm']:.4f}")
        report.append(f"    I_norm: {i_text}")
        if "confidence_increased" in layer:
            report.append(f"    Confidence increased: {layer['confidence_increased']}")
            diversity = layer["diversity_increased"]
            report.append(
                f"    Diversity increased: {'n/a' if diversity is None else diversity}"
            )
        report.append("")
    report.append("=================================================")
    return "\n".join(report)
