"""dppkit command-line interface.

Subcommands:
    train    Train a pruned network from a YAML configuration
    eval     Measure test accuracy of a state file or a .dpps model
    export   Freeze one mask per layer and write a .dpps model
    inspect  Print the compression report of a .dpps model
    metrics  Summarize a metrics CSV written during training

Exit codes:
    0: Success
    1: Runtime failure (invalid configuration, malformed file, divergence)
    2: Usage error (bad flags, unreadable input paths)
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from dpp_lib.config import ConfigError, config_from_dict, load_config
from dpp_lib.config_schema import TrainConfig
from dpp_lib.gumbel_topk import MaskConfigError, ScheduleError
from dpp_lib.metrics import (
    MetricsFormatError,
    MetricsStorage,
    generate_metrics_report,
)
from dpp_lib.mnist import Dataset, IdxFormatError, load_mnist_split
from dpp_lib.quant import FULL_PRECISION_BITS, QuantConfigError
from dpp_lib.sparse_format import (
    CompressionReport,
    SparseFormatError,
    compression_report,
    read_model,
    write_model,
)
from dpp_lib.tensor import NonFiniteError, ShapeError
from dpp_lib.trainer import (
    STREAM_EVAL,
    EmptyDatasetError,
    StateFormatError,
    TrainingDivergedError,
    accuracy,
    evaluate,
    load_state,
    save_state,
    stream_rng,
    train,
)

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "DPP_DATA_DIR"
DEFAULT_DATA_DIR = "data"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

RUNTIME_ERRORS = (
    ConfigError,
    EmptyDatasetError,
    IdxFormatError,
    MaskConfigError,
    MetricsFormatError,
    NonFiniteError,
    QuantConfigError,
    ScheduleError,
    ShapeError,
    SparseFormatError,
    StateFormatError,
    TrainingDivergedError,
)


class UsageError(Exception):
    """Raised for inputs that cannot be read; maps to exit status 2."""

    pass


def _readable_file(value: str) -> Path:
    path = Path(value)
    if not path.is_file() or not os.access(path, os.R_OK):
        raise UsageError(f"cannot read {value}")
    return path


def _data_dir(value: Optional[str]) -> Path:
    path = Path(value or os.environ.get(DATA_DIR_ENV) or DEFAULT_DATA_DIR)
    if not path.is_dir():
        raise UsageError(f"data directory {path} does not exist")
    return path


def _load_split(data_dir: Path, split: str, limit: Optional[int]) -> Dataset:
    try:
        data = load_mnist_split(data_dir, split)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from e
    return data if limit is None else data.subset(limit)


def _load_data(config: TrainConfig, data_dir: Path) -> Dict[str, Dataset]:
    return {
        "train": _load_split(data_dir, "train", config["data"]["train_limit"]),
        "test": _load_split(data_dir, "test", config["data"]["test_limit"]),
    }


def _print_json(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2))


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(_readable_file(args.config))
    if args.seed is not None:
        config = config_from_dict({**config, "seed": args.seed})
    datasets = _load_data(config, _data_dir(args.data_dir))
    out_dir = Path(args.out)
    state = train(
        config,
        datasets["train"],
        datasets["test"],
        metrics_path=out_dir / "metrics.csv",
    )
    save_state(state, out_dir / "state.npz")
    test_accuracy = evaluate(state.network, datasets["test"], config["seed"])
    file_bytes = write_model(state.network, out_dir / "model.dpps")
    report = compression_report(state.network)
    _print_json(
        {
            "out": str(out_dir),
            "test_accuracy": test_accuracy,
            "remaining_percent": report.remaining_percent,
            "compression_rate": report.rate,
            "file_bytes": file_bytes,
        }
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model_path = _readable_file(args.model)
    if model_path.suffix == ".dpps":
        network = read_model(model_path).network
        test_data = _load_split(_data_dir(args.data_dir), "test", None)
        result = accuracy(network, test_data, network.frozen_masks())
    else:
        state = load_state(model_path)
        limit = state.config["data"]["test_limit"]
        test_data = _load_split(_data_dir(args.data_dir), "test", limit)
        result = evaluate(state.network, test_data, args.seed)
    _print_json(
        {"model": str(model_path), "items": len(test_data), "accuracy": result}
    )
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    state = load_state(_readable_file(args.state))
    state.network.freeze_masks(stream_rng(args.seed, STREAM_EVAL))
    file_bytes = write_model(state.network, Path(args.out))
    report = compression_report(state.network)
    _print_json({**report.as_dict(), "file_bytes": file_bytes, "out": args.out})
    return EXIT_OK


REPORT_COLUMNS = [
    "scope",
    "kind",
    "granularity",
    "k",
    "c",
    "params",
    "active",
    "bits",
    "stored_values",
    "compression_rate",
    "remaining_percent",
]


def report_rows(report: CompressionReport) -> List[Dict[str, Any]]:
    """One row per layer followed by the network total."""
    rows: List[Dict[str, Any]] = []
    for layer in report.layers:
        stored_bits = layer.stored_values * report.bits
        rows.append(
            {
                "scope": f"layer{layer.index + 1}",
                "kind": layer.kind,
                "granularity": layer.granularity,
                "k": layer.k,
                "c": layer.c,
                "params": layer.dense_params,
                "active": layer.active_params,
                "bits": report.bits,
                "stored_values": layer.stored_values,
                "compression_rate": layer.dense_params * FULL_PRECISION_BITS
                / stored_bits,
                "remaining_percent": 100.0
                * layer.active_params
                / layer.dense_params,
            }
        )
    rows.append(
        {
            "scope": "total",
            "kind": report.arch,
            "granularity": "",
            "k": "",
            "c": "",
            "params": report.total_params,
            "active": report.active_params,
            "bits": report.bits,
            "stored_values": report.stored_values,
            "compression_rate": report.rate,
            "remaining_percent": report.remaining_percent,
        }
    )
    return rows


def format_report(report: CompressionReport, fmt: str) -> str:
    rows = report_rows(report)
    if fmt == "jsonl":
        return "\n".join(json.dumps(row) for row in rows)
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue().rstrip("\n")


def cmd_inspect(args: argparse.Namespace) -> int:
    decoded = read_model(_readable_file(args.model))
    print(format_report(decoded.report, args.format))
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    metrics = MetricsStorage(_readable_file(args.metrics_csv)).load_metrics()
    print(generate_metrics_report(metrics))
    if args.check_trend:
        failing = [
            index + 1
            for index, trend in enumerate(metrics.confidence_trend())
            if trend["confidence_increased"] is False
            or trend["diversity_increased"] is False
        ]
        if failing:
            print(f"Error: trend check failed for layers {failing}", file=sys.stderr)
            return EXIT_FAILURE
    return EXIT_OK


def create_cli_parser() -> argparse.ArgumentParser:
    """Create the command-line argument parser."""
    parser = argparse.ArgumentParser(
        prog="dppkit",
        description="Train, evaluate and export networks with learned k-out-of-n masks",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="Enable debug logging"
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    train_parser = subparsers.add_parser("train", help="Train from a configuration")
    train_parser.add_argument("--config", required=True, help="YAML configuration")
    train_parser.add_argument("--seed", type=int, help="Override the config seed")
    train_parser.add_argument(
        "--data-dir", help=f"MNIST IDX directory (default: ${DATA_DIR_ENV})"
    )
    train_parser.add_argument("--out", required=True, help="Output directory")

    eval_parser = subparsers.add_parser("eval", help="Measure test accuracy")
    eval_parser.add_argument("model", help="state.npz or model.dpps")
    eval_parser.add_argument("--seed", type=int, default=0, help="Mask draw seed")
    eval_parser.add_argument("--data-dir", help="MNIST IDX directory")

    export_parser = subparsers.add_parser("export", help="Write a .dpps model")
    export_parser.add_argument("state", help="state.npz written by train")
    export_parser.add_argument("--seed", type=int, default=0, help="Mask draw seed")
    export_parser.add_argument("--out", required=True, help="Output .dpps file")

    inspect_parser = subparsers.add_parser("inspect", help="Print compression report")
    inspect_parser.add_argument("model", help="model.dpps")
    inspect_parser.add_argument(
        "--format", choices=["csv", "jsonl"], default="csv", help="Output format"
    )

    metrics_parser = subparsers.add_parser("metrics", help="Summarize metrics.csv")
    metrics_parser.add_argument("metrics_csv", help="metrics.csv written by train")
    metrics_parser.add_argument(
        "--check-trend",
        action="store_true",
        help="Fail unless every layer grew more confident and more diverse",
    )
    return parser


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export,
    "inspect": cmd_inspect,
    "metrics": cmd_metrics,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the dppkit CLI."""
    parser = create_cli_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
