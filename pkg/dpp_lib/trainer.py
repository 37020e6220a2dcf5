"""The joint mask-and-weight training loop, evaluation and state files.

Each run draws from independent random streams derived from the master
seed, so that changing the data order never perturbs the mask draws:

    init      weight initialization
    shuffle   mini-batch order, reseeded every epoch
    gumbel    noise of the training-time mask realizations
    metrics   Monte Carlo marginals at the end of every epoch
    eval      inference-time mask draws

Typical usage:
    from dpp_lib.trainer import evaluate, train

    state = train(config, train_data, test_data, metrics_path=Path("run/metrics.csv"))
    accuracy = evaluate(state.network, test_data, seed=1)
"""

import io
import json
import logging
import math
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.npyio import NpzFile

from dpp_lib.config import (
    config_from_dict,
    granularity_specs,
    quant_spec,
    relaxation_schedule,
)
from dpp_lib.config_schema import TrainConfig
from dpp_lib.fileio import atomic_write_bytes
from dpp_lib.gumbel_topk import tau_at
from dpp_lib.metrics import EpochMetrics, MetricsStorage, TrainingMetrics
from dpp_lib.mnist import Dataset
from dpp_lib.models import Network, build_network
from dpp_lib.optim import OptimizerState, init_optimizer, optimizer_step, zero_grad
from dpp_lib.sparsity_metrics import LayerMetrics, estimate_marginals, layer_metrics
from dpp_lib.tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    add,
    scale,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_GUMBEL = 2
STREAM_METRICS = 3
STREAM_EVAL = 4


class TrainingDivergedError(Exception):
    """Raised when the loss becomes NaN or infinite."""

    def __init__(self, epoch: int, detail: str = "non-finite loss") -> None:
        super().__init__(f"training diverged in epoch {epoch}: {detail}")
        self.epoch = epoch


class EmptyDatasetError(Exception):
    """Raised when accuracy is requested on zero items."""

    pass


class StateFormatError(Exception):
    """Raised when a state file is missing arrays or holds wrong shapes."""

    pass


def stream_rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, *extra])


@dataclass
class TrainedState:
    config: TrainConfig
    network: Network
    metrics: TrainingMetrics = field(default_factory=TrainingMetrics)


def build_from_config(config: TrainConfig) -> Network:
    return build_network(
        config["arch"],
        granularity_specs(config),
        quant_spec(config),
        stream_rng(config["seed"], STREAM_INIT),
        beta=config["beta"],
    )


def _correct(logits: np.ndarray, labels: np.ndarray) -> int:
    return int((logits.argmax(axis=1) == labels).sum())


def train_step(
    network: Network,
    images: np.ndarray,
    targets: np.ndarray,
    tau: float,
    mu: float,
    optimizer: OptimizerState,
    rng: np.random.Generator,
) -> Tuple[float, np.ndarray]:
    """One update of weights, biases and logits on a mini-batch.

    Returns:
        (loss, logits) of the batch under the sampled masks
    """
    params = network.parameters()
    zero_grad(params)
    with Tape() as tape:
        realizations = network.realize_masks(rng, tau)
        inputs = Tensor(images.reshape((-1,) + network.input_shape))
        logits = network.forward(inputs, [r.hard for r in realizations])
        loss = softmax_cross_entropy(logits, targets)
        if mu > 0.0:
            loss = add(loss, scale(network.entropy_loss(), mu))
    tape.backward(loss)
    optimizer_step(params, [p.grad for p in params], optimizer)
    network.clip_latent()
    return float(loss.data), logits.data


def accuracy(network: Network, data: Dataset, masks: Sequence[np.ndarray]) -> float:
    """Fraction of `data` classified correctly under fixed hard masks.

    Raises:
        EmptyDatasetError: If `data` holds no items
    """
    if len(data) == 0:
        raise EmptyDatasetError("cannot compute accuracy on an empty dataset")
    return _correct(network.predict(data.images, masks), data.labels) / len(data)


def evaluate(network: Network, data: Dataset, seed: int) -> float:
    """Draw and freeze one mask per layer, then measure accuracy."""
    masks = network.freeze_masks(stream_rng(seed, STREAM_EVAL))
    return accuracy(network, data, masks)


def epoch_layer_metrics(
    network: Network, samples: int, rng: np.random.Generator
) -> List[LayerMetrics]:
    return [
        layer_metrics(estimate_marginals(layer.logits, network.beta, samples, rng))
        for layer in network.layers
    ]


def train(
    config: TrainConfig,
    train_data: Dataset,
    test_data: Dataset,
    metrics_path: Optional[Path] = None,
) -> TrainedState:
    """Train masks and weights jointly for `n_iter` epochs.

    The metrics CSV, when requested, is rewritten after every epoch.

    Raises:
        TrainingDivergedError: If the loss stops being finite
        EmptyDatasetError: If either dataset is empty
    """
    if len(train_data) == 0 or len(test_data) == 0:
        raise EmptyDatasetError("training needs non-empty train and test data")
    seed = config["seed"]
    network = build_from_config(config)
    schedule = relaxation_schedule(config)
    params = network.parameters()
    optimizer = init_optimizer(
        config["optimizer"]["name"],
        params,
        lr=config["optimizer"]["lr"],
        momentum=config["optimizer"]["momentum"],
    )
    gumbel_rng = stream_rng(seed, STREAM_GUMBEL)
    targets = train_data.one_hot()
    batch_size = config["batch_size"]
    mu = config["mu"]
    metrics = TrainingMetrics()
    storage = MetricsStorage(metrics_path) if metrics_path is not None else None

    for epoch in range(1, config["n_iter"] + 1):
        tau = tau_at(schedule, epoch)
        order = stream_rng(seed, STREAM_SHUFFLE, epoch).permutation(len(train_data))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            try:
                loss, logits = train_step(
                    network,
                    train_data.images[batch],
                    targets[batch],
                    tau,
                    mu,
                    optimizer,
                    gumbel_rng,
                )
            except NonFiniteError as e:
                raise TrainingDivergedError(epoch, str(e)) from e
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            loss_sum += loss * len(batch)
            correct += _correct(logits, train_data.labels[batch])

        test_masks = network.sample_masks(stream_rng(seed, STREAM_EVAL, epoch))
        row = EpochMetrics(
            epoch=epoch,
            train_loss=loss_sum / len(train_data),
            train_acc=correct / len(train_data),
            test_acc=accuracy(network, test_data, test_masks),
            tau=tau,
        )
        if config["metrics"]["enabled"]:
            per_layer = epoch_layer_metrics(
                network,
                config["metrics"]["samples"],
                stream_rng(seed, STREAM_METRICS, epoch),
            )
            row.h_norm = [m.h_norm for m in per_layer]
            row.i_norm = [m.i_norm for m in per_layer]
        metrics.add_epoch(row)
        logger.info(
            "epoch %d/%d: loss %.4f, train %.4f, test %.4f, tau %.3f, H_norm %s",
            epoch,
            config["n_iter"],
            row.train_loss,
            row.train_acc,
            row.test_acc,
            tau,
            " ".join(f"{h:.3f}" for h in row.h_norm),
        )
        if storage is not None:
            storage.save_metrics(metrics)

    return TrainedState(config=config, network=network, metrics=metrics)


def save_state(state: TrainedState, path: Path) -> None:
    """Store weights, biases, logits and the configuration as .npz."""
    arrays = {"config": np.array(json.dumps(state.config, sort_keys=True))}
    for index, layer in enumerate(state.network.layers):
        arrays[f"weight_{index}"] = layer.weight.data
        arrays[f"bias_{index}"] = layer.bias.data
        arrays[f"logits_{index}"] = layer.logits.logits.data
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    atomic_write_bytes(path, buffer.getvalue())
    logger.info("saved training state to %s", path)


_ARCHIVE_ERRORS = (ValueError, EOFError, zipfile.BadZipFile, zlib.error)


def _read_array(archive: NpzFile, key: str, path: Path) -> np.ndarray:
    if key not in archive.files:
        raise StateFormatError(f"{path}: missing array {key}")
    try:
        return np.asarray(archive[key])
    except _ARCHIVE_ERRORS as e:
        raise StateFormatError(f"{path}: cannot read array {key}: {e}") from e


def _stored_config(archive: NpzFile, path: Path) -> TrainConfig:
    if "config" not in archive.files:
        raise StateFormatError(f"{path}: no configuration stored")
    try:
        raw = json.loads(str(_read_array(archive, "config", path)))
    except json.JSONDecodeError as e:
        raise StateFormatError(f"{path}: stored configuration is not JSON") from e
    if not isinstance(raw, dict):
        raise StateFormatError(f"{path}: stored configuration is not a mapping")
    return config_from_dict(raw)


def load_state(path: Path) -> TrainedState:
    """Rebuild the network stored by `save_state`.

    Raises:
        StateFormatError: If the file is not a state archive or does not
            match its configuration
        ConfigError: If the stored configuration is invalid
    """
    try:
        archive = np.load(path, allow_pickle=False)
    except _ARCHIVE_ERRORS as e:
        raise StateFormatError(f"{path}: not a saved training state ({e})") from e
    if not isinstance(archive, NpzFile):
        raise StateFormatError(f"{path}: holds a single array, not a training state")
    with archive:
        config = _stored_config(archive, path)
        network = build_from_config(config)
        for index, layer in enumerate(network.layers):
            for tensor, key in (
                (layer.weight, f"weight_{index}"),
                (layer.bias, f"bias_{index}"),
                (layer.logits.logits, f"logits_{index}"),
            ):
                stored = _read_array(archive, key, path)
                if stored.shape != tensor.shape:
                    raise StateFormatError(
                        f"{path}: {key} has shape {stored.shape}, "
                        f"expected {tensor.shape}"
                    )
                tensor.data = stored.astype(tensor.dtype)
    return TrainedState(config=config, network=network)
