"""Loading and validation of YAML run configurations.

A configuration file only needs the keys it changes; everything else comes
from DEFAULT_CONFIG. Every check happens before any training starts.

Typical usage:
    from dpp_lib.config import load_config

    config = load_config(Path("configs/lenet300_dppf.yaml"))
    specs = granularity_specs(config)
"""

import copy
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, cast

import yaml

from dpp_lib.config_schema import TrainConfig
from dpp_lib.dpp_mask import Granularity, GranularitySpec
from dpp_lib.gumbel_topk import MaskConfigError, RelaxationSchedule, ScheduleError
from dpp_lib.models import ARCHITECTURES, architecture_dims
from dpp_lib.quant import SUPPORTED_BITS, QuantSpec

logger = logging.getLogger(__name__)

DEFAULT_CONFIG: Dict[str, Any] = {
    "arch": "lenet300-100",
    "layers": [],
    "mu": 0.005,  # weight of the entropy penalty, averaged over layers
    "beta": 1.0,
    "batch_size": 128,
    "n_iter": 30,
    "seed": 0,
    "optimizer": {"name": "adam", "lr": 0.001, "momentum": 0.9},
    "schedule": {"tau_init": 5.0, "tau_end": 0.5},
    "quant": {"bits": 32},
    "metrics": {"enabled": True, "samples": 100},
    "data": {"train_limit": None, "test_limit": None},
}


class ConfigError(Exception):
    """Raised when a configuration is invalid or cannot be read."""

    pass


def _merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown configuration key {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{key}: expected a mapping")
            for sub_key in value:
                if sub_key not in base[key]:
                    raise ConfigError(f"unknown configuration key {key}.{sub_key}")
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


def config_from_dict(raw: Mapping[str, Any]) -> TrainConfig:
    """Merge `raw` over the defaults and validate the result.

    Raises:
        ConfigError: Naming the first offending key
    """
    config = cast(TrainConfig, _merge(DEFAULT_CONFIG, raw))
    validate_config(config)
    return config


def load_config(path: Path) -> TrainConfig:
    """Read a YAML configuration file.

    Raises:
        ConfigError: If the file is unreadable, not YAML, or invalid
    """
    try:
        with open(path, "r") as f:
            raw = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path} is not valid YAML: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


_INTEGER_KEYS = ("batch_size", "n_iter", "seed", "metrics.samples", "quant.bits")
_NUMBER_KEYS = (
    "mu",
    "beta",
    "optimizer.lr",
    "optimizer.momentum",
    "schedule.tau_init",
    "schedule.tau_end",
)
_OPTIONAL_INTEGER_KEYS = ("data.train_limit", "data.test_limit")


def _is_integer(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _lookup(config: Mapping[str, Any], dotted: str) -> Any:
    value: Any = config
    for part in dotted.split("."):
        value = value[part]
    return value


def _check_types(config: Mapping[str, Any]) -> None:
    for key in _INTEGER_KEYS:
        value = _lookup(config, key)
        _require(_is_integer(value), f"{key}: expected an integer, got {value!r}")
    for key in _NUMBER_KEYS:
        value = _lookup(config, key)
        _require(_is_number(value), f"{key}: expected a number, got {value!r}")
    for key in _OPTIONAL_INTEGER_KEYS:
        value = _lookup(config, key)
        _require(
            value is None or (_is_integer(value) and value >= 1),
            f"{key}: expected a positive integer or null, got {value!r}",
        )
    _require(isinstance(config["arch"], str), "arch: expected a string")
    _require(
        isinstance(config["optimizer"]["name"], str),
        "optimizer.name: expected a string",
    )
    _require(
        isinstance(config["metrics"]["enabled"], bool),
        "metrics.enabled: expected true or false",
    )
    _require(isinstance(config["layers"], list), "layers: expected a list")
    for index, layer in enumerate(config["layers"]):
        _require(
            isinstance(layer, Mapping),
            f"layers[{index}]: expected a mapping with granularity and k",
        )


def validate_config(config: TrainConfig) -> None:
    """Check ranges and the cross-layer constraints of the granularities."""
    _check_types(config)
    arch = config["arch"]
    _require(arch in ARCHITECTURES, f"arch: unknown architecture {arch!r}")
    dims = architecture_dims(arch)
    layers = config["layers"]
    _require(
        len(layers) == len(dims),
        f"layers: {arch} has {len(dims)} prunable layers, got {len(layers)}",
    )
    _require(0.0 <= config["beta"] <= 1.0, f"beta: {config['beta']} not in [0, 1]")
    _require(config["mu"] >= 0.0, f"mu: {config['mu']} is negative")
    _require(config["seed"] >= 0, "seed: must be non-negative")
    _require(config["batch_size"] >= 1, "batch_size: must be at least 1")
    _require(config["n_iter"] >= 1, "n_iter: must be at least 1")
    _require(config["metrics"]["samples"] >= 1, "metrics.samples: must be >= 1")
    _require(
        config["optimizer"]["name"] in ("adam", "sgd"),
        f"optimizer.name: unknown optimizer {config['optimizer']['name']!r}",
    )
    _require(config["optimizer"]["lr"] > 0.0, "optimizer.lr: must be positive")
    _require(
        config["quant"]["bits"] in SUPPORTED_BITS,
        f"quant.bits: {config['quant']['bits']} not in {SUPPORTED_BITS}",
    )
    try:
        relaxation_schedule(config)
    except ScheduleError as e:
        raise ConfigError(f"schedule: {e}") from e

    specs = granularity_specs(config)
    geometries = []
    for index, (layer_dims, spec) in enumerate(zip(dims, specs)):
        try:
            geometries.append(spec.geometry(layer_dims))
        except MaskConfigError as e:
            raise ConfigError(f"layers[{index}].k: {e}") from e

    for index, geometry in enumerate(geometries):
        if geometry.level is not Granularity.COARSE:
            continue
        _require(
            index + 1 < len(geometries),
            f"layers[{index}]: the output layer cannot use coarse granularity",
        )
        successor = geometries[index + 1]
        _require(
            not successor.prunes_input_axis or successor.k == successor.c,
            f"layers[{index + 1}].k: a layer fed by a coarse layer cannot prune "
            f"its inputs with K={successor.k} < C={successor.c}",
        )
    logger.debug("configuration for %s validated", arch)


def granularity_specs(config: TrainConfig) -> List[GranularitySpec]:
    specs = []
    for index, layer in enumerate(config["layers"]):
        try:
            level = Granularity(layer["granularity"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"layers[{index}].granularity: {e}") from e
        if "k" not in layer or not _is_integer(layer["k"]):
            raise ConfigError(f"layers[{index}].k: expected an integer")
        specs.append(GranularitySpec(level, layer["k"]))
    return specs


def quant_spec(config: TrainConfig) -> QuantSpec:
    return QuantSpec(config["quant"]["bits"])


def relaxation_schedule(config: TrainConfig) -> RelaxationSchedule:
    return RelaxationSchedule(
        n_iter=config["n_iter"],
        tau_init=config["schedule"]["tau_init"],
        tau_end=config["schedule"]["tau_end"],
    )
