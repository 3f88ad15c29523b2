"""Experiment configuration schema, overrides and seed derivation."""
import hashlib
import json
import zlib
from typing import Any, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "apply_overrides", "derive_seed",
           "PRESETS", "ValidationError"]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetConfig(_Strict):
    source: Literal["synthetic", "idx"] = "synthetic"
    classes: int = Field(5, ge=2)
    train: int = Field(1024, ge=1)
    test: int = Field(256, ge=1)
    image_shape: List[int] = [1, 16, 16]
    geometry: Literal["blobs", "stripes"] = "blobs"
    separation: float = 1.0
    width: float = 2.0
    jitter: float = 1.0
    noise: float = 0.1
    background: float = 0.5
    contrast: float = 0.5
    value_range: List[float] = [0.0, 1.0]
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None


class NetworkSpec(_Strict):
    hidden: List[Union[int, dict]] = [64]
    width: float = Field(1.0, gt=0)
    timesteps: int = Field(8, ge=1)
    tau: float = Field(2.0, gt=0)
    threshold: float = Field(1.0, gt=0)
    readout: Literal["accumulate-current", "spike-count"] = "accumulate-current"
    surrogate_scale: float = Field(1.0, gt=0)
    init_gain: float = Field(2.0, gt=0)


class OptimizerSpec(_Strict):
    lr: float = Field(0.03, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    batch_size: int = Field(64, ge=1)
    momentum: float = Field(0.0, ge=0)
    clip_norm: Optional[float] = None
    epochs: int = Field(60, ge=1)


class LossSpec(_Strict):
    mode: Literal["standard", "alpha-target"] = "standard"
    alpha: float = Field(0.0, ge=0)


class FisherSpec(_Strict):
    estimator: Literal["auto", "exact", "monte-carlo"] = "auto"
    draws: Optional[int] = Field(None, ge=1)
    subset: int = Field(256, ge=1)
    every: int = Field(5, ge=1)
    split: Literal["test", "train"] = "test"
    layers: bool = False
    normalize_layers: bool = False


class RobustnessSpec(_Strict):
    alphas: List[float] = [0.01, 0.05, 0.1]
    corruptions: List[dict] = [
        {"kind": "gaussian", "ratio": 0.5},
        {"kind": "blur", "factor": 2},
        {"kind": "fgsm", "eps": 8 / 255},
        {"kind": "pgd", "eps": 8 / 255, "step_size": 4 / 255, "iterations": 10},
    ]
    deficit_length: int = Field(3, ge=1)
    deficit_ratio: float = Field(0.5, gt=0, le=1)
    clamp: bool = False


class PruningSpec(_Strict):
    fraction: float = Field(0.5, gt=0, lt=1)
    cycles: int = Field(5, ge=1)
    retrain_epochs: int = Field(10, ge=0)
    retrain_timesteps: List[Union[int, Literal["full", "tic"]]] = ["full", "tic", 1]
    kappa: float = Field(0.05, gt=0, lt=1)


class AblationSpec(_Strict):
    axis: Literal["timestep", "time_constant", "weight_decay", "learning_rate",
                  "dataset", "architecture"] = "timestep"
    values: List[Any] = [4, 6, 8]


class CapacitySpec(_Strict):
    small: List[Union[int, dict]] = [8]
    large: List[Union[int, dict]] = [128]
    timesteps: List[int] = [1, 2, 4, 8]


class ExperimentConfig(_Strict):
    name: str = "toy"
    dataset: DatasetConfig = DatasetConfig()
    network: NetworkSpec = NetworkSpec()
    optimizer: OptimizerSpec = OptimizerSpec()
    loss: LossSpec = LossSpec()
    fisher: FisherSpec = FisherSpec()
    robustness: RobustnessSpec = RobustnessSpec()
    pruning: PruningSpec = PruningSpec()
    ablation: AblationSpec = AblationSpec()
    capacity: CapacitySpec = CapacitySpec()
    seeds: List[int] = [0]
    output_dir: str = "runs"

    @field_validator("seeds")
    @classmethod
    def _seeds_nonempty(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v

    def digest(self):
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# Documented hyperparameters from the original large-scale runs; not used
# by the toy defaults.
PRESETS = {
    "deficit-resnet19-cifar10": {"optimizer": {"lr": 1e-3, "weight_decay": 5e-4, "batch_size": 128}},
    "ablation-default": {"network": {"timesteps": 10, "tau": 2.0},
                         "optimizer": {"lr": 3e-1, "weight_decay": 5e-4}},
    "alpha-cifar10": {"robustness": {"alphas": [1e-3, 1e-2, 7e-2]}},
    "alpha-svhn": {"robustness": {"alphas": [1e-4, 1e-2, 7e-2]}},
    "alpha-cifar100": {"robustness": {"alphas": [1e-4, 1e-3, 1e-2]}},
    "pruning": {"pruning": {"fraction": 0.5, "cycles": 5, "retrain_epochs": 60},
                "network": {"timesteps": 5}, "optimizer": {"epochs": 300}},
}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data, overrides):
    """Apply ``key.path=value`` strings to a config dict (values parsed as JSON)."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {} if part not in node else node[part]
                if not isinstance(node[part], dict):
                    raise ConfigError(f"override {key!r}: {part!r} is not a section")
            node = node[part]
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path=None, overrides=(), seed=None, out=None):
    """Read a JSON config (or defaults), apply overrides and validate."""
    data = {}
    if path is not None:
        try:
            with open(path) as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seeds"] = [int(seed)]
    if out is not None:
        data["output_dir"] = str(out)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


SUBSEED_NAMES = ("data", "init", "shuffle", "fisher", "attack")


def derive_seed(seed, name):
    """Named sub-seed: ``SeedSequence([seed, crc32(name)])`` reduced to 32 bits."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


def seed_table(seed):
    return {name: derive_seed(seed, name) for name in SUBSEED_NAMES}
