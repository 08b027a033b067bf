"""Experiment configuration.

Every config is a strict pydantic model and unknown keys are rejected.
Values are layered defaults < environment (settings.ACTISHADE) < config file
< command-line flags.
"""
import json
import logging
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
IN_PROCESS = "in-process"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True, frozen=False)


class BackendConfig(_Strict):
    endpoint: str = IN_PROCESS
    vocab_size: int = Field(512, ge=4)
    embed_dim: int = Field(32, ge=1)
    max_steps: int = Field(32, ge=1)
    request_timeout: float = Field(30.0, gt=0)
    seed: int = Field(42, ge=0)
    logit_scale: float = Field(8.0, gt=0)
    script_path: Optional[Path] = None

    @property
    def in_process(self):
        return self.endpoint == IN_PROCESS


class PerturbationConfig(_Strict):
    sigma: float = Field(0.1, ge=0)
    max_steps: int = Field(32, ge=1)
    noise_seed: int = Field(0, ge=0)
    noise_samples: int = Field(1, ge=1)
    workers: int = Field(1, ge=1)
    scores_path: Optional[Path] = None


class TrainConfig(_Strict):
    alpha: float = Field(0.7, ge=0, le=1)
    learning_rate: float = Field(5e-5, gt=0)
    batch_size: int = Field(32, ge=1)
    max_epochs: int = Field(20, ge=1)
    early_stop_patience: int = Field(3, ge=1)
    seed: int = Field(42, ge=0)
    temperature: float = Field(1.0, gt=0)
    d_in: int = Field(4096, ge=1)
    d_out: int = Field(64, ge=2)
    hash_seed: int = Field(0, ge=0)
    validation_fraction: float = Field(0.1, gt=0, lt=1)
    strategy: Literal["base", "scl", "fcl"] = "fcl"

    @property
    def loss_alpha(self):
        """Weight of the positive-vs-rest term; "scl" trains on that term alone."""
        return 1.0 if self.strategy == "scl" else self.alpha


class PipelineConfig(_Strict):
    max_iterations: int = Field(5, ge=1)
    top_k: int = Field(3, ge=1)
    detection_method: Literal["gap", "coda", "none"] = "gap"
    selection: Literal["yes-prob", "top-score"] = "yes-prob"
    prompt_set: str = "musique"
    single_hop_threshold: float = Field(0.5, ge=0, le=1)
    workers: int = Field(1, ge=1)


class PathsConfig(_Strict):
    corpus: Optional[Path] = None
    dataset: Optional[Path] = None
    prompts: Optional[Path] = None
    annotations: Optional[Path] = None
    params: Optional[Path] = None
    index: Optional[Path] = None
    output: Optional[Path] = None

    @field_validator("corpus", "dataset", "prompts", "annotations")
    @classmethod
    def _must_exist(cls, value):
        if value is not None and not Path(value).exists():
            raise ValueError(f"path does not exist: {value}")
        return value


class RunConfig(_Strict):
    version: int = CONFIG_VERSION
    paths: PathsConfig = Field(default_factory=PathsConfig)
    backend: BackendConfig = Field(default_factory=BackendConfig)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    detection: PerturbationConfig = Field(default_factory=PerturbationConfig)

    @model_validator(mode="after")
    def _check_version(self):
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version}, expected {CONFIG_VERSION}")
        return self

    def snapshot(self):
        """JSON-ready dict of the effective configuration."""
        return json.loads(self.model_dump_json())


# Flag name -> dotted config fields it overrides.
FLAG_FIELDS = {
    "sigma": ("detection.sigma",),
    "alpha": ("train.alpha",),
    "strategy": ("train.strategy",),
    "k": ("pipeline.top_k",),
    "max_iterations": ("pipeline.max_iterations",),
    "method": ("pipeline.detection_method",),
    "selection": ("pipeline.selection",),
    "seed": ("train.seed", "detection.noise_seed"),
    "workers": ("pipeline.workers",),
    "out": ("paths.output",),
    "dataset": ("paths.dataset",),
    "corpus": ("paths.corpus",),
    "params": ("paths.params",),
    "index": ("paths.index",),
    "scores": ("detection.scores_path",),
}


def environment_defaults():
    """Defaults sourced from Django settings, if settings are configured."""
    from django.conf import settings

    if not settings.configured:
        return {}
    env = getattr(settings, "ACTISHADE", {})
    defaults = {}
    if "BACKEND_ENDPOINT" in env:
        defaults.setdefault("backend", {})["endpoint"] = env["BACKEND_ENDPOINT"]
    if "SEED" in env:
        defaults.setdefault("backend", {})["seed"] = env["SEED"]
    if "OUTPUT_DIR" in env:
        defaults.setdefault("paths", {})["output"] = str(env["OUTPUT_DIR"])
    return defaults


def _merge(base, override):
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _set_dotted(tree, dotted, value):
    node = tree
    *parents, leaf = dotted.split(".")
    for part in parents:
        node = node.setdefault(part, {})
    node[leaf] = value


def flag_overrides(flags):
    """Turn parsed CLI flags into a nested override dict; None means unset."""
    tree = {}
    for name, fields in FLAG_FIELDS.items():
        value = flags.get(name)
        if value is None:
            continue
        for dotted in fields:
            _set_dotted(tree, dotted, value)
    return tree


def load_run_config(path=None, flags=None, defaults=None):
    """Build a RunConfig from defaults, an optional JSON file and flag values."""
    layered = environment_defaults() if defaults is None else dict(defaults)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as handle:
                from_file = json.load(handle)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(from_file, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        if "version" not in from_file:
            raise ConfigError(f"config file {path} has no 'version' field")
        layered = _merge(layered, from_file)
    if flags:
        layered = _merge(layered, flag_overrides(flags))
    try:
        config = RunConfig.model_validate(layered)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    logger.debug("effective config: %s", config.model_dump_json())
    return config
