"""Experiment configuration: a single versioned JSON document."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .baselines import DEFAULT_LR_GRID
from .distill import DistillConfig
from .models import ModelSpec

CONFIG_VERSION = 1
BASELINE_METHODS = ("random-real", "optimized-real", "kmeans", "average-real", "knn-random-real", "knn-kmeans")


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    kind: Literal["blobs", "iris", "csv", "idx", "text", "synthetic-text"]
    # blobs
    n_per_class: int = Field(100, ge=1)
    test_n_per_class: int = Field(100, ge=1)
    num_classes: Optional[int] = Field(None, ge=2)  # blobs: 3, synthetic text: 2
    separation: float = Field(5.0, gt=0)
    dim: int = Field(2, ge=1)
    # csv / iris
    path: Optional[str] = None
    test_path: Optional[str] = None
    label_column: Optional[str] = None
    features: Optional[list[str]] = None
    # idx
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    # text
    corpus: Optional[str] = None
    test_corpus: Optional[str] = None
    embeddings: Optional[str] = None
    sentence_length: int = Field(12, ge=1)
    # synthetic text
    sentences: int = Field(200, ge=2)
    test_sentences: int = Field(200, ge=2)
    vocab_per_class: int = Field(20, ge=1)
    embedding_dim: int = Field(16, ge=1)
    min_len: int = Field(6, ge=1)
    max_len: int = Field(12, ge=1)


class ModelSection(_Strict):
    kind: Literal["mlp", "small-cnn", "text-cnn"] = "mlp"
    hidden: list[int] = [16]
    activation: Literal["tanh", "relu"] = "tanh"
    channels: list[int] = [6, 16]
    kernel: int = Field(5, ge=1)
    padding: Literal["valid", "same"] = "valid"
    fc_hidden: int = Field(84, ge=1)
    filter_widths: list[int] = [3, 4, 5]
    num_filters: int = Field(8, ge=1)
    loss: Literal["softmax", "sigmoid"] = "softmax"

    def to_spec(self, input_shape: tuple[int, ...], num_classes: int) -> ModelSpec:
        d = self.model_dump()
        return ModelSpec(input_shape=input_shape, num_classes=num_classes, **d)


class DistillSection(_Strict):
    m: int = Field(10, ge=1)
    steps: int = Field(1, ge=1)
    epochs: int = Field(1, ge=1)
    outer_lr: float = Field(0.01, ge=0)
    iterations: int = Field(100, ge=1)
    batch_size: int = Field(128, ge=1)
    init_regime: Literal["fixed", "random"] = "fixed"
    nets_per_step: int = Field(1, ge=1)
    label_init: Literal["one-hot", "random-normal"] = "one-hot"
    learn_labels: bool = True
    init_lr: float = Field(0.02, ge=0)
    divergence_factor: float = Field(10.0, gt=0)
    divergence_patience: int = Field(50, ge=1)
    unknown_token: Literal["error", "zero"] = "error"
    optimizer: Literal["gd", "adam"] = "gd"

    def to_config(self, seed: int, **overrides) -> DistillConfig:
        d = self.model_dump()
        d.update(overrides)
        return DistillConfig(seed=seed, **d)


class BaselineSection(_Strict):
    methods: list[str] = list(BASELINE_METHODS)
    per_class: int = Field(1, ge=1)
    draws: int = Field(10, ge=1)
    keep_fraction: float = Field(0.2, gt=0, le=1)
    kmeans_iterations: int = Field(100, ge=1)
    knn_k: int = Field(1, ge=1)
    lr_grid: list[float] = list(DEFAULT_LR_GRID)

    @field_validator("methods")
    @classmethod
    def _known(cls, v):
        bad = [m for m in v if m not in BASELINE_METHODS]
        if bad:
            raise ValueError(f"unknown baseline methods {bad}")
        return v


class EvalSection(_Strict):
    trials: int = Field(200, ge=1)
    original_accuracy: Optional[float] = Field(None, gt=0, le=1)
    original_steps: int = Field(300, ge=1)
    original_lr: float = Field(0.5, gt=0)


class KnnSection(_Strict):
    m: int = Field(2, ge=1)
    k: int = Field(2, ge=1)
    weights: Literal["uniform", "distance"] = "distance"
    budget: int = Field(1000, ge=1)
    resolution: list[int] = [100, 100]


class CurveSection(_Strict):
    m_values: list[int] = [1, 2, 3, 5]
    thresholds: list[float] = [50.0, 90.0]

    @field_validator("m_values")
    @classmethod
    def _increasing(cls, v):
        if not v or any(b <= a for a, b in zip(v, v[1:])) or v[0] < 1:
            raise ValueError("m_values must be positive and strictly increasing")
        return v


class ExperimentConfig(_Strict):
    version: Literal[1]
    dataset: DatasetSection
    model: ModelSection = ModelSection()
    distill: DistillSection = DistillSection()
    baselines: BaselineSection = BaselineSection()
    eval: EvalSection = EvalSection()
    knn: KnnSection = KnnSection()
    curve: CurveSection = CurveSection()
    output_dir: str = "out"
    seed: int = 0


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(raw)


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config:\n{e}") from None


def derive_seed(master: int, component: str) -> int:
    """Per-component seed from the master seed, stable across releases."""
    digest = hashlib.sha256(f"{master}/{component}".encode()).digest()
    return int.from_bytes(digest[:4], "little")
