"""Configuration objects and the JSON experiment-config loader.

All config models reject unknown keys so that a misspelled hyperparameter
fails loudly at load time instead of silently falling back to a default.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

Scheme = Literal["BPSK", "QPSK", "QAM16", "QAM64"]

CLASS_COUNTS = {"BPSK": 2, "QPSK": 4, "QAM16": 16, "QAM64": 64}


class ConfigError(ValueError):
    """Raised when a config file is missing, malformed or inconsistent.

    ``path`` holds the dotted field path of the first offending field
    (e.g. ``"train.alpha"``) when one can be identified.
    """

    def __init__(self, message: str, path: str | None = None):
        super().__init__(message)
        self.path = path


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SimConfig(_Strict):
    """Wireless data-generation settings.

    ``snr_sampling="db"`` draws the SNR uniformly in dB and converts it to
    a noise variance; ``"variance"`` draws the noise variance uniformly
    between the two endpoint variances.
    """

    scheme: Scheme = "QPSK"
    n_r: int = Field(1, ge=1)
    n_t: int = Field(1, ge=1)
    T: int = Field(31, ge=2)
    snr_db_min: float = -3.0
    snr_db_max: float = 3.0
    snr_sampling: Literal["db", "variance"] = "db"
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_range(self):
        if self.snr_db_min > self.snr_db_max:
            raise ValueError("snr_db_min must not exceed snr_db_max")
        return self

    @property
    def class_count(self) -> int:
        return CLASS_COUNTS[self.scheme]


class ModelConfig(_Strict):
    d_e: int = Field(64, ge=1)
    n_layers: int = Field(8, ge=1)
    n_heads: int = Field(8, ge=1)
    T_max: int = Field(31, ge=1)
    n_r: int = Field(1, ge=1)
    n_t: int = Field(1, ge=1)
    class_count: int = Field(4, ge=2)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    embed_bias: bool = False

    @model_validator(mode="after")
    def _check_heads(self):
        if self.d_e % self.n_heads:
            raise ValueError("d_e must be divisible by n_heads")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported (must be 0)")
        return self

    @property
    def context_window(self) -> int:
        return 2 * self.T_max - 1


class TrainConfig(_Strict):
    batch_size: int = Field(512, ge=1)
    pretrain_steps: int = Field(50_000, ge=0)
    finetune_steps: int = Field(25_000, ge=0)
    alpha: float = Field(0.7, ge=0.0, le=1.0)
    k_pilots: int = Field(1, ge=1)
    lr: float = Field(3e-4, gt=0.0)
    warmup_steps: int = Field(1000, ge=0)
    cosine_decay: bool = True
    min_lr_ratio: float = Field(0.1, ge=0.0, le=1.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    grad_clip: float | None = Field(1.0, gt=0.0)
    feedback: Literal["greedy", "sample"] = "greedy"
    seed: int = Field(0, ge=0, lt=2**64)
    eval_every: int = Field(0, ge=0)
    checkpoint_dir: str | None = None


class EvalOptions(_Strict):
    n_prompts: int = Field(80_000, ge=1)
    k_pilots: int = Field(1, ge=1)
    snr_db: float | None = None
    seed: int = Field(1, ge=0, lt=2**64)
    vector_errors: bool = False
    chunk_size: int = Field(500, ge=1)
    arms: list[Literal["icl", "df", "mmse", "mmse_df", "csi"]] = ["icl", "df", "mmse", "mmse_df", "csi"]


class ExperimentConfig(_Strict):
    experiment_id: str
    sim: SimConfig = SimConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalOptions = EvalOptions()
    out_dir: str | None = None

    @model_validator(mode="after")
    def _cross_check(self):
        sim, model = self.sim, self.model
        if model.class_count != sim.class_count:
            raise ValueError(
                f"model.class_count={model.class_count} does not match sim.scheme={sim.scheme}"
            )
        if (model.n_r, model.n_t) != (sim.n_r, sim.n_t):
            raise ValueError("model antenna counts must match sim antenna counts")
        if model.T_max < sim.T:
            raise ValueError("model.T_max must be at least sim.T")
        if self.train.k_pilots >= sim.T:
            raise ValueError("train.k_pilots must be smaller than sim.T")
        if self.eval.k_pilots >= sim.T:
            raise ValueError("eval.k_pilots must be smaller than sim.T")
        return self

    def eval_sim(self) -> SimConfig:
        """Sim config used for testing: eval seed, and the eval SNR if pinned."""
        update: dict = {"seed": self.eval.seed}
        if self.eval.snr_db is not None:
            update.update(snr_db_min=self.eval.snr_db, snr_db_max=self.eval.snr_db)
        return self.sim.model_copy(update=update)


def config_hash(*configs: BaseModel) -> str:
    """Short stable digest over one or more config models."""
    blob = json.dumps([c.model_dump(mode="json") for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _error_path(exc: ValidationError) -> str:
    err = exc.errors()[0]
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def parse_experiment(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        path = _error_path(exc)
        msg = exc.errors()[0]["msg"]
        raise ConfigError(f"{path}: {msg}", path=path) from None


def load_experiment(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_experiment(data)
