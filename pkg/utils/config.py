"""
Configuration management and validation for MacCap runs.
"""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from utils.logging import get_logger
from utils.errors import ConfigurationException

logger = get_logger("config")

ASSET_DIR_ENV = "MACCAP_ASSET_DIR"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BackboneConfig(_Section):
    """Contrastive encoder pair selection and toy dimensions."""
    backend: Literal["toy", "real"] = "toy"
    dim: int = Field(32, ge=1)
    vision_dim: int = Field(32, ge=1)
    n_patches: int = Field(49, ge=1)
    vocab_size: int = Field(256, ge=8)
    max_text_len: int = Field(32, ge=1)
    n_heads: int = Field(4, ge=1)
    projection: Literal["identity", "random"] = "identity"
    seed: int = 7
    dtype: Literal["float32", "float64"] = "float64"
    # Real backend only
    model_name: str = "clip-vit-base-patch32"
    weights_path: Optional[str] = None

    @model_validator(mode="after")
    def _check_projection(self):
        if self.projection == "identity" and self.dim != self.vision_dim:
            raise ValueError("identity projection requires dim == vision_dim")
        return self


class LanguageModelConfig(_Section):
    """Frozen decoder language model selection."""
    backend: Literal["toy", "real"] = "toy"
    embed_dim: int = Field(32, ge=1)
    n_blocks: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    max_gen_len: int = Field(20, ge=1)
    max_positions: int = Field(128, ge=2)
    seed: int = 3
    dtype: Literal["float32", "float64"] = "float64"
    # Real backend only
    model_name: str = "opt-1.3b"
    weights_path: Optional[str] = None


class NoiseConfig(_Section):
    """Region noise injection: N_cr perturbed copies with per-dimension std sigma."""
    sigma: float = Field(0.016, ge=0, allow_inf_nan=False)
    n_cr: int = Field(10, ge=1)
    distribution: Literal["gaussian", "uniform"] = "gaussian"


class AdaptorConfig(_Section):
    """Adaptor decoder shape."""
    n_q: int = Field(10, ge=1)
    n_heads: int = Field(8, ge=1)
    ffn_mult: int = Field(4, ge=1)
    seed: int = 0


class TrainConfig(_Section):
    """Text-only reconstruction training hyperparameters."""
    batch_size: int = Field(128, ge=1)
    # 0 is accepted as a dry run that must leave parameters untouched
    learning_rate: float = Field(4e-4, ge=0, allow_inf_nan=False)
    epochs: int = Field(10, ge=1)
    seed: int = 0
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    max_words: int = Field(15, ge=1)
    embedding_cache: bool = True
    cache_dir: Optional[str] = None
    # Single-context execution: deterministic kernels and one intra-op thread
    deterministic: bool = True
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    adaptor: AdaptorConfig = Field(default_factory=AdaptorConfig)


class SamplingConfig(_Section):
    """Multiple sampling and filtering at inference."""
    samples: int = Field(20, ge=1)
    inference_sigma: float = Field(0.016, ge=0, allow_inf_nan=False)
    n_beams: int = Field(4, ge=1)
    n_cr: int = Field(10, ge=1)
    max_len: Optional[int] = Field(None, ge=1)
    seed: int = 0
    distribution: Literal["gaussian", "uniform"] = "gaussian"
    aggregate: Literal["sum", "mean", "cls"] = "sum"
    # Beam score divided by hypothesis length; also used for VQA answers
    length_normalize: bool = False
    normalize_inference_rows: bool = False
    keep_candidates: bool = False
    workers: int = Field(1, ge=1)


class SyntheticPairConfig(_Section):
    """Synthetic image-text pairs with a controlled modality gap."""
    gap_sigma: float = Field(0.05, ge=0, allow_inf_nan=False)
    patch_noise_sigma: float = Field(0.05, ge=0, allow_inf_nan=False)
    n_low_noise: int = Field(0, ge=0)
    low_noise_sigma: float = Field(0.0, ge=0, allow_inf_nan=False)
    seed: int = 0
    n_pairs: int = 1000


class PathsConfig(_Section):
    """Input and output locations."""
    corpus: Optional[str] = None
    checkpoint: Optional[str] = None
    manifest: Optional[str] = None
    out_dir: str = "runs/latest"
    asset_dir: Optional[str] = None


class RunConfig(_Section):
    """Merged view of every section; emitted verbatim into each run directory."""
    seed: int = 0
    workers: int = Field(1, ge=1)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    lm: LanguageModelConfig = Field(default_factory=LanguageModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    synthetic: SyntheticPairConfig = Field(default_factory=SyntheticPairConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Stable SHA-256 of the resolved configuration."""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8")
        return path


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge override into a copy of base."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class ConfigManager:
    """Manages configuration loading and validation."""

    def __init__(self, config_path: Optional[str] = None, env_path: str = ".env"):
        self.config_path = Path(config_path) if config_path else None
        self.env_path = Path(env_path)
        self._config_data: Dict[str, Any] = {}

    def load_file(self) -> Dict[str, Any]:
        """Load the optional JSON config file and the .env file."""
        if self.env_path.exists():
            from dotenv import load_dotenv
            load_dotenv(self.env_path)

        if self.config_path is None:
            self._config_data = {}
            return self._config_data

        if not self.config_path.exists():
            raise ConfigurationException(f"Configuration file not found: {self.config_path}")

        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                config_data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationException(f"Invalid JSON in {self.config_path}: {e}")
        except OSError as e:
            raise ConfigurationException(f"Failed to read {self.config_path}: {e}")

        if not isinstance(config_data, dict):
            raise ConfigurationException(f"{self.config_path} must contain a JSON object")

        config_data.pop("_comment", None)
        self._config_data = config_data
        return config_data

    def resolve(self, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        """Build the RunConfig with precedence flags > file > defaults."""
        logger.debug("Resolving run configuration...")
        data = deep_merge(self._config_data, overrides or {})

        asset_dir = os.getenv(ASSET_DIR_ENV)
        if asset_dir and not data.get("paths", {}).get("asset_dir"):
            data = deep_merge(data, {"paths": {"asset_dir": asset_dir}})

        try:
            config = RunConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigurationException(f"Invalid configuration: {e}")

        logger.debug(f"Configuration resolved (hash {config.config_hash()[:12]})")
        return config
