"""Frozen decoder language models: toy (deterministic) and real (OPT)."""

from pathlib import Path
from typing import Optional

import torch

from langmodel.common import LanguageModel, LanguageModelSpec, PrefixEmbedding, TokenSequence
from langmodel.tokenizer import ToyTokenizer, synthetic_captions
from langmodel.toy import ToyLanguageModel
from utils.config import LanguageModelConfig
from utils.errors import BackendUnavailableException


def load_language_model(
    cfg: LanguageModelConfig,
    asset_dir: Optional[str] = None,
    tokenizer: Optional[ToyTokenizer] = None,
) -> LanguageModel:
    dtype = getattr(torch, cfg.dtype)
    if cfg.backend == "toy":
        return ToyLanguageModel(
            tokenizer=tokenizer or ToyTokenizer.build(),
            embed_dim=cfg.embed_dim,
            n_blocks=cfg.n_blocks,
            n_heads=cfg.n_heads,
            max_gen_len=cfg.max_gen_len,
            max_positions=cfg.max_positions,
            seed=cfg.seed,
            dtype=dtype,
        )

    from langmodel.opt import OptLanguageModel
    if cfg.weights_path:
        model_dir = Path(cfg.weights_path)
    elif asset_dir:
        model_dir = Path(asset_dir) / cfg.model_name
    else:
        raise BackendUnavailableException(cfg.model_name, "no weights_path and no asset directory configured")
    return OptLanguageModel(model_dir, max_gen_len=cfg.max_gen_len, dtype=dtype)


__all__ = [
    "LanguageModel",
    "LanguageModelSpec",
    "PrefixEmbedding",
    "TokenSequence",
    "ToyLanguageModel",
    "ToyTokenizer",
    "load_language_model",
    "synthetic_captions",
]
