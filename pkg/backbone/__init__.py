"""Frozen contrastive backbones: toy (deterministic) and real (CLIP)."""

from pathlib import Path
from typing import Optional

import torch

from backbone.common import (
    Backbone,
    BackboneSpec,
    PatchFeatureSet,
    ProjectedPatchSet,
    TextEmbedding,
    cosine_similarity,
)
from backbone.toy import ToyBackbone
from langmodel.tokenizer import ToyTokenizer
from utils.config import BackboneConfig
from utils.errors import BackendUnavailableException


def resolve_asset_path(weights_path: Optional[str], model_name: str, asset_dir: Optional[str]) -> Path:
    if weights_path:
        return Path(weights_path)
    if asset_dir:
        return Path(asset_dir) / model_name
    raise BackendUnavailableException(model_name, "no weights_path and no asset directory configured")


def load_backbone(
    cfg: BackboneConfig,
    asset_dir: Optional[str] = None,
    tokenizer: Optional[ToyTokenizer] = None,
) -> Backbone:
    dtype = getattr(torch, cfg.dtype)
    if cfg.backend == "toy":
        return ToyBackbone(
            tokenizer=tokenizer or ToyTokenizer.build(cfg.vocab_size),
            dim=cfg.dim,
            vision_dim=cfg.vision_dim,
            n_patches=cfg.n_patches,
            max_text_len=cfg.max_text_len,
            n_heads=cfg.n_heads,
            projection=cfg.projection,
            seed=cfg.seed,
            dtype=dtype,
        )

    from backbone.clip import ClipBackbone
    return ClipBackbone(resolve_asset_path(cfg.weights_path, cfg.model_name, asset_dir), dtype=dtype)


__all__ = [
    "Backbone",
    "BackboneSpec",
    "PatchFeatureSet",
    "ProjectedPatchSet",
    "TextEmbedding",
    "ToyBackbone",
    "cosine_similarity",
    "load_backbone",
    "resolve_asset_path",
]
