"""
Synthetic image-text pairs with a controllable modality gap.

Each pair starts from the toy text embedding u of a caption. The global image
row is L2Norm(u + g) with g ~ N(0, gap_sigma^2 I); patch row k is
L2Norm(u + n_k) where the first n_low_noise patches use low_noise_sigma and the
rest patch_noise_sigma. Attention rows are Dirichlet(1) draws. The patch set is
handed to the backbone as a precomputed descriptor, so the projection must be
the identity for the rows to land in the joint space unchanged.
"""

import json
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

import torch

from backbone.common import Backbone, PatchFeatureSet, TextEmbedding, normalize_rows, perturb_and_normalize
from langmodel.tokenizer import synthetic_captions
from utils.config import SyntheticPairConfig
from utils.errors import InvalidArgumentException
from utils.logging import get_logger

logger = get_logger("backbone.synthetic")


class SyntheticPair(NamedTuple):
    text: TextEmbedding
    patches: PatchFeatureSet
    tokens: List[int]
    caption: str
    gap: torch.Tensor


def _dirichlet_rows(n: int, generator: torch.Generator, dtype: torch.dtype) -> torch.Tensor:
    # Normalized Exp(1) draws are Dirichlet(1, ..., 1)
    uniform = torch.rand((n, n), generator=generator, dtype=torch.float64)
    exponential = -torch.log1p(-uniform)
    return (exponential / exponential.sum(dim=-1, keepdim=True)).to(dtype)


def generate_synthetic_pairs(
    backbone: Backbone,
    cfg: SyntheticPairConfig,
    captions: Optional[Sequence[str]] = None,
) -> List[SyntheticPair]:
    """cfg.n_pairs pairs; captions are cycled when given, else drawn from the scene grammar."""
    if cfg.n_pairs < 1:
        raise InvalidArgumentException(f"n_pairs must be at least 1, got {cfg.n_pairs}")
    if cfg.n_low_noise > backbone.spec.n_patches:
        raise InvalidArgumentException(
            f"n_low_noise {cfg.n_low_noise} exceeds patch count {backbone.spec.n_patches}"
        )
    if not backbone.has_identity_projection:
        raise InvalidArgumentException("Synthetic pairs require a backbone with identity projection")

    if captions is None:
        captions = synthetic_captions(cfg.n_pairs, seed=cfg.seed)
    elif len(captions) == 0:
        raise InvalidArgumentException("Caption list for synthetic pairs is empty")

    dim = backbone.spec.dim
    n_patches = backbone.spec.n_patches
    dtype = backbone.dtype
    generator = torch.Generator().manual_seed(cfg.seed)

    patch_std = torch.full((n_patches, 1), cfg.patch_noise_sigma, dtype=torch.float64)
    patch_std[:cfg.n_low_noise] = cfg.low_noise_sigma
    noiseless = patch_std[:, 0] == 0

    pairs = []
    for i in range(cfg.n_pairs):
        caption = captions[i % len(captions)]
        tokens = backbone.tokenize(caption)
        text = backbone.encode_text(tokens)
        u = text.vector

        gap = (torch.randn((dim,), generator=generator, dtype=torch.float64) * cfg.gap_sigma).to(dtype)
        patch_noise = (torch.randn((n_patches, dim), generator=generator, dtype=torch.float64) * patch_std).to(dtype)

        global_row = perturb_and_normalize(u, gap[None, :], cfg.gap_sigma)
        patch_rows = normalize_rows(u + patch_noise)
        patch_rows[noiseless] = u
        attention = _dirichlet_rows(n_patches + 1, generator, dtype)

        patches = PatchFeatureSet(tokens=torch.cat([global_row, patch_rows]), attention=attention)
        pairs.append(SyntheticPair(text=text, patches=patches, tokens=tokens, caption=caption, gap=gap))

    logger.debug(f"Generated {len(pairs)} synthetic pairs (gap_sigma={cfg.gap_sigma})")
    return pairs


def pair_to_record(pair: SyntheticPair) -> dict:
    return {
        "caption": pair.caption,
        "text_tokens": list(pair.tokens),
        "text_emb": pair.text.vector.tolist(),
        "patch_tokens": pair.patches.tokens.tolist(),
        "cls_attention": pair.patches.cls_attention.tolist(),
        "attention": pair.patches.attention.tolist(),
        "gap": pair.gap.tolist(),
    }


def record_to_pair(record: dict, dtype: torch.dtype = torch.float64) -> SyntheticPair:
    return SyntheticPair(
        text=TextEmbedding(vector=torch.tensor(record["text_emb"], dtype=dtype)),
        patches=PatchFeatureSet(
            tokens=torch.tensor(record["patch_tokens"], dtype=dtype),
            attention=torch.tensor(record["attention"], dtype=dtype),
        ),
        tokens=list(record["text_tokens"]),
        caption=record.get("caption", ""),
        gap=torch.tensor(record.get("gap", []), dtype=dtype),
    )


def dump_synthetic_pairs(pairs: Sequence[SyntheticPair], path: Union[str, Path]) -> Path:
    """Write pairs as JSONL fixtures, one record per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for pair in pairs:
            f.write(json.dumps(pair_to_record(pair), separators=(",", ":")))
            f.write("\n")
    return path


def load_synthetic_pairs(path: Union[str, Path], dtype: torch.dtype = torch.float64) -> List[SyntheticPair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                pairs.append(record_to_pair(json.loads(line), dtype))
    return pairs
