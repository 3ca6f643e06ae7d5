"""
Deterministic toy backbone.

Every weight is derived from (seed, key) alone: the key names the tensor
("text:<id>", "cls", "query:<head>", "key:<head>", "projection") and the
SHA-256 of "<seed>:<key>" seeds a private generator for a standard normal
draw. Text embeddings are the normalized sum of per-token vectors; image
tokens come from one multi-head self-attention layer over the class vector
and the input patch rows, with the heads' attention maps averaged.
"""

import hashlib
import json
import math
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from backbone.common import Backbone, BackboneSpec, PatchFeatureSet, tensor_checksum
from langmodel.tokenizer import ToyTokenizer
from utils.errors import InvalidArgumentException
from utils.logging import get_logger

logger = get_logger("backbone.toy")


def hashed_normal(seed: int, key: str, shape, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    digest = hashlib.sha256(f"{seed}:{key}".encode("utf-8")).hexdigest()
    generator = torch.Generator().manual_seed(int(digest[:15], 16))
    return torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype)


class ToyBackbone(Backbone):
    def __init__(
        self,
        tokenizer: Optional[ToyTokenizer] = None,
        dim: int = 32,
        vision_dim: int = 32,
        n_patches: int = 49,
        max_text_len: int = 32,
        n_heads: int = 4,
        projection: str = "identity",
        seed: int = 7,
        dtype: torch.dtype = torch.float64,
    ):
        self.tokenizer = tokenizer or ToyTokenizer.build()
        self.spec = BackboneSpec(
            dim=dim,
            vision_dim=vision_dim,
            n_patches=n_patches,
            vocab_size=len(self.tokenizer),
            max_text_len=max_text_len,
            name="toy",
        )
        if vision_dim % n_heads != 0:
            raise InvalidArgumentException(f"vision_dim {vision_dim} not divisible by {n_heads} heads")
        self.seed = seed
        self.n_heads = n_heads

        self.token_table = torch.stack(
            [hashed_normal(seed, f"text:{t}", (dim,), dtype) for t in range(self.spec.vocab_size)]
        )
        self.cls_vector = hashed_normal(seed, "cls", (vision_dim,), dtype)
        scale = 1.0 / math.sqrt(vision_dim)
        self.query_weights = [hashed_normal(seed, f"query:{h}", (vision_dim, vision_dim), dtype) * scale
                              for h in range(n_heads)]
        self.key_weights = [hashed_normal(seed, f"key:{h}", (vision_dim, vision_dim), dtype) * scale
                            for h in range(n_heads)]

        if projection == "identity":
            if dim != vision_dim:
                raise InvalidArgumentException("Identity projection requires dim == vision_dim")
            self.projection = torch.eye(dim, dtype=dtype)
        elif projection == "random":
            self.projection = hashed_normal(seed, "projection", (vision_dim, dim), dtype) * scale
        else:
            raise InvalidArgumentException(f"Unknown projection '{projection}'")

        logger.debug(f"Toy backbone ready (D={dim}, D_v={vision_dim}, N_p={n_patches}, seed={seed})")

    def tokenize(self, text: str) -> list:
        return self.tokenizer.encode(text)

    def _text_features(self, ids: Sequence[int]) -> torch.Tensor:
        return self.token_table[list(ids)].sum(dim=0)

    def _image_features(self, image) -> PatchFeatureSet:
        image = torch.as_tensor(image, dtype=self.dtype)
        if image.shape != (self.spec.n_patches, self.spec.vision_dim):
            raise InvalidArgumentException(
                f"Toy images are ({self.spec.n_patches}, {self.spec.vision_dim}) patch arrays, "
                f"got {tuple(image.shape)}"
            )

        x = torch.cat([self.cls_vector[None, :], image], dim=0)
        scale = 1.0 / math.sqrt(self.spec.vision_dim)
        maps = [
            torch.softmax((x @ wq) @ (x @ wk).T * scale, dim=-1)
            for wq, wk in zip(self.query_weights, self.key_weights)
        ]
        attention = torch.stack(maps).mean(dim=0)
        return PatchFeatureSet(tokens=attention @ x, attention=attention)

    def load_image(self, path: Union[str, Path]):
        """.npy patch arrays, or .json synthetic patch descriptors."""
        path = Path(path)
        if path.suffix == ".npy":
            return torch.from_numpy(np.load(path)).to(self.dtype)
        if path.suffix == ".json":
            record = json.loads(path.read_text(encoding="utf-8"))
            return PatchFeatureSet(
                tokens=torch.tensor(record["patch_tokens"], dtype=self.dtype),
                attention=torch.tensor(record["attention"], dtype=self.dtype),
            )
        raise InvalidArgumentException(f"Toy backbone cannot read image file {path}")

    def weights_checksum(self) -> str:
        return tensor_checksum(
            self.token_table, self.cls_vector, *self.query_weights, *self.key_weights, self.projection
        )
