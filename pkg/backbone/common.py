"""
Types and the shared interface of contrastive vision-language backbones.
"""

import hashlib
import json
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence, Union

import torch
import torch.nn.functional as F

from utils.errors import InvalidArgumentException
from utils.logging import get_logger

logger = get_logger("backbone")


@dataclass(frozen=True)
class BackboneSpec:
    """Dimensions shared by every embedding a backbone produces."""
    dim: int
    vision_dim: int
    n_patches: int
    vocab_size: int
    max_text_len: int
    name: str = "toy"

    def __post_init__(self):
        if self.dim < 1 or self.vision_dim < 1 or self.n_patches < 1:
            raise InvalidArgumentException(
                f"Backbone dimensions must be positive (D={self.dim}, D_v={self.vision_dim}, N_p={self.n_patches})"
            )
        if self.max_text_len < 1:
            raise InvalidArgumentException("max_text_len must be at least 1")

    def spec_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class TextEmbedding:
    """Unit-norm text feature T_c in the joint space."""
    vector: torch.Tensor


@dataclass(frozen=True)
class PatchFeatureSet:
    """Final-layer vision tokens (row 0 is the class token) and head-averaged attention."""
    tokens: torch.Tensor
    attention: torch.Tensor

    @property
    def cls_attention(self) -> torch.Tensor:
        return self.attention[0]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class ProjectedPatchSet:
    """Vision tokens mapped into the joint space; row 0 is the global feature I_c."""
    tokens: torch.Tensor

    @property
    def global_row(self) -> torch.Tensor:
        return self.tokens[0]

    @property
    def patch_rows(self) -> torch.Tensor:
        return self.tokens[1:]


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, TextEmbedding):
        return x.vector
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def cosine_similarity(a, b) -> float:
    """Cosine similarity of two non-zero vectors of equal length."""
    a = _as_tensor(a).reshape(-1)
    b = _as_tensor(b).reshape(-1)
    if a.shape != b.shape:
        raise InvalidArgumentException(f"Vector lengths differ: {a.shape[0]} vs {b.shape[0]}")

    norm_a = torch.linalg.vector_norm(a)
    norm_b = torch.linalg.vector_norm(b)
    if norm_a == 0 or norm_b == 0:
        raise InvalidArgumentException("Cosine similarity is undefined for a zero vector")

    value = float(torch.dot(a, b) / (norm_a * norm_b))
    return max(-1.0, min(1.0, value))


def normalize_rows(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1)


def perturb_and_normalize(base: torch.Tensor, noise: torch.Tensor, std: float) -> torch.Tensor:
    """L2Norm(base + noise); with std 0 the base rows are returned untouched."""
    if std == 0:
        return base.expand_as(noise).clone()
    return normalize_rows(base + noise)


def tensor_checksum(*tensors: torch.Tensor) -> str:
    digest = hashlib.sha256()
    for tensor in tensors:
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class Backbone(ABC):
    """Frozen contrastive encoder pair exposing the tensors the captioner consumes.

    Implementations are immutable after construction; every method is read-only
    and safe to call from several threads.
    """

    spec: BackboneSpec
    projection: torch.Tensor

    @property
    def dtype(self) -> torch.dtype:
        return self.projection.dtype

    @property
    def has_identity_projection(self) -> bool:
        return (
            self.spec.dim == self.spec.vision_dim
            and torch.equal(self.projection, torch.eye(self.spec.dim, dtype=self.projection.dtype))
        )

    @abstractmethod
    def tokenize(self, text: str) -> list:
        """Text to the encoder's token ids."""

    @abstractmethod
    def _text_features(self, ids: Sequence[int]) -> torch.Tensor:
        """Unnormalized joint-space feature of a token id sequence."""

    @abstractmethod
    def _image_features(self, image) -> PatchFeatureSet:
        """Vision tokens and attention for a raw image."""

    @abstractmethod
    def load_image(self, path: Union[str, Path]):
        """Read an image (or synthetic patch descriptor) from disk."""

    @abstractmethod
    def weights_checksum(self) -> str:
        """SHA-256 over every frozen weight."""

    def encode_text(self, tokens: Sequence[int]) -> TextEmbedding:
        ids = [int(t) for t in tokens]
        if not ids:
            raise InvalidArgumentException("Cannot encode an empty token sequence")
        if len(ids) > self.spec.max_text_len:
            logger.warning(f"Text of {len(ids)} tokens truncated to {self.spec.max_text_len}")
            ids = ids[:self.spec.max_text_len]
        for t in ids:
            if t < 0 or t >= self.spec.vocab_size:
                raise InvalidArgumentException(f"Token id {t} outside vocabulary of {self.spec.vocab_size}")

        with torch.no_grad():
            vector = normalize_rows(self._text_features(ids))
        return TextEmbedding(vector=vector)

    def encode_caption(self, text: str) -> TextEmbedding:
        return self.encode_text(self.tokenize(text))

    def encode_image_patches(self, image) -> PatchFeatureSet:
        if isinstance(image, PatchFeatureSet):
            patches = image
        else:
            with torch.no_grad():
                patches = self._image_features(image)
        self.validate_patches(patches)
        return patches

    def validate_patches(self, p: PatchFeatureSet):
        expected = self.spec.n_patches + 1
        if p.tokens.dim() != 2 or p.tokens.shape != (expected, self.spec.vision_dim):
            raise InvalidArgumentException(
                f"Patch tokens must have shape ({expected}, {self.spec.vision_dim}), got {tuple(p.tokens.shape)}"
            )
        if p.attention.shape != (expected, expected):
            raise InvalidArgumentException(
                f"Attention must have shape ({expected}, {expected}), got {tuple(p.attention.shape)}"
            )

    def project_patches(self, p: PatchFeatureSet) -> ProjectedPatchSet:
        """I_p' = Linear(I_p): one shared D_v -> D map applied to every token row."""
        if p.tokens.dim() != 2 or p.tokens.shape[1] != self.projection.shape[0]:
            raise InvalidArgumentException(
                f"Patch tokens of width {p.tokens.shape[-1]} do not match projection input {self.projection.shape[0]}"
            )
        return ProjectedPatchSet(tokens=p.tokens.to(self.projection.dtype) @ self.projection)

    def image_global_embedding(self, image) -> torch.Tensor:
        """Normalized global image embedding used for reranking."""
        if isinstance(image, ProjectedPatchSet):
            projected = image
        else:
            projected = self.project_patches(self.encode_image_patches(image))
        return normalize_rows(projected.global_row)
