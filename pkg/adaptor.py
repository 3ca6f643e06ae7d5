"""
Region noise injection and the learnable-query adaptor decoder that maps
region features to a language-model prefix.
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Mapping, Optional, Union

import torch
import torch.nn as nn

from backbone.common import TextEmbedding, normalize_rows
from langmodel.common import PrefixEmbedding
from utils.config import NoiseConfig
from utils.errors import InvalidArgumentException, NumericFailureException
from utils.logging import get_logger

logger = get_logger("adaptor")


@dataclass(frozen=True)
class RegionFeatureSequence:
    """N rows of dimension D (or a batch (B, N, D)) standing in for image regions."""
    rows: torch.Tensor

    def __len__(self) -> int:
        return self.rows.shape[-2]


def draw_noise(shape, distribution: str, sigma: float, generator: torch.Generator,
               dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Zero-mean noise with per-dimension standard deviation sigma."""
    if sigma < 0 or not math.isfinite(sigma):
        raise InvalidArgumentException(f"Noise sigma must be a finite non-negative number, got {sigma}")
    if distribution == "gaussian":
        noise = torch.randn(shape, generator=generator, dtype=torch.float64)
    elif distribution == "uniform":
        # U(-a, a) has std a / sqrt(3)
        noise = (torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1) * math.sqrt(3)
    else:
        raise InvalidArgumentException(f"Unknown noise distribution '{distribution}'")
    return (noise * sigma).to(dtype)


def inject_region_noise_batch(t_c: torch.Tensor, cfg: NoiseConfig, generator: torch.Generator) -> torch.Tensor:
    """(B, D) text embeddings to (B, N_cr, D) perturbed, re-normalized rows."""
    if t_c.dim() != 2:
        raise InvalidArgumentException(f"Expected a (B, D) batch, got {tuple(t_c.shape)}")
    if cfg.n_cr < 1:
        raise InvalidArgumentException(f"n_cr must be at least 1, got {cfg.n_cr}")

    batch, dim = t_c.shape
    noise = draw_noise((batch, cfg.n_cr, dim), cfg.distribution, cfg.sigma, generator, t_c.dtype)
    if cfg.sigma == 0:
        return t_c[:, None, :].expand(batch, cfg.n_cr, dim).clone()
    return normalize_rows(t_c[:, None, :] + noise)


def inject_region_noise(t_c, cfg: NoiseConfig, generator: torch.Generator) -> RegionFeatureSequence:
    """T_r[k] = L2Norm(T_c + n_k) for k < N_cr, with independent n_k."""
    vector = t_c.vector if isinstance(t_c, TextEmbedding) else t_c
    return RegionFeatureSequence(rows=inject_region_noise_batch(vector[None, :], cfg, generator)[0])


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with an optional per-head output mask."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise InvalidArgumentException(f"dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, head_mask: Optional[torch.Tensor] = None):
        batch, n_q, dim = x.shape
        n_k = memory.shape[1]

        q = self.query(x).view(batch, n_q, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.key(memory).view(batch, n_k, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.value(memory).view(batch, n_k, self.n_heads, self.head_dim).transpose(1, 2)

        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        attended = weights @ v
        if head_mask is not None:
            attended = attended * head_mask.to(attended.dtype).view(1, self.n_heads, 1, 1)
        return self.out(attended.transpose(1, 2).reshape(batch, n_q, dim))


class AdaptorDecoder(nn.Module):
    """One transformer decoder block over N_q learnable queries plus an output MLP.

    The queries self-attend, cross-attend to the region rows (which are used
    as memory without normalization), pass a feed-forward layer, and the MLP
    lifts each of the N_q rows to the language model width.
    """

    def __init__(
        self,
        dim: int,
        lm_dim: int,
        n_q: int = 10,
        n_heads: int = 8,
        ffn_mult: int = 4,
        seed: int = 0,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if n_q < 1:
            raise InvalidArgumentException(f"n_q must be at least 1, got {n_q}")
        self.hparams = {
            "dim": dim, "lm_dim": lm_dim, "n_q": n_q, "n_heads": n_heads, "ffn_mult": ffn_mult, "seed": seed,
        }
        hidden = max(dim, lm_dim)

        self.queries = nn.Parameter(torch.zeros((n_q, dim)))
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, n_heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim))
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.Tanh(), nn.Linear(hidden, lm_dim))

        self.to(dtype)
        self._init_parameters(seed)
        self.provenance: Dict = {}

    def _init_parameters(self, seed: int):
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, param in self.named_parameters():
                if "norm" in name:
                    param.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    param.zero_()
                else:
                    fan_in = param.shape[-1]
                    draw = torch.randn(param.shape, generator=generator, dtype=torch.float64)
                    param.copy_(draw / math.sqrt(fan_in))

    @property
    def n_q(self) -> int:
        return self.queries.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.queries.dtype

    def forward(self, rows: torch.Tensor, head_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        single = rows.dim() == 2
        if single:
            rows = rows[None]
        if rows.dim() != 3 or rows.shape[-1] != self.queries.shape[-1]:
            raise InvalidArgumentException(
                f"Region rows must have width {self.queries.shape[-1]}, got {tuple(rows.shape)}"
            )
        if rows.shape[1] < 1:
            raise InvalidArgumentException("Region sequence is empty")

        memory = rows.to(self.dtype)
        q = self.queries[None].expand(memory.shape[0], -1, -1)
        h = self.norm_self(q)
        q = q + self.self_attn(h, h)
        q = q + self.cross_attn(self.norm_cross(q), memory, head_mask)
        q = q + self.ffn(self.norm_ffn(q))
        out = self.mlp(q)
        return out[0] if single else out


# Parameters of the adaptor decoder
AdaptorParams = AdaptorDecoder


def adaptor_forward(input_seq, params: AdaptorDecoder, head_mask: Optional[torch.Tensor] = None) -> PrefixEmbedding:
    rows = input_seq.rows if isinstance(input_seq, RegionFeatureSequence) else input_seq
    return PrefixEmbedding(rows=params(rows, head_mask))


def adaptor_gradients(
    input_seq,
    params: AdaptorDecoder,
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    head_mask: Optional[torch.Tensor] = None,
) -> Dict[str, torch.Tensor]:
    """Gradient of loss_fn(E) for every trainable tensor, keyed by parameter name."""
    named = [(name, p) for name, p in params.named_parameters() if p.requires_grad]
    loss = loss_fn(adaptor_forward(input_seq, params, head_mask).rows)
    if not torch.is_tensor(loss):
        loss = torch.as_tensor(loss, dtype=params.dtype)

    if not torch.isfinite(loss).all():
        rows = input_seq.rows if isinstance(input_seq, RegionFeatureSequence) else input_seq
        raise NumericFailureException(
            "adaptor_gradients",
            f"loss is {float(loss)}",
            {"input_max_abs": float(rows.abs().max()), "n_rows": int(rows.shape[-2])},
        )

    if not loss.requires_grad:
        return {name: torch.zeros_like(p) for name, p in named}

    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(named, grads)
    }


def count_parameters(params: Union[nn.Module, Mapping[str, torch.Tensor], Iterable[torch.Tensor]]) -> int:
    if isinstance(params, nn.Module):
        return sum(p.numel() for p in params.parameters() if p.requires_grad)
    if isinstance(params, Mapping):
        return sum(t.numel() for t in params.values())
    return sum(t.numel() for t in params)
