"""
Tiny frozen causal transformer used as the toy language model.

Weights are drawn from a generator seeded with `seed` in a fixed order:
token embeddings, position embeddings, then per block the query, key, value,
output, and two feed-forward matrices, and finally the output head. Blocks are
pre-norm with parameter-free layer norms.
"""

import hashlib
import math
from typing import Dict, Optional, Sequence

import torch
import torch.nn.functional as F

from langmodel.common import LanguageModel, LanguageModelSpec
from langmodel.tokenizer import ToyTokenizer
from utils.errors import InvalidArgumentException
from utils.logging import get_logger

logger = get_logger("langmodel.toy")


class ToyLanguageModel(LanguageModel):
    def __init__(
        self,
        tokenizer: Optional[ToyTokenizer] = None,
        vocab_size: Optional[int] = None,
        embed_dim: int = 32,
        n_blocks: int = 2,
        n_heads: int = 4,
        max_gen_len: int = 20,
        max_positions: int = 128,
        seed: int = 3,
        dtype: torch.dtype = torch.float64,
        bos_id: Optional[int] = None,
        eos_id: Optional[int] = None,
    ):
        if tokenizer is None and vocab_size is None:
            tokenizer = ToyTokenizer.build()
        self.tokenizer = tokenizer
        vocab_size = len(tokenizer) if tokenizer is not None else vocab_size

        if embed_dim % n_heads != 0:
            raise InvalidArgumentException(f"embed_dim {embed_dim} not divisible by {n_heads} heads")
        if max_positions <= max_gen_len:
            raise InvalidArgumentException("max_positions must exceed max_gen_len")

        self.spec = LanguageModelSpec(
            embed_dim=embed_dim,
            vocab_size=vocab_size,
            max_gen_len=max_gen_len,
            bos_id=bos_id if bos_id is not None else (tokenizer.bos_id if tokenizer else 0),
            eos_id=eos_id if eos_id is not None else (tokenizer.eos_id if tokenizer else vocab_size - 1),
            pad_id=tokenizer.pad_id if tokenizer else 0,
            name="toy",
        )
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.max_positions = max_positions
        self.seed = seed
        self.weights = self._init_weights(vocab_size, embed_dim, n_blocks, max_positions, seed, dtype)
        logger.debug(f"Toy language model ready (D_l={embed_dim}, V={vocab_size}, blocks={n_blocks})")

    @staticmethod
    def _init_weights(vocab_size, dim, n_blocks, max_positions, seed, dtype) -> Dict[str, torch.Tensor]:
        g = torch.Generator().manual_seed(seed)

        def draw(*shape, scale=1.0):
            return (torch.randn(shape, generator=g, dtype=torch.float64) * scale).to(dtype)

        weights = {
            "tok_emb": draw(vocab_size, dim),
            "pos_emb": draw(max_positions, dim, scale=0.1),
        }
        for b in range(n_blocks):
            for name in ("wq", "wk", "wv", "wo"):
                weights[f"block{b}.{name}"] = draw(dim, dim, scale=1 / math.sqrt(dim))
            weights[f"block{b}.w1"] = draw(dim, 4 * dim, scale=1 / math.sqrt(dim))
            weights[f"block{b}.w2"] = draw(4 * dim, dim, scale=1 / math.sqrt(4 * dim))
        weights["w_out"] = draw(dim, vocab_size, scale=1 / math.sqrt(dim))
        return weights

    @property
    def dtype(self) -> torch.dtype:
        return self.weights["tok_emb"].dtype

    def embed_ids(self, ids: Sequence[int]) -> torch.Tensor:
        self._check_ids(ids)
        return self.weights["tok_emb"][torch.tensor(list(ids), dtype=torch.long)]

    def _block(self, x: torch.Tensor, b: int, causal: torch.Tensor) -> torch.Tensor:
        w = self.weights
        batch, length, dim = x.shape
        head_dim = dim // self.n_heads

        h = F.layer_norm(x, (dim,))
        q = (h @ w[f"block{b}.wq"]).view(batch, length, self.n_heads, head_dim).transpose(1, 2)
        k = (h @ w[f"block{b}.wk"]).view(batch, length, self.n_heads, head_dim).transpose(1, 2)
        v = (h @ w[f"block{b}.wv"]).view(batch, length, self.n_heads, head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(head_dim)
        scores = scores.masked_fill(causal, float("-inf"))
        attended = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(batch, length, dim)
        x = x + attended @ w[f"block{b}.wo"]

        h = F.layer_norm(x, (dim,))
        return x + F.gelu(h @ w[f"block{b}.w1"]) @ w[f"block{b}.w2"]

    def forward_logits(self, prefix_rows: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        prefix_rows = self._check_prefix(prefix_rows)
        n_prefix = prefix_rows.shape[1]
        total = n_prefix + ids.shape[1]
        if total > self.max_positions:
            raise InvalidArgumentException(f"Sequence of {total} positions exceeds {self.max_positions}")

        x = torch.cat([prefix_rows.to(self.dtype), self.weights["tok_emb"][ids]], dim=1)
        x = x + self.weights["pos_emb"][:total]
        causal = torch.triu(torch.ones((total, total), dtype=torch.bool), diagonal=1)
        for b in range(self.n_blocks):
            x = self._block(x, b, causal)

        x = F.layer_norm(x, (x.shape[-1],))
        return x[:, n_prefix:] @ self.weights["w_out"]

    def weights_checksum(self) -> str:
        digest = hashlib.sha256()
        for key in sorted(self.weights):
            digest.update(self.weights[key].contiguous().numpy().tobytes())
        return digest.hexdigest()
