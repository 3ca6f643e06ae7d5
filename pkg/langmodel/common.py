"""
Frozen autoregressive language model interface, prefix-conditioned scoring
and deterministic beam search.
"""

import hashlib
import json
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import torch

from utils.errors import InvalidArgumentException
from utils.logging import get_logger

logger = get_logger("langmodel")


@dataclass(frozen=True)
class LanguageModelSpec:
    embed_dim: int
    vocab_size: int
    max_gen_len: int
    bos_id: int
    eos_id: int
    pad_id: int = 0
    name: str = "toy"

    def __post_init__(self):
        if self.embed_dim < 1 or self.vocab_size < 2 or self.max_gen_len < 1:
            raise InvalidArgumentException(
                f"Invalid language model dimensions (D_l={self.embed_dim}, V={self.vocab_size}, "
                f"max_gen_len={self.max_gen_len})"
            )
        for name in ("bos_id", "eos_id", "pad_id"):
            value = getattr(self, name)
            if not 0 <= value < self.vocab_size:
                raise InvalidArgumentException(f"{name}={value} outside vocabulary of {self.vocab_size}")

    def spec_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


@dataclass
class TokenSequence:
    """Token ids without the terminating eos; score is the summed log-probability."""
    ids: List[int]
    text: str = ""
    score: Optional[float] = None

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class PrefixEmbedding:
    """Soft prompt E of shape (N, D_l), or (B, N, D_l) for a batch."""
    rows: torch.Tensor

    def __len__(self) -> int:
        return self.rows.shape[-2]


@dataclass(order=True)
class _Hypothesis:
    sort_key: tuple = field(init=False, repr=False)
    score: float
    ids: tuple

    def __post_init__(self):
        self.sort_key = (-self.score, self.ids)


def _prefix_rows(prefix) -> torch.Tensor:
    return prefix.rows if isinstance(prefix, PrefixEmbedding) else prefix


class LanguageModel(ABC):
    """Frozen decoder; scoring is differentiable with respect to the prefix only."""

    spec: LanguageModelSpec
    tokenizer = None

    @property
    @abstractmethod
    def dtype(self) -> torch.dtype:
        """Floating dtype of the embeddings."""

    @abstractmethod
    def forward_logits(self, prefix_rows: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        """Logits (B, L, V) for the ids (B, L) following prefix rows (B, N, D_l)."""

    @abstractmethod
    def embed_ids(self, ids: Sequence[int]) -> torch.Tensor:
        """Input embeddings (L, D_l) of a token id sequence."""

    @abstractmethod
    def weights_checksum(self) -> str:
        """SHA-256 over every frozen weight."""

    def decode(self, ids: Sequence[int]) -> str:
        if self.tokenizer is None:
            return " ".join(str(int(i)) for i in ids)
        return self.tokenizer.decode(ids)

    def encode(self, text: str) -> List[int]:
        if self.tokenizer is None:
            raise InvalidArgumentException("Language model has no tokenizer")
        return self.tokenizer.encode(text)

    def _check_prefix(self, rows: torch.Tensor) -> torch.Tensor:
        if rows.dim() not in (2, 3) or rows.shape[-1] != self.spec.embed_dim:
            raise InvalidArgumentException(
                f"Prefix rows must end in dimension {self.spec.embed_dim}, got {tuple(rows.shape)}"
            )
        return rows

    def _check_ids(self, ids: Sequence[int]):
        for t in ids:
            if not 0 <= int(t) < self.spec.vocab_size:
                raise InvalidArgumentException(f"Token id {t} outside vocabulary of {self.spec.vocab_size}")

    def next_token_logits(self, prefix, generated: Sequence[int]) -> torch.Tensor:
        """Logits over the vocabulary for the token after bos + generated."""
        rows = self._check_prefix(_prefix_rows(prefix))
        if rows.dim() != 2:
            raise InvalidArgumentException("next_token_logits takes a single prefix of shape (N, D_l)")
        if len(generated) >= self.spec.max_gen_len:
            raise InvalidArgumentException(
                f"Generated length {len(generated)} reached max_gen_len {self.spec.max_gen_len}"
            )
        self._check_ids(generated)

        ids = torch.tensor([[self.spec.bos_id, *generated]], dtype=torch.long)
        return self.forward_logits(rows[None], ids)[0, -1]

    def sequence_log_prob(self, prefix, target: Sequence[int]) -> torch.Tensor:
        """Sum of log p(t_i | E, t_<i); a 0-dim tensor differentiable in the prefix."""
        rows = self._check_prefix(_prefix_rows(prefix))
        if len(target) == 0:
            raise InvalidArgumentException("Target sequence is empty")
        self._check_ids(target)

        ids = torch.tensor([[self.spec.bos_id, *target]], dtype=torch.long)
        logits = self.forward_logits(rows[None] if rows.dim() == 2 else rows, ids)[:, :-1]
        log_probs = torch.log_softmax(logits, dim=-1)
        picked = log_probs[0].gather(-1, torch.tensor(list(target), dtype=torch.long)[:, None])
        return picked.sum()

    def batch_token_nll(self, prefix_rows: torch.Tensor, targets: Sequence[Sequence[int]]) -> torch.Tensor:
        """Per-sample mean negative log-likelihood (B,) for a batch of ragged targets."""
        prefix_rows = self._check_prefix(_prefix_rows(prefix_rows))
        if prefix_rows.dim() != 3 or prefix_rows.shape[0] != len(targets):
            raise InvalidArgumentException(
                f"Batch prefix of shape {tuple(prefix_rows.shape)} does not match {len(targets)} targets"
            )
        lengths = [len(t) for t in targets]
        if min(lengths) == 0:
            raise InvalidArgumentException("Target sequence is empty")

        width = max(lengths)
        padded = torch.full((len(targets), width), self.spec.pad_id, dtype=torch.long)
        mask = torch.zeros((len(targets), width), dtype=prefix_rows.dtype)
        for b, target in enumerate(targets):
            self._check_ids(target)
            padded[b, :len(target)] = torch.tensor(list(target), dtype=torch.long)
            mask[b, :len(target)] = 1

        bos = torch.full((len(targets), 1), self.spec.bos_id, dtype=torch.long)
        logits = self.forward_logits(prefix_rows, torch.cat([bos, padded], dim=1))[:, :-1]
        log_probs = torch.log_softmax(logits, dim=-1).gather(-1, padded[..., None])[..., 0]
        lengths_t = torch.tensor(lengths, dtype=prefix_rows.dtype)
        return -(log_probs * mask).sum(dim=1) / lengths_t

    def beam_search(
        self,
        prefix,
        n_beams: int,
        max_len: Optional[int] = None,
        length_normalize: bool = False,
    ) -> TokenSequence:
        """Deterministic beam search from bos.

        Every step expands each live hypothesis by all tokens and keeps the
        n_beams best candidates; ties go to the lexicographically smaller id
        sequence. Candidates ending in eos are finished. The search stops when
        no hypothesis is live, max_len is reached, or the best finished score
        beats every live score.
        """
        if n_beams < 1:
            raise InvalidArgumentException(f"n_beams must be at least 1, got {n_beams}")
        max_len = self.spec.max_gen_len if max_len is None else max_len
        if not 1 <= max_len <= self.spec.max_gen_len:
            raise InvalidArgumentException(f"max_len must be in [1, {self.spec.max_gen_len}], got {max_len}")

        eos = self.spec.eos_id
        live = [_Hypothesis(score=0.0, ids=())]
        finished: List[_Hypothesis] = []

        with torch.no_grad():
            for _ in range(max_len):
                candidates = []
                for hyp in live:
                    logits = self.next_token_logits(prefix, list(hyp.ids))
                    log_probs = torch.log_softmax(logits.to(torch.float64), dim=-1).tolist()
                    for token, lp in enumerate(log_probs):
                        candidates.append(_Hypothesis(score=hyp.score + lp, ids=hyp.ids + (token,)))

                candidates.sort()
                live = []
                for cand in candidates[:n_beams]:
                    if cand.ids[-1] == eos:
                        finished.append(cand)
                    else:
                        live.append(cand)

                if not live:
                    break
                # Summed log-probs never increase, so the finished leader is final; not so for per-token scores
                if not length_normalize and finished and max(h.score for h in finished) > max(h.score for h in live):
                    break

        finished.extend(live)
        if length_normalize:
            best = min(finished, key=lambda h: (-h.score / len(h.ids), h.ids))
        else:
            best = min(finished)

        ids = [t for t in best.ids if t != eos]
        return TokenSequence(ids=ids, text=self.decode(ids), score=best.score)
