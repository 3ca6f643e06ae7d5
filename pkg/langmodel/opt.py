"""
Real OPT decoder through transformers, consuming prefix rows as inputs_embeds.
"""

from pathlib import Path
from typing import List, Sequence, Union

import torch

from langmodel.common import LanguageModel, LanguageModelSpec
from utils.errors import BackendUnavailableException
from utils.logging import get_logger
from utils.resilience import retry_io

logger = get_logger("langmodel.opt")


class HuggingFaceTokenizer:
    """Adapter exposing the toy tokenizer surface over a transformers tokenizer."""

    def __init__(self, tokenizer):
        self._tokenizer = tokenizer
        self.bos_id = tokenizer.bos_token_id
        self.eos_id = tokenizer.eos_token_id
        self.pad_id = tokenizer.pad_token_id if tokenizer.pad_token_id is not None else tokenizer.eos_token_id

    def __len__(self) -> int:
        return len(self._tokenizer)

    def encode(self, text: str) -> List[int]:
        return self._tokenizer(text, add_special_tokens=False)["input_ids"]

    def decode(self, ids: Sequence[int]) -> str:
        return self._tokenizer.decode(list(ids), skip_special_tokens=True).strip()


class OptLanguageModel(LanguageModel):
    def __init__(self, model_dir: Union[str, Path], max_gen_len: int = 20, dtype: torch.dtype = torch.float32):
        try:
            from transformers import AutoModelForCausalLM, AutoTokenizer
        except ImportError as e:
            raise BackendUnavailableException(
                "opt", "transformers not installed. Run: pip install transformers>=4.40", e
            )

        model_dir = Path(model_dir)
        if not model_dir.exists():
            raise BackendUnavailableException("opt", f"weights not found at {model_dir}")

        try:
            self.model = self._load(AutoModelForCausalLM, model_dir).to(dtype).eval()
            self.tokenizer = HuggingFaceTokenizer(self._load(AutoTokenizer, model_dir))
        except OSError as e:
            raise BackendUnavailableException("opt", f"failed to load weights from {model_dir}", e)

        for param in self.model.parameters():
            param.requires_grad_(False)

        self.spec = LanguageModelSpec(
            embed_dim=self.model.config.hidden_size,
            vocab_size=self.model.config.vocab_size,
            max_gen_len=max_gen_len,
            bos_id=self.tokenizer.bos_id,
            eos_id=self.tokenizer.eos_id,
            pad_id=self.tokenizer.pad_id,
            name=f"opt:{model_dir.name}",
        )
        logger.info(f"Loaded OPT decoder from {model_dir} (D_l={self.spec.embed_dim})")

    @staticmethod
    @retry_io
    def _load(cls, model_dir: Path):
        return cls.from_pretrained(str(model_dir))

    @property
    def dtype(self) -> torch.dtype:
        return self.model.get_input_embeddings().weight.dtype

    def embed_ids(self, ids: Sequence[int]) -> torch.Tensor:
        self._check_ids(ids)
        return self.model.get_input_embeddings()(torch.tensor(list(ids), dtype=torch.long))

    def forward_logits(self, prefix_rows: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        prefix_rows = self._check_prefix(prefix_rows)
        token_rows = self.model.get_input_embeddings()(ids)
        inputs = torch.cat([prefix_rows.to(self.dtype), token_rows], dim=1)
        logits = self.model(inputs_embeds=inputs).logits
        return logits[:, prefix_rows.shape[1]:]

    def weights_checksum(self) -> str:
        import hashlib
        digest = hashlib.sha256()
        for _, tensor in sorted(self.model.state_dict().items()):
            digest.update(tensor.detach().cpu().contiguous().float().numpy().tobytes())
        return digest.hexdigest()
