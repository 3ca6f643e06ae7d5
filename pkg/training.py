"""
Text-only reconstruction training of the adaptor.

Each caption embedding is copied N_cr times with fresh noise, decoded into a
prefix by the adaptor, and scored by the frozen language model on the caption
tokens followed by eos. Only adaptor parameters receive gradient updates.
"""

import hashlib
import json
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import torch

from adaptor import AdaptorDecoder, inject_region_noise_batch
from backbone.common import Backbone
from langmodel.common import LanguageModel, TokenSequence
from utils.config import NoiseConfig, TrainConfig
from utils.errors import (
    CorpusIOException,
    FrozenWeightsException,
    InvalidArgumentException,
    InvalidCorpusException,
    NumericFailureException,
)
from utils.logging import get_logger, log_epoch_result, log_performance
from utils.resilience import CheckpointKeeper

logger = get_logger("training")

# {single, multiple} region tokens x {with, without} noise
NOISE_PRESETS = {
    "single_wo_noise": {"n_cr": 1, "noisy": False},
    "single_w_noise": {"n_cr": 1, "noisy": True},
    "multiple_wo_noise": {"n_cr": None, "noisy": False},
    "multiple_w_noise": {"n_cr": None, "noisy": True},
}


def preset_noise_config(name: str, base: NoiseConfig) -> NoiseConfig:
    if name not in NOISE_PRESETS:
        raise InvalidArgumentException(f"Unknown training preset '{name}'")
    preset = NOISE_PRESETS[name]
    return base.model_copy(update={
        "n_cr": preset["n_cr"] or base.n_cr,
        "sigma": base.sigma if preset["noisy"] else 0.0,
    })


@dataclass
class TextCorpus:
    captions: List[str]
    tokenized: List[TokenSequence]
    source_tag: str
    kept: int = 0
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.captions)

    def corpus_hash(self) -> str:
        digest = hashlib.sha256()
        for caption in self.captions:
            digest.update(caption.encode("utf-8"))
            digest.update(b"\n")
        return digest.hexdigest()

    def stats(self) -> Dict:
        return {"source": self.source_tag, "kept": self.kept, "dropped": self.dropped}


def read_caption_lines(path: Union[str, Path]) -> List[str]:
    """Captions from plain text lines or JSON lines with a "caption" field."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8-sig")
    except (OSError, UnicodeDecodeError) as e:
        raise CorpusIOException(str(path), str(e), e)

    lines = [line.strip() for line in text.splitlines()]
    lines = [line for line in lines if line]
    if lines and lines[0].startswith("{"):
        captions = []
        for n, line in enumerate(lines, 1):
            try:
                captions.append(str(json.loads(line)["caption"]))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise CorpusIOException(str(path), f"line {n} is not a caption record", e)
        return captions
    return lines


def corpus_from_captions(
    captions: Sequence[str],
    tokenizer,
    max_words: int = 15,
    source_tag: str = "memory",
) -> TextCorpus:
    kept_captions, tokenized = [], []
    dropped = 0
    for caption in captions:
        if len(caption.split()) > max_words:
            dropped += 1
            continue
        ids = tokenizer.encode(caption)
        if not ids:
            dropped += 1
            continue
        kept_captions.append(caption)
        tokenized.append(TokenSequence(ids=ids, text=caption))

    if not kept_captions:
        raise InvalidCorpusException(source_tag, 0, dropped)
    logger.info(f"Corpus {source_tag}: {len(kept_captions)} captions kept, {dropped} dropped")
    return TextCorpus(kept_captions, tokenized, source_tag, len(kept_captions), dropped)


def load_corpus(path: Union[str, Path], tokenizer, max_words: int = 15) -> TextCorpus:
    return corpus_from_captions(read_caption_lines(path), tokenizer, max_words, str(path))


def reconstruction_loss(prefix, target, lm: LanguageModel) -> torch.Tensor:
    """-(1/|t|) * log P(t | E); averaged per token."""
    ids = target.ids if isinstance(target, TokenSequence) else list(target)
    if not ids:
        raise InvalidArgumentException("Target sequence is empty")
    return -lm.sequence_log_prob(prefix, ids) / len(ids)


def training_targets(corpus: TextCorpus, lm: LanguageModel) -> List[List[int]]:
    limit = lm.spec.max_gen_len
    targets = []
    for seq in corpus.tokenized:
        ids = list(seq.ids)[:limit - 1] + [lm.spec.eos_id]
        targets.append(ids)
    return targets


class EmbeddingCache:
    """Text embeddings of a corpus under a frozen backbone, optionally persisted."""

    def __init__(self, cache_dir: Optional[Union[str, Path]] = None):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._memory: Dict[str, torch.Tensor] = {}

    @staticmethod
    def key(corpus: TextCorpus, backbone: Backbone) -> str:
        return hashlib.sha256(f"{corpus.corpus_hash()}:{backbone.weights_checksum()}".encode()).hexdigest()

    def get(self, corpus: TextCorpus, backbone: Backbone) -> torch.Tensor:
        key = self.key(corpus, backbone)
        if key in self._memory:
            return self._memory[key]

        path = self.cache_dir / f"text_emb_{key[:16]}.pt" if self.cache_dir else None
        if path is not None and path.exists():
            embeddings = torch.load(path)
            logger.debug(f"Loaded {embeddings.shape[0]} cached text embeddings from {path}")
        else:
            embeddings = encode_corpus(corpus, backbone)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                torch.save(embeddings, path)

        self._memory[key] = embeddings
        return embeddings


def encode_corpus(corpus: TextCorpus, backbone: Backbone, indices: Optional[Sequence[int]] = None) -> torch.Tensor:
    indices = range(len(corpus)) if indices is None else indices
    return torch.stack([backbone.encode_caption(corpus.captions[i]).vector for i in indices])


@dataclass
class TrainReport:
    losses: List[float]
    wall_time: float
    checkpoint_path: Optional[str]
    config: Dict
    corpus_stats: Dict
    backbone_checksum: str = ""
    lm_checksum: str = ""
    steps: int = 0
    extra: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path


def build_adaptor(cfg: TrainConfig, backbone: Backbone, lm: LanguageModel) -> AdaptorDecoder:
    return AdaptorDecoder(
        dim=backbone.spec.dim,
        lm_dim=lm.spec.embed_dim,
        n_q=cfg.adaptor.n_q,
        n_heads=cfg.adaptor.n_heads,
        ffn_mult=cfg.adaptor.ffn_mult,
        seed=cfg.adaptor.seed,
        dtype=backbone.dtype,
    )


@contextmanager
def execution_context(deterministic: bool) -> Iterator[None]:
    """Single-context execution: deterministic torch kernels on one intra-op thread."""
    if not deterministic:
        yield
        return
    previous_mode = torch.are_deterministic_algorithms_enabled()
    previous_threads = torch.get_num_threads()
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous_mode)
        torch.set_num_threads(previous_threads)


def train(
    corpus: TextCorpus,
    cfg: TrainConfig,
    backbone: Backbone,
    lm: LanguageModel,
    checkpoint_path: Optional[Union[str, Path]] = None,
    adaptor: Optional[AdaptorDecoder] = None,
    cache: Optional[EmbeddingCache] = None,
) -> Tuple[AdaptorDecoder, TrainReport]:
    """Optimize the adaptor on corpus; backbone and lm stay bit-identical."""
    with execution_context(cfg.deterministic):
        return _train(corpus, cfg, backbone, lm, checkpoint_path, adaptor, cache)


def _train(
    corpus: TextCorpus,
    cfg: TrainConfig,
    backbone: Backbone,
    lm: LanguageModel,
    checkpoint_path: Optional[Union[str, Path]],
    adaptor: Optional[AdaptorDecoder],
    cache: Optional[EmbeddingCache],
) -> Tuple[AdaptorDecoder, TrainReport]:
    if len(corpus) == 0:
        raise InvalidCorpusException(corpus.source_tag)
    adaptor = adaptor or build_adaptor(cfg, backbone, lm)
    if adaptor.hparams["dim"] != backbone.spec.dim or adaptor.hparams["lm_dim"] != lm.spec.embed_dim:
        raise InvalidArgumentException("Adaptor dimensions do not match backbone and language model")

    start_time = time.time()
    backbone_checksum = backbone.weights_checksum()
    lm_checksum = lm.weights_checksum()
    header_extra = {
        "backbone_spec": backbone.spec,
        "lm_spec": lm.spec,
        "noise": cfg.noise,
        "extra": {"train_seed": cfg.seed},
    }

    targets = training_targets(corpus, lm)
    embeddings = None
    if cfg.embedding_cache:
        embeddings = (cache or EmbeddingCache(cfg.cache_dir)).get(corpus, backbone)

    optimizer = torch.optim.Adam(
        adaptor.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=0.0,
    )
    shuffle_gen = torch.Generator().manual_seed(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
    keeper = CheckpointKeeper()

    n = len(corpus)
    losses = []
    step = 0
    adaptor.train()
    logger.info(
        f"Training adaptor on {n} captions for {cfg.epochs} epochs "
        f"(batch {cfg.batch_size}, lr {cfg.learning_rate}, sigma {cfg.noise.sigma}, N_cr {cfg.noise.n_cr}, "
        f"deterministic {cfg.deterministic})"
    )

    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(n, generator=shuffle_gen).tolist()
        per_sample: List[float] = []

        for begin in range(0, n, cfg.batch_size):
            idx = order[begin:begin + cfg.batch_size]
            t_c = embeddings[idx] if embeddings is not None else encode_corpus(corpus, backbone, idx)
            rows = inject_region_noise_batch(t_c, cfg.noise, noise_gen)

            nll = lm.batch_token_nll(adaptor(rows), [targets[i] for i in idx])
            loss = nll.mean()

            if not torch.isfinite(loss):
                written = keeper.dump(adaptor, Path(checkpoint_path) if checkpoint_path else None, header_extra)
                raise NumericFailureException(
                    "train",
                    f"loss became {float(loss)} at epoch {epoch}, step {step}",
                    {"epoch": epoch, "step": step, "last_good_step": keeper.step,
                     "last_good_checkpoint": str(written) if written else None},
                )
            keeper.remember(adaptor, step)

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            per_sample.extend(nll.detach().tolist())

        epoch_mean = math.fsum(per_sample) / len(per_sample)
        losses.append(epoch_mean)
        log_epoch_result(logger, epoch, epoch_mean, len(per_sample))

    adaptor.eval()
    if backbone.weights_checksum() != backbone_checksum:
        raise FrozenWeightsException("backbone")
    if lm.weights_checksum() != lm_checksum:
        raise FrozenWeightsException("language model")

    written_path = None
    if checkpoint_path is not None:
        from checkpoint import save_checkpoint
        written_path = str(save_checkpoint(adaptor, checkpoint_path, **header_extra))

    wall_time = time.time() - start_time
    log_performance(logger, "train", wall_time, {"epochs": cfg.epochs, "steps": step})
    report = TrainReport(
        losses=losses,
        wall_time=wall_time,
        checkpoint_path=written_path,
        config=cfg.model_dump(mode="json"),
        corpus_stats=corpus.stats(),
        backbone_checksum=backbone_checksum,
        lm_checksum=lm_checksum,
        steps=step,
    )
    return adaptor, report


def image_side_loss(
    adaptor: AdaptorDecoder,
    lm: LanguageModel,
    region_rows: torch.Tensor,
    targets: Sequence[Sequence[int]],
) -> float:
    """Mean reconstruction loss when the adaptor is fed image-side rows (B, N, D)."""
    with torch.no_grad():
        nll = lm.batch_token_nll(adaptor(region_rows), [list(t) for t in targets])
    return math.fsum(nll.tolist()) / len(targets)


__all__ = [
    "EmbeddingCache",
    "NOISE_PRESETS",
    "TextCorpus",
    "TrainReport",
    "build_adaptor",
    "corpus_from_captions",
    "image_side_loss",
    "load_corpus",
    "preset_noise_config",
    "read_caption_lines",
    "reconstruction_loss",
    "train",
]
