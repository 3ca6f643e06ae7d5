"""Shared toy-stack fixtures."""

import pytest
import torch

from backbone import ToyBackbone
from backbone.synthetic import generate_synthetic_pairs
from langmodel import ToyLanguageModel, ToyTokenizer, synthetic_captions
from training import corpus_from_captions
from utils.config import SyntheticPairConfig


@pytest.fixture(scope="session")
def tokenizer():
    return ToyTokenizer.build(256)


@pytest.fixture(scope="session")
def backbone(tokenizer):
    return ToyBackbone(tokenizer=tokenizer)


@pytest.fixture(scope="session")
def small_backbone(tokenizer):
    """D = 8, six patches; fast enough for per-test training."""
    return ToyBackbone(tokenizer=tokenizer, dim=8, vision_dim=8, n_patches=6, n_heads=2)


@pytest.fixture(scope="session")
def lm(tokenizer):
    return ToyLanguageModel(tokenizer=tokenizer)


@pytest.fixture(scope="session")
def small_lm(tokenizer):
    return ToyLanguageModel(tokenizer=tokenizer, embed_dim=8, n_blocks=1, n_heads=2, max_gen_len=8, max_positions=64)


@pytest.fixture
def tiny_lm():
    """Factory for vocab-3 models without a tokenizer (bos 0, eos 2)."""
    def make(seed: int = 0, max_gen_len: int = 3):
        return ToyLanguageModel(vocab_size=3, embed_dim=4, n_blocks=1, n_heads=1,
                                max_gen_len=max_gen_len, max_positions=16, seed=seed)
    return make


@pytest.fixture(scope="session")
def captions():
    return synthetic_captions(64, seed=0)


@pytest.fixture(scope="session")
def corpus(captions, tokenizer):
    return corpus_from_captions(captions, tokenizer, source_tag="fixture")


@pytest.fixture(scope="session")
def synthetic_pairs(backbone):
    return generate_synthetic_pairs(backbone, SyntheticPairConfig(n_pairs=100, seed=0))


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(11)
