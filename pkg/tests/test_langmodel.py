import itertools
import math

import pytest
import torch

from langmodel import LanguageModelSpec, PrefixEmbedding, ToyLanguageModel, ToyTokenizer, load_language_model, synthetic_captions
from utils.config import LanguageModelConfig
from utils.errors import BackendUnavailableException, InvalidArgumentException


def _layer_norm(x):
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + 1e-5)


def _oracle_logits(seed, vocab, dim, n_blocks, n_heads, max_positions, prefix, ids):
    """Position-by-position re-implementation of the toy decoder."""
    g = torch.Generator().manual_seed(seed)
    draw = lambda *shape: torch.randn(shape, generator=g, dtype=torch.float64)
    tok = draw(vocab, dim)
    pos = draw(max_positions, dim) * 0.1
    blocks = []
    for _ in range(n_blocks):
        block = {name: draw(dim, dim) / math.sqrt(dim) for name in ("wq", "wk", "wv", "wo")}
        block["w1"] = draw(dim, 4 * dim) / math.sqrt(dim)
        block["w2"] = draw(4 * dim, dim) / math.sqrt(4 * dim)
        blocks.append(block)
    w_out = draw(dim, vocab) / math.sqrt(dim)

    x = torch.cat([prefix, tok[ids]])
    n = x.shape[0]
    x = x + pos[:n]
    hd = dim // n_heads
    for block in blocks:
        h = _layer_norm(x)
        q, k, v = h @ block["wq"], h @ block["wk"], h @ block["wv"]
        attended = torch.zeros_like(x)
        for head in range(n_heads):
            cols = slice(head * hd, (head + 1) * hd)
            for i in range(n):
                scores = torch.stack([q[i, cols] @ k[j, cols] / math.sqrt(hd) for j in range(i + 1)])
                weights = torch.softmax(scores, dim=0)
                attended[i, cols] = sum(weights[j] * v[j, cols] for j in range(i + 1))
        x = x + attended @ block["wo"]
        h = _layer_norm(x)
        x = x + torch.nn.functional.gelu(h @ block["w1"]) @ block["w2"]
    return (_layer_norm(x) @ w_out)[prefix.shape[0]:]


def _uniform_lm(vocab=5):
    lm = ToyLanguageModel(vocab_size=vocab, embed_dim=4, n_blocks=1, n_heads=1, max_gen_len=6, max_positions=16)
    lm.weights["w_out"].zero_()
    return lm


class TestToyTokenizer:
    def test_specials(self, tokenizer):
        assert tokenizer.id_to_token[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
        assert len(tokenizer) == 256

    def test_encode_decode(self, tokenizer):
        ids = tokenizer.encode("A red dog, on the grass!")
        assert tokenizer.decode(ids) == "a red dog on the grass"

    def test_unknown_word(self, tokenizer):
        assert tokenizer.encode("zebra") == [tokenizer.unk_id]
        assert tokenizer.decode([tokenizer.bos_id, tokenizer.unk_id, tokenizer.eos_id]) == "<unk>"

    def test_vocabulary_too_small(self):
        with pytest.raises(InvalidArgumentException):
            ToyTokenizer.build(16)

    def test_save_load(self, tokenizer, tmp_path):
        tokenizer.save(tmp_path / "vocab.json")
        assert ToyTokenizer.load(tmp_path / "vocab.json").id_to_token == tokenizer.id_to_token

    def test_synthetic_captions_in_vocabulary(self, tokenizer):
        captions = synthetic_captions(50, seed=4)
        assert captions == synthetic_captions(50, seed=4)
        for caption in captions:
            assert tokenizer.unk_id not in tokenizer.encode(caption)


class TestLanguageModelSpec:
    def test_ids_inside_vocabulary(self):
        with pytest.raises(InvalidArgumentException):
            LanguageModelSpec(embed_dim=4, vocab_size=3, max_gen_len=3, bos_id=0, eos_id=5)

    def test_vocabulary_size(self):
        with pytest.raises(InvalidArgumentException):
            LanguageModelSpec(embed_dim=4, vocab_size=1, max_gen_len=3, bos_id=0, eos_id=0)


class TestNextTokenLogits:
    def test_matches_oracle(self, lm):
        prefix = torch.zeros((2, 32), dtype=torch.float64)
        logits = lm.next_token_logits(PrefixEmbedding(prefix), [])
        expected = _oracle_logits(3, 256, 32, 2, 4, 128, prefix, [lm.spec.bos_id])[-1]
        torch.testing.assert_close(logits, expected, rtol=0, atol=1e-9)

    def test_matches_oracle_with_history(self, lm):
        prefix = torch.randn((3, 32), generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        logits = lm.next_token_logits(prefix, [10, 20])
        expected = _oracle_logits(3, 256, 32, 2, 4, 128, prefix, [lm.spec.bos_id, 10, 20])[-1]
        torch.testing.assert_close(logits, expected, rtol=0, atol=1e-9)

    def test_length_limit(self, tiny_lm):
        lm = tiny_lm()
        with pytest.raises(InvalidArgumentException):
            lm.next_token_logits(torch.zeros((1, 4), dtype=torch.float64), [1, 1, 1])

    def test_prefix_width(self, lm):
        with pytest.raises(InvalidArgumentException):
            lm.next_token_logits(torch.zeros((2, 31), dtype=torch.float64), [])

    def test_position_limit(self, small_lm):
        with pytest.raises(InvalidArgumentException):
            small_lm.next_token_logits(torch.zeros((64, 8), dtype=torch.float64), [])


class TestSequenceLogProb:
    def test_uniform_model(self):
        lm = _uniform_lm(5)
        prefix = torch.randn((2, 4), generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        for length in (1, 3, 5):
            value = float(lm.sequence_log_prob(prefix, [1] * length))
            assert value == pytest.approx(length * math.log(1 / 5), abs=1e-6)

    def test_per_step_oracle(self, lm):
        prefix = torch.randn((2, 32), generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        target = [7, 30, 2]
        expected = 0.0
        for i, t in enumerate(target):
            expected += float(torch.log_softmax(lm.next_token_logits(prefix, target[:i]), dim=-1)[t])
        assert float(lm.sequence_log_prob(prefix, target)) == pytest.approx(expected, abs=1e-9)

    def test_single_token_probabilities_sum_to_one(self, tiny_lm):
        lm = tiny_lm(seed=4)
        prefix = torch.randn((2, 4), generator=torch.Generator().manual_seed(4), dtype=torch.float64)
        total = sum(math.exp(float(lm.sequence_log_prob(prefix, [t]))) for t in range(3))
        assert total == pytest.approx(1.0, abs=1e-5)

    def test_differentiable_in_prefix(self, small_lm):
        prefix = torch.randn((2, 8), dtype=torch.float64, requires_grad=True)
        small_lm.sequence_log_prob(prefix, [5, 6]).backward()
        assert prefix.grad is not None and torch.isfinite(prefix.grad).all()

    def test_empty_target(self, small_lm):
        with pytest.raises(InvalidArgumentException):
            small_lm.sequence_log_prob(torch.zeros((1, 8), dtype=torch.float64), [])


class TestBatchTokenNll:
    def test_ragged_batch_matches_per_sample(self, small_lm):
        g = torch.Generator().manual_seed(3)
        prefixes = torch.randn((3, 2, 8), generator=g, dtype=torch.float64)
        targets = [[5, 6, 2], [9, 2], [10, 11, 12, 2]]
        nll = small_lm.batch_token_nll(prefixes, targets)
        for b, target in enumerate(targets):
            expected = -float(small_lm.sequence_log_prob(prefixes[b], target)) / len(target)
            assert float(nll[b]) == pytest.approx(expected, abs=1e-9)

    def test_batch_mismatch(self, small_lm):
        with pytest.raises(InvalidArgumentException):
            small_lm.batch_token_nll(torch.zeros((2, 2, 8), dtype=torch.float64), [[5]])


class TestBeamSearch:
    @pytest.mark.parametrize("seed", range(20))
    def test_full_width_matches_exhaustive_search(self, tiny_lm, seed):
        lm = tiny_lm(seed=seed)
        eos = lm.spec.eos_id
        prefix = torch.randn((2, 4), generator=torch.Generator().manual_seed(100 + seed), dtype=torch.float64)

        best_key, best_ids = None, None
        for length in (1, 2, 3):
            for ids in itertools.product(range(3), repeat=length):
                if eos in ids[:-1] or (length < 3 and ids[-1] != eos):
                    continue
                score = 0.0
                for i, t in enumerate(ids):
                    logits = lm.next_token_logits(prefix, list(ids[:i]))
                    score = score + torch.log_softmax(logits.to(torch.float64), dim=-1).tolist()[t]
                key = (-score, ids)
                if best_key is None or key < best_key:
                    best_key, best_ids = key, ids

        result = lm.beam_search(prefix, n_beams=27, max_len=3)
        assert result.ids == [t for t in best_ids if t != eos]
        assert result.score == pytest.approx(-best_key[0], abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_full_width_length_normalized_matches_exhaustive_search(self, tiny_lm, seed):
        lm = tiny_lm(seed=seed)
        eos = lm.spec.eos_id
        prefix = torch.randn((2, 4), generator=torch.Generator().manual_seed(200 + seed), dtype=torch.float64)

        best_key, best_ids = None, None
        for length in (1, 2, 3):
            for ids in itertools.product(range(3), repeat=length):
                if eos in ids[:-1] or (length < 3 and ids[-1] != eos):
                    continue
                score = 0.0
                for i, t in enumerate(ids):
                    logits = lm.next_token_logits(prefix, list(ids[:i]))
                    score = score + torch.log_softmax(logits.to(torch.float64), dim=-1).tolist()[t]
                key = (-score / length, ids)
                if best_key is None or key < best_key:
                    best_key, best_ids = key, ids

        result = lm.beam_search(prefix, n_beams=27, max_len=3, length_normalize=True)
        assert result.ids == [t for t in best_ids if t != eos]

    def test_greedy_matches_argmax_loop(self, small_lm):
        prefix = torch.randn((3, 8), generator=torch.Generator().manual_seed(6), dtype=torch.float64)
        ids = []
        for _ in range(small_lm.spec.max_gen_len):
            token = int(torch.argmax(small_lm.next_token_logits(prefix, ids)))
            if token == small_lm.spec.eos_id:
                break
            ids.append(token)
        assert small_lm.beam_search(prefix, n_beams=1).ids == ids

    def test_deterministic_and_eos_free(self, small_lm):
        prefix = torch.randn((3, 8), generator=torch.Generator().manual_seed(7), dtype=torch.float64)
        a = small_lm.beam_search(prefix, n_beams=3)
        b = small_lm.beam_search(prefix, n_beams=3)
        assert a.ids == b.ids and a.score == b.score
        assert small_lm.spec.eos_id not in a.ids
        assert len(a.ids) <= small_lm.spec.max_gen_len
        assert a.text == small_lm.decode(a.ids)

    @pytest.mark.parametrize("n_beams, max_len", [(0, None), (2, 0), (2, 99)])
    def test_invalid_arguments(self, small_lm, n_beams, max_len):
        with pytest.raises(InvalidArgumentException):
            small_lm.beam_search(torch.zeros((1, 8), dtype=torch.float64), n_beams, max_len)


class TestLoadLanguageModel:
    def test_toy(self, tokenizer):
        lm = load_language_model(LanguageModelConfig(embed_dim=8, n_heads=2, n_blocks=1), tokenizer=tokenizer)
        assert lm.spec.embed_dim == 8
        assert lm.spec.vocab_size == len(tokenizer)

    def test_real_without_assets(self):
        with pytest.raises(BackendUnavailableException):
            load_language_model(LanguageModelConfig(backend="real"))

    def test_weights_checksum(self, tiny_lm):
        assert tiny_lm(seed=1).weights_checksum() == tiny_lm(seed=1).weights_checksum()
        assert tiny_lm(seed=1).weights_checksum() != tiny_lm(seed=2).weights_checksum()
