import json
import math

import pytest

from metrics import EvalSet, bleu, cider, cider_scores, evaluate_captions, read_eval_set, rouge_l, tokenize, write_metrics
from metrics.rouge import lcs_length
from utils.errors import CorpusIOException, InsufficientCorpusException, InvalidArgumentException

PENALTY_ONE_WORD = math.exp(-1 / 72)


def _set(*pairs):
    return EvalSet.from_pairs(pairs)


def test_tokenize():
    assert tokenize("A Dog, runs!  Fast.") == ["a", "dog", "runs", "fast"]


class TestBleu:
    CORPUS = _set(
        ("the cat sat on the mat", ["the cat is on the mat"]),
        ("a dog runs", ["a dog runs fast", "the dog runs"]),
    )

    def test_hand_computed_corpus(self):
        # Unigrams 8/9 and bigrams 5/7 clipped matches; equal lengths so no penalty
        assert bleu(self.CORPUS, 1) == pytest.approx(8 / 9, abs=1e-12)
        assert bleu(self.CORPUS, 2) == pytest.approx(math.sqrt(8 / 9 * 5 / 7), abs=1e-12)

    def test_single_item_values(self):
        item = _set(("the cat sat on the mat", ["the cat is on the mat"]))
        assert bleu(item, 1) == pytest.approx(5 / 6, abs=1e-12)
        assert bleu(item, 2) == pytest.approx(math.sqrt(0.5), abs=1e-12)

    def test_identity_is_one(self):
        items = _set(("a red dog runs on grass", ["a red dog runs on grass"]),
                     ("two birds rest by the water", ["two birds rest by the water"]))
        assert bleu(items, 4) == pytest.approx(1.0, abs=1e-12)

    def test_brevity_penalty(self):
        assert bleu(_set(("a dog", ["a dog runs fast"])), 1) == pytest.approx(math.exp(-1), abs=1e-12)

    def test_closest_reference_prefers_shorter_on_ties(self):
        assert bleu(_set(("a b c", ["a b", "a b c d"])), 1) == pytest.approx(1.0, abs=1e-12)

    def test_missing_ngram_order_gives_zero(self):
        assert bleu(_set(("a dog runs", ["a dog runs"])), 4) == 0.0
        assert bleu(_set(("cat", ["dog"])), 1) == 0.0

    def test_reference_order_invariance(self):
        flipped = _set(
            ("the cat sat on the mat", ["the cat is on the mat"]),
            ("a dog runs", ["the dog runs", "a dog runs fast"]),
        )
        assert bleu(flipped, 2) == bleu(self.CORPUS, 2)

    def test_invalid_order(self):
        with pytest.raises(InvalidArgumentException):
            bleu(self.CORPUS, 5)


class TestCider:
    CORPUS = _set(("a b", ["a b"]), ("a", ["a c"]), ("d", ["e"]))

    def _expected_second(self):
        # idf(a) = log 3 - log 2, idf(c) = log 3
        l1, l3 = math.log(1.5), math.log(3)
        return l1 / math.sqrt(l1 ** 2 + l3 ** 2) * PENALTY_ONE_WORD / 4

    def test_hand_computed_scores(self):
        scores = cider_scores(self.CORPUS)
        assert scores[0] == pytest.approx(0.5, abs=1e-6)
        assert scores[1] == pytest.approx(self._expected_second(), abs=1e-6)
        assert scores[2] == 0.0
        assert cider(self.CORPUS) == pytest.approx((0.5 + self._expected_second()) / 3, abs=1e-6)

    def test_scale_10(self):
        assert cider(self.CORPUS, scale_10=True) == pytest.approx(10 * cider(self.CORPUS), abs=1e-9)

    def test_cider_d_clips_repeated_words(self):
        corpus = _set(("a b", ["a b"]), ("c c", ["c d"]))
        plain = cider_scores(corpus)
        clipped = cider_scores(corpus, cider_d=True)
        assert plain[1] == pytest.approx(1 / math.sqrt(2) / 4, abs=1e-6)
        assert clipped[1] == pytest.approx(1 / (2 * math.sqrt(2)) / 4, abs=1e-6)
        assert clipped[0] == pytest.approx(plain[0], abs=1e-12)

    def test_reference_order_invariance(self):
        a = _set(("a dog runs", ["a dog runs fast", "the dog runs"]), ("a cat", ["a cat sits"]))
        b = _set(("a dog runs", ["the dog runs", "a dog runs fast"]), ("a cat", ["a cat sits"]))
        assert cider(a) == pytest.approx(cider(b), abs=1e-12)

    def test_needs_two_items(self):
        with pytest.raises(InsufficientCorpusException):
            cider(_set(("a b", ["a b"])))


class TestRougeL:
    def test_lcs(self):
        assert lcs_length(list("abcbdab"), list("bdcaba")) == 4
        assert lcs_length([], ["a"]) == 0

    def test_equal_precision_and_recall(self):
        assert rouge_l(_set(("the cat sat on the mat", ["the cat is on the mat"]))) == pytest.approx(5 / 6, abs=1e-12)

    def test_weighted_towards_recall(self):
        expected = 2.44 * 0.5 / (0.5 + 1.44)
        assert rouge_l(_set(("a dog", ["a dog runs fast"]))) == pytest.approx(expected, abs=1e-12)

    def test_empty_candidate(self):
        assert rouge_l(_set(("", ["a dog"]), ("a dog", ["a dog"]))) == pytest.approx(0.5, abs=1e-12)


class TestEvaluate:
    def test_scores_and_single_item(self, tmp_path):
        scores = evaluate_captions(TestCider.CORPUS)
        assert set(scores) == {"bleu1", "bleu4", "cider", "rouge_l", "n_items"}
        assert scores["n_items"] == 3

        single = evaluate_captions(_set(("a dog", ["a dog"])))
        assert single["cider"] is None
        path = write_metrics(single, tmp_path / "metrics.json")
        assert json.loads(path.read_text())["cider"] is None

    def test_empty_inputs(self):
        with pytest.raises(InvalidArgumentException):
            bleu(_set(), 1)
        with pytest.raises(InvalidArgumentException):
            _set(("a dog", []))


class TestReadEvalSet:
    def test_reads_records(self, tmp_path):
        path = tmp_path / "eval.jsonl"
        path.write_text("\n".join([
            json.dumps({"candidate": "a dog", "references": ["a dog", "the dog"]}),
            "",
            json.dumps({"candidate": "a cat", "references": "a cat"}),
        ]))
        eval_set = read_eval_set(path)
        assert eval_set.items == (("a dog", ("a dog", "the dog")), ("a cat", ("a cat",)))

    def test_malformed(self, tmp_path):
        path = tmp_path / "eval.jsonl"
        path.write_text(json.dumps({"candidate": "a dog"}))
        with pytest.raises(CorpusIOException):
            read_eval_set(path)
        with pytest.raises(CorpusIOException):
            read_eval_set(tmp_path / "missing.jsonl")
