"""Corpus-level BLEU with the closest-reference-length brevity penalty."""

import math

from metrics.common import EvalSet, ngram_counts, require_items
from utils.errors import InvalidArgumentException


def bleu(eval_set: EvalSet, max_n: int = 4) -> float:
    if not 1 <= max_n <= 4:
        raise InvalidArgumentException(f"max_n must be in 1..4, got {max_n}")
    require_items(eval_set)

    correct = [0] * max_n
    guessed = [0] * max_n
    cand_len = 0
    ref_len = 0

    for cand, refs in eval_set.tokenized():
        cand_len += len(cand)
        # Closest reference length, shorter on ties
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]

        for n in range(1, max_n + 1):
            cand_counts = ngram_counts(cand, n)
            max_ref = {}
            for ref in refs:
                for gram, count in ngram_counts(ref, n).items():
                    max_ref[gram] = max(max_ref.get(gram, 0), count)
            correct[n - 1] += sum(min(count, max_ref.get(gram, 0)) for gram, count in cand_counts.items())
            guessed[n - 1] += max(len(cand) - n + 1, 0)

    if cand_len == 0 or any(c == 0 for c in correct):
        return 0.0

    log_precision = sum(math.log(c / g) for c, g in zip(correct, guessed)) / max_n
    brevity = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return brevity * math.exp(log_precision)
