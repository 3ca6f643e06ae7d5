"""
CIDEr: TF-IDF weighted n-gram cosine between candidate and references,
n = 1..4, with a Gaussian penalty on the word-length difference.

Document frequencies come from the references, one count per item.
"""

import math
from collections import Counter
from typing import Dict, List, Tuple

from metrics.common import EvalSet, ngram_counts
from utils.errors import InsufficientCorpusException

MAX_N = 4
SIGMA = 6.0


def _tfidf(tokens, df: Counter, log_n: float) -> Tuple[List[Dict], List[float]]:
    vectors, norms = [], []
    for n in range(1, MAX_N + 1):
        vec = {gram: tf * (log_n - math.log(max(1.0, df[gram]))) for gram, tf in ngram_counts(tokens, n).items()}
        vectors.append(vec)
        norms.append(math.sqrt(sum(w * w for w in vec.values())))
    return vectors, norms


def _similarity(cand, ref, cider_d: bool) -> List[float]:
    (vec_c, norm_c, len_c), (vec_r, norm_r, len_r) = cand, ref
    penalty = math.exp(-((len_c - len_r) ** 2) / (2 * SIGMA ** 2))
    scores = []
    for n in range(MAX_N):
        if cider_d:
            dot = sum(min(w, vec_r[n].get(g, 0.0)) * vec_r[n].get(g, 0.0) for g, w in vec_c[n].items())
        else:
            dot = sum(w * vec_r[n].get(g, 0.0) for g, w in vec_c[n].items())
        if norm_c[n] != 0 and norm_r[n] != 0:
            dot /= norm_c[n] * norm_r[n]
        scores.append(dot * penalty)
    return scores


def cider_scores(eval_set: EvalSet, cider_d: bool = False, scale: float = 1.0) -> List[float]:
    """Per-item scores, in eval set order."""
    if len(eval_set) < 2:
        raise InsufficientCorpusException(f"CIDEr needs at least 2 items, got {len(eval_set)}")

    items = eval_set.tokenized()
    df = Counter()
    for _, refs in items:
        grams = set()
        for ref in refs:
            for n in range(1, MAX_N + 1):
                grams.update(ngram_counts(ref, n))
        df.update(grams)
    log_n = math.log(float(len(items)))

    scores = []
    for cand, refs in items:
        cand_vec = (*_tfidf(cand, df, log_n), len(cand))
        total = [0.0] * MAX_N
        for ref in refs:
            ref_vec = (*_tfidf(ref, df, log_n), len(ref))
            for n, s in enumerate(_similarity(cand_vec, ref_vec, cider_d)):
                total[n] += s
        scores.append(math.fsum(total) / MAX_N / len(refs) * scale)
    return scores


def cider(eval_set: EvalSet, cider_d: bool = False, scale_10: bool = False) -> float:
    scores = cider_scores(eval_set, cider_d, 10.0 if scale_10 else 1.0)
    return math.fsum(scores) / len(scores)
