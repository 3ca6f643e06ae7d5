"""ROUGE-L: longest-common-subsequence F-measure, best precision and recall over references."""

import math

from metrics.common import EvalSet, require_items

BETA = 1.2


def lcs_length(a, b) -> int:
    if len(a) < len(b):
        a, b = b, a
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b, 1):
            current.append(previous[j - 1] + 1 if x == y else max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(eval_set: EvalSet, beta: float = BETA) -> float:
    require_items(eval_set)
    scores = []
    for cand, refs in eval_set.tokenized():
        precision, recall = 0.0, 0.0
        for ref in refs:
            lcs = lcs_length(cand, ref)
            if cand:
                precision = max(precision, lcs / len(cand))
            if ref:
                recall = max(recall, lcs / len(ref))
        if precision == 0 or recall == 0:
            scores.append(0.0)
        else:
            scores.append((1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision))
    return math.fsum(scores) / len(scores)
