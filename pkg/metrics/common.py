"""
Shared pieces of the caption metrics: evaluation sets, tokenization and n-gram counts.
"""

import json
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

from utils.errors import CorpusIOException, InvalidArgumentException

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> List[str]:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class EvalSet:
    items: Tuple[Tuple[str, Tuple[str, ...]], ...]

    def __post_init__(self):
        for n, (_, refs) in enumerate(self.items):
            if len(refs) == 0:
                raise InvalidArgumentException(f"Item {n} has no references")

    @classmethod
    def from_pairs(cls, pairs) -> "EvalSet":
        return cls(tuple((str(c), tuple(str(r) for r in refs)) for c, refs in pairs))

    def __len__(self) -> int:
        return len(self.items)

    def tokenized(self) -> List[Tuple[List[str], List[List[str]]]]:
        return [(tokenize(c), [tokenize(r) for r in refs]) for c, refs in self.items]


def require_items(eval_set: EvalSet):
    if len(eval_set) == 0:
        raise InvalidArgumentException("Evaluation set is empty")


def read_eval_set(path: Union[str, Path]) -> EvalSet:
    """JSON lines {"candidate", "references": [...]}."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8-sig").splitlines()
    except OSError as e:
        raise CorpusIOException(str(path), str(e), e)

    pairs = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            refs = record["references"]
            if isinstance(refs, str):
                refs = [refs]
            pairs.append((record["candidate"], refs))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CorpusIOException(str(path), f"line {n} is not an evaluation record", e)
    return EvalSet.from_pairs(pairs)
