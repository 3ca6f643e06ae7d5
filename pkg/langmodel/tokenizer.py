"""
Word-level tokenizer shared by the toy backbone and toy language model,
plus the template grammar used to produce synthetic caption corpora.
"""

import json
import random
import string
from pathlib import Path
from typing import Iterable, List, Sequence, Union

from utils.errors import InvalidArgumentException

SPECIAL_TOKENS = ["<pad>", "<bos>", "<eos>", "<unk>"]

COLORS = ["red", "blue", "green", "yellow", "black", "white", "brown", "gray"]
NOUNS = ["dog", "cat", "man", "woman", "bird", "horse", "car", "boat", "child", "train"]
VERBS = ["sits", "stands", "runs", "walks", "rests", "waits", "plays", "sleeps"]
VERBS_ING = ["sitting", "standing", "running", "walking", "resting", "waiting", "playing", "sleeping"]
PREPOSITIONS = ["on", "near", "in", "by"]
PLACES = ["street", "grass", "beach", "table", "road", "field", "snow", "water", "bench", "room"]
QUESTION_WORDS = [
    "question", "answer", "what", "is", "the", "a", "this", "color", "of", "where",
    "yes", "no", "how", "many", "which", "doing", "animal", "two", "three", "one",
]

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def default_lexicon() -> List[str]:
    words = []
    for group in (["a", "the", "is"], COLORS, NOUNS, VERBS, VERBS_ING, PREPOSITIONS, PLACES, QUESTION_WORDS):
        for word in group:
            if word not in words:
                words.append(word)
    return words


def normalize_text(text: str) -> List[str]:
    """Lowercase, drop ASCII punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


class ToyTokenizer:
    """Fixed word vocabulary; ids 0-3 are pad, bos, eos and unk."""

    def __init__(self, id_to_token: Sequence[str]):
        if list(id_to_token[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise InvalidArgumentException("Vocabulary must start with the special tokens")
        self.id_to_token = list(id_to_token)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise InvalidArgumentException("Vocabulary contains duplicate tokens")

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3

    @classmethod
    def build(cls, vocab_size: int = 256, extra_words: Iterable[str] = ()) -> "ToyTokenizer":
        words = default_lexicon()
        for word in extra_words:
            if word not in words:
                words.append(word)
        if len(SPECIAL_TOKENS) + len(words) > vocab_size:
            raise InvalidArgumentException(
                f"Vocabulary size {vocab_size} too small for {len(words)} lexicon words"
            )
        filler = [f"tok{i}" for i in range(vocab_size - len(SPECIAL_TOKENS) - len(words))]
        return cls(SPECIAL_TOKENS + words + filler)

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> List[int]:
        return [self.token_to_id.get(word, self.unk_id) for word in normalize_text(text)]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i < len(SPECIAL_TOKENS):
                if i == self.unk_id:
                    words.append(SPECIAL_TOKENS[i])
                continue
            words.append(self.id_to_token[i])
        return " ".join(words)

    def save(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps({"id_to_token": self.id_to_token}, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ToyTokenizer":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["id_to_token"])


def synthetic_captions(n: int, seed: int = 0) -> List[str]:
    """n captions drawn from a small scene grammar."""
    if n < 0:
        raise InvalidArgumentException("Caption count must be non-negative")
    rng = random.Random(seed)
    captions = []
    for _ in range(n):
        if rng.random() < 0.5:
            captions.append(
                f"a {rng.choice(COLORS)} {rng.choice(NOUNS)} {rng.choice(VERBS)} "
                f"{rng.choice(PREPOSITIONS)} the {rng.choice(PLACES)}"
            )
        else:
            captions.append(
                f"the {rng.choice(COLORS)} {rng.choice(NOUNS)} is {rng.choice(VERBS_ING)} "
                f"{rng.choice(PREPOSITIONS)} the {rng.choice(PLACES)}"
            )
    return captions
