"""Caption quality metrics: BLEU, CIDEr and ROUGE-L."""

import json
from pathlib import Path
from typing import Dict, Optional, Union

from metrics.bleu import bleu
from metrics.cider import cider, cider_scores
from metrics.common import EvalSet, read_eval_set, tokenize
from metrics.rouge import rouge_l
from utils.errors import InsufficientCorpusException
from utils.logging import get_logger

logger = get_logger("metrics")


def evaluate_captions(eval_set: EvalSet, cider_d: bool = False, scale_10: bool = False) -> Dict[str, Optional[float]]:
    """{bleu1, bleu4, cider, rouge_l}; cider is None for a single-item set."""
    try:
        cider_value = cider(eval_set, cider_d=cider_d, scale_10=scale_10)
    except InsufficientCorpusException as e:
        logger.warning(f"{e}; CIDEr not reported")
        cider_value = None

    return {
        "bleu1": bleu(eval_set, 1),
        "bleu4": bleu(eval_set, 4),
        "cider": cider_value,
        "rouge_l": rouge_l(eval_set),
        "n_items": len(eval_set),
    }


def write_metrics(scores: Dict, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scores, indent=2, sort_keys=True), encoding="utf-8")
    return path


__all__ = [
    "EvalSet",
    "bleu",
    "cider",
    "cider_scores",
    "evaluate_captions",
    "read_eval_set",
    "rouge_l",
    "tokenize",
    "write_metrics",
]
