"""
Caption-mediated zero-shot VQA: caption the image, prompt the frozen language
model with the caption and question, and resolve the free-form answer against
the candidate answer set by text-embedding retrieval.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch

from backbone.common import Backbone, cosine_similarity
from langmodel.common import LanguageModel, PrefixEmbedding
from utils.errors import CorpusIOException, InvalidArgumentException, NoAnswerException
from utils.logging import get_logger, log_performance

logger = get_logger("vqa")

TOP_KS = (1, 5, 10)


@dataclass
class VqaItem:
    image_path: str
    question: str
    ground_truth: str
    question_id: str = ""
    answer_candidates: Optional[List[str]] = None


@dataclass
class VqaResult:
    question_id: str
    caption: str
    prompt: str
    generated_answer: str
    ranked_candidates: List[Tuple[str, float]]
    ground_truth: str
    topk_hits: Dict[int, bool] = field(default_factory=dict)
    empty_answer: bool = False

    def rank_of(self, answer: str) -> Optional[int]:
        for rank, (candidate, _) in enumerate(self.ranked_candidates):
            if candidate == answer:
                return rank
        return None

    def to_record(self) -> dict:
        record = asdict(self)
        record["ranked_candidates"] = [[c, s] for c, s in self.ranked_candidates[:10]]
        record["topk_hits"] = {str(k): v for k, v in self.topk_hits.items()}
        return record


def build_prompt(caption: str, question: str) -> str:
    if not caption or not caption.strip():
        raise InvalidArgumentException("Caption is empty")
    if not question or not question.strip():
        raise InvalidArgumentException("Question is empty")
    return f"{caption} Question: {question} Answer:"


def answer_open_ended(
    prompt: str,
    lm: LanguageModel,
    max_len: Optional[int] = None,
    n_beams: int = 1,
    length_normalize: bool = False,
) -> str:
    """Continuation of the prompt, cut at the first newline; empty when eos comes first."""
    ids = lm.encode(prompt)
    if not ids:
        raise InvalidArgumentException("Prompt has no tokens")
    max_len = min(max_len or lm.spec.max_gen_len, lm.spec.max_gen_len)

    max_positions = getattr(lm, "max_positions", None)
    if max_positions is not None and len(ids) + max_len + 1 > max_positions:
        keep = max_positions - max_len - 1
        logger.warning(f"Prompt of {len(ids)} tokens truncated to its last {keep}")
        ids = ids[-keep:]

    with torch.no_grad():
        prefix = PrefixEmbedding(rows=lm.embed_ids(ids))
        seq = lm.beam_search(prefix, n_beams, max_len, length_normalize=length_normalize)
    return seq.text.split("\n", 1)[0].strip()


class CandidateEmbeddingCache:
    """Candidate answer embeddings, computed once per candidate list."""

    def __init__(self, text_encoder: Backbone):
        self.text_encoder = text_encoder
        self._cache: Dict[Tuple[str, ...], List[torch.Tensor]] = {}

    def embed(self, candidates: Sequence[str]) -> List[torch.Tensor]:
        key = tuple(candidates)
        if key not in self._cache:
            self._cache[key] = [self.text_encoder.encode_caption(c).vector for c in candidates]
        return self._cache[key]


def retrieve_answer(
    generated: str,
    candidates: Sequence[str],
    text_encoder: Backbone,
    cache: Optional[CandidateEmbeddingCache] = None,
) -> List[Tuple[str, float]]:
    """Candidates sorted by cosine similarity to the generated answer; ties keep candidate order."""
    if not candidates:
        raise InvalidArgumentException("Candidate list is empty")
    if not generated or not generated.strip() or not text_encoder.tokenize(generated):
        raise NoAnswerException("Generated answer is empty")

    answer = text_encoder.encode_caption(generated).vector
    if cache is not None:
        embeddings = cache.embed(candidates)
    else:
        embeddings = [text_encoder.encode_caption(c).vector for c in candidates]

    sims = [cosine_similarity(answer, e) for e in embeddings]
    order = sorted(range(len(candidates)), key=lambda i: (-sims[i], i))
    return [(candidates[i], sims[i]) for i in order]


def topk_accuracy(results: Sequence[VqaResult], k: int) -> float:
    if k <= 0:
        raise InvalidArgumentException(f"k must be positive, got {k}")
    if not results:
        raise InvalidArgumentException("No results to score")
    hits = 0
    for result in results:
        rank = result.rank_of(result.ground_truth)
        if rank is not None and rank < k:
            hits += 1
    return hits / len(results)


def read_vqa_items(path: Union[str, Path]) -> List[VqaItem]:
    """JSON lines {"image_path", "question", "answer", "question_id"}."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8-sig").splitlines()
    except OSError as e:
        raise CorpusIOException(str(path), str(e), e)

    items = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            image_path = Path(record["image_path"])
            if not image_path.is_absolute():
                image_path = path.parent / image_path
            items.append(VqaItem(
                image_path=str(image_path),
                question=record["question"],
                ground_truth=record["answer"],
                question_id=str(record.get("question_id", n)),
                answer_candidates=record.get("answer_candidates"),
            ))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CorpusIOException(str(path), f"line {n} is not a VQA record", e)
    return items


def read_candidates(path: Union[str, Path]) -> List[str]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8-sig").splitlines()
    except OSError as e:
        raise CorpusIOException(str(path), str(e), e)
    candidates = [line.strip() for line in lines if line.strip()]
    if not candidates:
        raise InvalidArgumentException(f"Candidate file {path} is empty")
    return candidates


def answer_item(
    item: VqaItem,
    caption: str,
    lm: LanguageModel,
    text_encoder: Backbone,
    candidates: Sequence[str],
    cache: Optional[CandidateEmbeddingCache] = None,
    max_len: Optional[int] = None,
    n_beams: int = 1,
    ks: Sequence[int] = TOP_KS,
    length_normalize: bool = False,
) -> VqaResult:
    prompt = build_prompt(caption, item.question)
    generated = answer_open_ended(prompt, lm, max_len, n_beams, length_normalize)
    item_candidates = item.answer_candidates or candidates

    try:
        ranked = retrieve_answer(generated, item_candidates, text_encoder, cache)
        empty = False
    except NoAnswerException:
        logger.warning(f"Empty answer for question {item.question_id}; counted as a miss")
        ranked, empty = [], True

    result = VqaResult(
        question_id=item.question_id,
        caption=caption,
        prompt=prompt,
        generated_answer=generated,
        ranked_candidates=ranked,
        ground_truth=item.ground_truth,
        empty_answer=empty,
    )
    rank = result.rank_of(item.ground_truth)
    result.topk_hits = {k: rank is not None and rank < k for k in ks}
    return result


def missed_item(item: VqaItem, caption: str, ks: Sequence[int] = TOP_KS) -> VqaResult:
    return VqaResult(
        question_id=item.question_id,
        caption=caption,
        prompt="",
        generated_answer="",
        ranked_candidates=[],
        ground_truth=item.ground_truth,
        topk_hits={k: False for k in ks},
        empty_answer=True,
    )


def run_vqa(
    items: Sequence[VqaItem],
    captioner,
    lm: LanguageModel,
    text_encoder: Backbone,
    candidates: Sequence[str],
    max_len: Optional[int] = None,
    n_beams: int = 1,
    ks: Sequence[int] = TOP_KS,
    length_normalize: bool = False,
) -> Tuple[Dict, List[VqaResult]]:
    """Answer every item; returns the report {top1, top5, top10, n_items, ...} and per-item results.

    An item whose caption comes out empty has no prompt to ask; it is kept as a
    top-k miss so it stays in the accuracy denominator.
    """
    if not items:
        raise InvalidArgumentException("No VQA items")
    start_time = time.time()
    cache = CandidateEmbeddingCache(text_encoder)
    if candidates:
        cache.embed(candidates)

    results = []
    for item in items:
        caption = captioner.caption(captioner.backbone.load_image(item.image_path))
        if not caption.strip():
            logger.warning(f"Empty caption for question {item.question_id}; counted as a miss")
            results.append(missed_item(item, caption, ks))
            continue
        results.append(answer_item(item, caption, lm, text_encoder, candidates, cache, max_len, n_beams, ks,
                                   length_normalize))

    report = {f"top{k}": topk_accuracy(results, k) for k in ks}
    report["n_items"] = len(results)
    report["n_empty_captions"] = sum(not r.caption.strip() for r in results)
    report["n_empty_answers"] = sum(r.empty_answer for r in results)
    log_performance(logger, "run_vqa", time.time() - start_time, {"items": len(results)})
    return report, results


def write_vqa_report(report: Dict, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    return path


def write_vqa_items(results: Sequence[VqaResult], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for result in results:
            f.write(json.dumps(result.to_record(), ensure_ascii=False))
            f.write("\n")
    return path
