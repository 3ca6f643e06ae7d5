"""
Zero-shot captioning: subregion feature aggregation, multiple sampling and
similarity-based filtering of the sampled captions.
"""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Union

import torch

from adaptor import AdaptorDecoder, RegionFeatureSequence, adaptor_forward, draw_noise
from backbone.common import Backbone, PatchFeatureSet, ProjectedPatchSet, cosine_similarity, normalize_rows
from langmodel.common import LanguageModel, TokenSequence
from utils.config import SamplingConfig
from utils.errors import CorpusIOException, InvalidArgumentException
from utils.logging import get_logger, log_caption_result, log_performance

logger = get_logger("inference")


@dataclass(frozen=True)
class SubregionSelection:
    """Selected patch token indices (1-based, CLS excluded) and their attention rows A."""
    patch_indices: List[int]
    attention: torch.Tensor


@dataclass(frozen=True)
class RegionImageFeature:
    rows: torch.Tensor
    global_row: Optional[torch.Tensor] = None


@dataclass(frozen=True)
class CaptionCandidate:
    tokens: TokenSequence
    text: str
    similarity: Optional[float] = None


@dataclass
class CaptionResult:
    image_id: str
    caption: str
    similarity: float
    candidates: List[CaptionCandidate] = field(default_factory=list)

    def to_record(self, keep_candidates: bool = False) -> dict:
        record = {"image_id": self.image_id, "caption": self.caption, "similarity": self.similarity}
        if keep_candidates:
            record["candidates"] = [{"text": c.text, "similarity": c.similarity} for c in self.candidates]
        return record


def select_informative_patches(p: PatchFeatureSet, n_cr: int) -> SubregionSelection:
    """Top n_cr patches by class-token attention; ties go to the lower index."""
    n_patches = p.tokens.shape[0] - 1
    if not 1 <= n_cr <= n_patches:
        raise InvalidArgumentException(f"n_cr must be in [1, {n_patches}], got {n_cr}")

    scores = p.cls_attention.tolist()
    ranked = sorted(range(1, n_patches + 1), key=lambda j: (-scores[j], j))
    indices = ranked[:n_cr]
    return SubregionSelection(patch_indices=indices, attention=p.attention[indices])


def aggregate_subregions(proj: ProjectedPatchSet, sel: SubregionSelection, mode: str = "sum") -> RegionImageFeature:
    """Row k = A_k . I_p' + I_c (sum), or their average (mean), or I_c alone (cls)."""
    tokens = proj.tokens
    if sel.attention.dim() != 2 or sel.attention.shape[1] != tokens.shape[0]:
        raise InvalidArgumentException(
            f"Attention rows of width {sel.attention.shape[-1]} do not match {tokens.shape[0]} tokens"
        )

    i_c = tokens[0]
    if mode == "cls":
        rows = i_c.expand(len(sel.patch_indices), -1).clone()
    else:
        i_s = sel.attention.to(tokens.dtype) @ tokens
        if mode == "sum":
            rows = i_s + i_c
        elif mode == "mean":
            rows = (i_s + i_c) / 2
        else:
            raise InvalidArgumentException(f"Unknown aggregation mode '{mode}'")
    return RegionImageFeature(rows=rows, global_row=i_c)


def generate_candidates(
    img_feat: RegionImageFeature,
    cfg: SamplingConfig,
    adaptor: AdaptorDecoder,
    lm: LanguageModel,
) -> List[CaptionCandidate]:
    """S beam-searched captions, each from the rows plus one pre-drawn noise sample."""
    rows = img_feat.rows
    generator = torch.Generator().manual_seed(cfg.seed)
    noise = draw_noise((cfg.samples,) + tuple(rows.shape), cfg.distribution, cfg.inference_sigma,
                       generator, rows.dtype)

    def sample(s: int) -> CaptionCandidate:
        perturbed = rows + noise[s] if cfg.inference_sigma > 0 else rows
        if cfg.normalize_inference_rows:
            perturbed = normalize_rows(perturbed)
        with torch.no_grad():
            prefix = adaptor_forward(RegionFeatureSequence(perturbed), adaptor)
        seq = lm.beam_search(prefix, cfg.n_beams, cfg.max_len, length_normalize=cfg.length_normalize)
        return CaptionCandidate(tokens=seq, text=seq.text)

    if cfg.workers > 1 and cfg.samples > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(sample, range(cfg.samples)))
    return [sample(s) for s in range(cfg.samples)]


def score_candidates(candidates: Sequence[CaptionCandidate], image_global, text_encoder: Backbone) -> List[CaptionCandidate]:
    scored = []
    for cand in candidates:
        tokens = text_encoder.tokenize(cand.text)
        similarity = cosine_similarity(text_encoder.encode_text(tokens).vector, image_global) if tokens else -1.0
        scored.append(replace(cand, similarity=similarity))
    return scored


def rerank(candidates: Sequence[CaptionCandidate], image_global, text_encoder: Backbone) -> CaptionCandidate:
    """Highest cosine similarity to the image; the earliest candidate wins ties."""
    if not candidates:
        raise InvalidArgumentException("No candidates to rerank")
    return _best_scored(score_candidates(candidates, image_global, text_encoder))


def _best_scored(scored: Sequence[CaptionCandidate]) -> CaptionCandidate:
    best = scored[0]
    for cand in scored[1:]:
        if cand.similarity > best.similarity:
            best = cand
    return best


class Captioner:
    """Image-to-caption pipeline around a trained adaptor."""

    def __init__(self, backbone: Backbone, lm: LanguageModel, adaptor: AdaptorDecoder, cfg: SamplingConfig):
        if adaptor.hparams["dim"] != backbone.spec.dim or adaptor.hparams["lm_dim"] != lm.spec.embed_dim:
            raise InvalidArgumentException("Adaptor dimensions do not match backbone and language model")
        self.backbone = backbone
        self.lm = lm
        self.adaptor = adaptor.eval()
        self.cfg = cfg

    def region_feature(self, image) -> RegionImageFeature:
        patches = self.backbone.encode_image_patches(image)
        projected = self.backbone.project_patches(patches)
        selection = select_informative_patches(patches, self.cfg.n_cr)
        return aggregate_subregions(projected, selection, self.cfg.aggregate)

    def describe(self, image, image_id: str = "") -> CaptionResult:
        feature = self.region_feature(image)
        candidates = generate_candidates(feature, self.cfg, self.adaptor, self.lm)
        image_global = normalize_rows(feature.global_row)
        scored = score_candidates(candidates, image_global, self.backbone)
        best = _best_scored(scored)

        log_caption_result(logger, image_id, best.text, best.similarity)
        return CaptionResult(image_id=image_id, caption=best.text, similarity=best.similarity, candidates=scored)

    def caption(self, image) -> str:
        return self.describe(image).caption


def caption(image, checkpoint, cfg: SamplingConfig, backbone: Backbone, lm: LanguageModel) -> str:
    """Caption one image with an adaptor or a checkpoint path."""
    if isinstance(checkpoint, AdaptorDecoder):
        adaptor = checkpoint
    else:
        from checkpoint import load_checkpoint
        adaptor = load_checkpoint(checkpoint, backbone.spec, lm.spec)
    return Captioner(backbone, lm, adaptor, cfg).caption(image)


def read_image_manifest(path: Union[str, Path]) -> List[dict]:
    """JSON lines with "image_id" and "image_path"; relative paths resolve next to the manifest."""
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
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CorpusIOException(str(path), f"line {n} is not an image record", e)
        if not image_path.is_absolute():
            image_path = path.parent / image_path
        items.append({**record, "image_id": str(record.get("image_id", n)), "image_path": str(image_path)})
    return items


def caption_manifest(
    captioner: Captioner,
    manifest_path: Union[str, Path],
    out_path: Union[str, Path],
    workers: int = 1,
) -> List[CaptionResult]:
    """Caption every manifest image and write one JSON line per image, in manifest order."""
    items = read_image_manifest(manifest_path)
    start_time = time.time()

    def run(item: dict) -> CaptionResult:
        image = captioner.backbone.load_image(item["image_path"])
        return captioner.describe(image, image_id=item["image_id"])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(item) for item in items]

    write_caption_results(results, out_path, captioner.cfg.keep_candidates)
    log_performance(logger, "caption_manifest", time.time() - start_time, {"images": len(results)})
    return results


def write_caption_results(results: Sequence[CaptionResult], out_path: Union[str, Path], keep_candidates: bool = False) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        for result in results:
            f.write(json.dumps(result.to_record(keep_candidates), ensure_ascii=False))
            f.write("\n")
    return out_path
