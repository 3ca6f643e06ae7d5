"""
Modality gap analysis of the joint embedding space: paired similarity
statistics, how often a subregion beats the global feature, and histograms of
the dimension-wise text-image differences.
"""

import csv
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from backbone.common import Backbone, ProjectedPatchSet, TextEmbedding, cosine_similarity, normalize_rows
from utils.errors import CorpusIOException, InvalidArgumentException
from utils.logging import get_logger

logger = get_logger("gap_analysis")

HIST_BINS = 101
HIST_RANGE = (-0.2, 0.2)


class GapPair(NamedTuple):
    text: TextEmbedding
    projected: ProjectedPatchSet


@dataclass(frozen=True)
class GapSample:
    global_gap: torch.Tensor
    patch_gaps: torch.Tensor


@dataclass(frozen=True)
class SimilarityStats:
    mean: float
    max: float
    min: float
    n_pairs: int


@dataclass(frozen=True)
class GapHistogram:
    """Inner bins over HIST_RANGE framed by an underflow and an overflow bin."""
    bin_edges: List[float]
    counts: List[int]
    pooled_mean: float

    @property
    def total(self) -> int:
        return sum(self.counts)


def pairs_from_synthetic(backbone: Backbone, synthetic_pairs) -> List[GapPair]:
    return [GapPair(p.text, backbone.project_patches(backbone.encode_image_patches(p.patches))) for p in synthetic_pairs]


def pairs_from_manifest(backbone: Backbone, manifest_path: Union[str, Path]) -> List[GapPair]:
    """Image-caption pairs from JSON lines {"image_path", "caption"}."""
    manifest_path = Path(manifest_path)
    try:
        lines = manifest_path.read_text(encoding="utf-8-sig").splitlines()
    except OSError as e:
        raise CorpusIOException(str(manifest_path), str(e), e)

    pairs = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            image_path = Path(record["image_path"])
            caption = record["caption"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CorpusIOException(str(manifest_path), f"line {n} is not an image-caption record", e)
        if not image_path.is_absolute():
            image_path = manifest_path.parent / image_path

        patches = backbone.encode_image_patches(backbone.load_image(image_path))
        pairs.append(GapPair(backbone.encode_caption(caption), backbone.project_patches(patches)))
    logger.info(f"Encoded {len(pairs)} image-caption pairs from {manifest_path}")
    return pairs


def _require_pairs(pairs: Sequence[GapPair]):
    if len(pairs) == 0:
        raise InvalidArgumentException("At least one pair is required")


def gap_sample(pair: GapPair) -> GapSample:
    """G^c = T - I_c and G^p = repeat(T) - I_p' on normalized rows."""
    rows = normalize_rows(pair.projected.tokens)
    text = pair.text.vector.to(rows.dtype)
    return GapSample(global_gap=text - rows[0], patch_gaps=text[None, :] - rows)


def _best_patch_index(text: torch.Tensor, projected: ProjectedPatchSet) -> Tuple[int, float]:
    best_index, best_sim = -1, -math.inf
    for k, row in enumerate(projected.patch_rows):
        sim = cosine_similarity(text, row)
        if sim > best_sim:
            best_index, best_sim = k, sim
    return best_index, best_sim


def mix_representation(text: TextEmbedding, projected: ProjectedPatchSet, mode: str = "best") -> torch.Tensor:
    """Global row plus the best-matching subregion row (or the mean of all patch rows)."""
    if mode == "best":
        index, _ = _best_patch_index(text.vector, projected)
        return projected.global_row + projected.patch_rows[index]
    if mode == "average":
        return projected.global_row + projected.patch_rows.mean(dim=0)
    raise InvalidArgumentException(f"Unknown mix mode '{mode}'")


def pair_similarities(pairs: Sequence[GapPair], mode: str = "global", mix_mode: str = "best") -> List[float]:
    _require_pairs(pairs)
    if mode == "global":
        return [cosine_similarity(p.text, p.projected.global_row) for p in pairs]
    if mode == "mix":
        return [cosine_similarity(p.text, mix_representation(p.text, p.projected, mix_mode)) for p in pairs]
    raise InvalidArgumentException(f"Unknown similarity mode '{mode}'")


def pair_similarity_stats(pairs: Sequence[GapPair], mode: str = "global", mix_mode: str = "best") -> SimilarityStats:
    sims = pair_similarities(pairs, mode, mix_mode)
    return SimilarityStats(mean=math.fsum(sims) / len(sims), max=max(sims), min=min(sims), n_pairs=len(sims))


def subregion_win_fraction(pairs: Sequence[GapPair]) -> float:
    """Share of pairs where some patch row is strictly closer to the text than the global row."""
    _require_pairs(pairs)
    wins = 0
    for pair in pairs:
        global_sim = cosine_similarity(pair.text, pair.projected.global_row)
        _, best_sim = _best_patch_index(pair.text.vector, pair.projected)
        if best_sim > global_sim:
            wins += 1
    return wins / len(pairs)


def _gap_values(pairs: Sequence[GapPair], mode: str) -> Iterable[torch.Tensor]:
    for pair in pairs:
        sample = gap_sample(pair)
        if mode == "global":
            yield sample.global_gap.reshape(-1)
        elif mode == "patch":
            yield sample.patch_gaps.reshape(-1)
        else:
            raise InvalidArgumentException(f"Unknown gap mode '{mode}'")


def gap_distribution(
    pairs: Sequence[GapPair],
    mode: str = "global",
    bins: int = HIST_BINS,
    value_range: Tuple[float, float] = HIST_RANGE,
) -> GapHistogram:
    """Histogram and pooled mean of every gap entry, all dimensions (and patches) pooled."""
    _require_pairs(pairs)
    lo, hi = value_range
    inner_edges = np.linspace(lo, hi, bins + 1)
    counts = np.zeros(bins + 2, dtype=np.int64)
    chunks: List[List[float]] = []

    for values in _gap_values(pairs, mode):
        array = values.detach().cpu().numpy().astype(np.float64)
        counts[0] += int((array < lo).sum())
        counts[-1] += int((array > hi).sum())
        inner = array[(array >= lo) & (array <= hi)]
        counts[1:-1] += np.histogram(inner, bins=inner_edges)[0]
        chunks.append(array.tolist())

    n_values = sum(len(c) for c in chunks)
    pooled_mean = math.fsum(itertools.chain.from_iterable(chunks)) / n_values
    edges = [-math.inf] + inner_edges.tolist() + [math.inf]
    return GapHistogram(bin_edges=edges, counts=counts.tolist(), pooled_mean=pooled_mean)


def linear_projection_2d(pairs: Sequence[GapPair]) -> Tuple[np.ndarray, List[str]]:
    """Text and global image embeddings on their top two principal axes."""
    _require_pairs(pairs)
    texts = np.stack([p.text.vector.detach().cpu().numpy() for p in pairs])
    images = np.stack([normalize_rows(p.projected.global_row).detach().cpu().numpy() for p in pairs])
    points = np.concatenate([texts, images]).astype(np.float64)
    centered = points - points.mean(axis=0)

    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    # Fix the SVD sign ambiguity
    signs = np.sign(axes[np.arange(axes.shape[0]), np.abs(axes).argmax(axis=1)])
    axes = axes * signs[:, None]

    coords = centered @ axes.T
    labels = ["text"] * len(pairs) + ["image"] * len(pairs)
    return coords, labels


def stats_rows(pairs: Sequence[GapPair], mix_mode: str = "best") -> List[dict]:
    rows = []
    for mode in ("global", "mix"):
        stats = pair_similarity_stats(pairs, mode, mix_mode)
        for name in ("mean", "max", "min"):
            rows.append({"stat": name, "mode": mode, "value": getattr(stats, name), "n_pairs": stats.n_pairs})
    rows.append({"stat": "win_fraction", "mode": "subregion", "value": subregion_win_fraction(pairs),
                 "n_pairs": len(pairs)})
    return rows


def write_stats_csv(rows: Sequence[dict], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["stat", "mode", "value", "n_pairs"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def write_histogram_csv(hist: GapHistogram, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for k, count in enumerate(hist.counts):
            writer.writerow([hist.bin_edges[k], hist.bin_edges[k + 1], count])
    return path


def write_scatter_csv(coords: np.ndarray, labels: Sequence[str], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["x", "y", "modality"])
        for (x, y), label in zip(coords.tolist(), labels):
            writer.writerow([x, y, label])
    return path


def plot_histogram(hist: GapHistogram, path: Union[str, Path], title: str = "") -> Optional[Path]:
    """Render the inner bins; returns None when matplotlib is unavailable."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib not installed; skipping histogram plot")
        return None

    edges = hist.bin_edges[1:-1]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.stairs(hist.counts[1:-1], edges)
    ax.axvline(hist.pooled_mean, color="red", linestyle="--", linewidth=1)
    ax.set_xlabel("text - image")
    ax.set_ylabel("count")
    ax.set_title(title or f"pooled mean {hist.pooled_mean:.4g}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
