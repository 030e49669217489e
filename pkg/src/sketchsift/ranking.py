"""Gallery feature store, rank computation, and retrieval metrics.

Distances are Euclidean over unit-norm embeddings (monotone with cosine).
Ties are counted pessimistically: gallery items at exactly the paired
photo's distance push its rank down.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyEpisode, EmptyGallery, LengthMismatch, UnknownPairedId
from .sketch import VectorSketch, rasterize


class GalleryFeatures:
    """Immutable (M, d) matrix of unit-norm photo embeddings with their ids."""

    def __init__(self, features: np.ndarray, ids: Sequence[str]):
        features = np.asarray(features, dtype=np.float64)
        ids = tuple(str(i) for i in ids)
        if features.ndim != 2 or features.shape[0] < 1:
            raise EmptyGallery(f"gallery features shape {features.shape}")
        if len(ids) != features.shape[0]:
            raise LengthMismatch(f"{len(ids)} ids for {features.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise LengthMismatch("gallery ids are not unique")
        features = features.copy()
        features.flags.writeable = False
        self.features = features
        self.ids = ids
        self._index = {pid: i for i, pid in enumerate(ids)}

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def index_of(self, photo_id: str) -> int:
        try:
            return self._index[photo_id]
        except KeyError:
            raise UnknownPairedId(f"photo id {photo_id!r} not in gallery") from None

    def row(self, photo_id: str) -> np.ndarray:
        return self.features[self.index_of(photo_id)]


def build_gallery(net, photos: np.ndarray, ids: Sequence[str]) -> GalleryFeatures:
    """Embed all gallery photos once; the result is immutable."""
    photos = np.asarray(photos, dtype=np.float64)
    if photos.ndim != 3 or photos.shape[0] < 1:
        raise EmptyGallery(f"photo stack shape {photos.shape}")
    return GalleryFeatures(net.embed(photos), ids)


@dataclass(frozen=True, eq=False)
class RankResult:
    rank: int
    percentile: float
    distances: np.ndarray


def rank(query_emb: np.ndarray, gallery: GalleryFeatures, paired_id: str) -> RankResult:
    """1-based rank of the paired photo under pessimistic tie-breaking."""
    paired_idx = gallery.index_of(paired_id)
    q = np.asarray(query_emb, dtype=np.float64).reshape(-1)
    distances = np.sqrt(((gallery.features - q[None, :]) ** 2).sum(axis=1))
    d_paired = distances[paired_idx]
    smaller = int((distances < d_paired).sum())
    equal_other = int((distances == d_paired).sum()) - 1
    r = 1 + smaller + equal_other
    m = gallery.size
    percentile = 1.0 if m == 1 else (m - r) / (m - 1)
    return RankResult(rank=r, percentile=percentile, distances=distances)


def rank_many(query_embs: np.ndarray, gallery: GalleryFeatures, paired_ids: Sequence[str]) -> np.ndarray:
    """Vectorized ranks for a (B, d) query batch (same tie rule as rank)."""
    q = np.asarray(query_embs, dtype=np.float64)
    idx = np.array([gallery.index_of(pid) for pid in paired_ids])
    d2 = ((q[:, None, :] - gallery.features[None, :, :]) ** 2).sum(axis=2)
    d_paired = d2[np.arange(len(idx)), idx][:, None]
    smaller = (d2 < d_paired).sum(axis=1)
    equal = (d2 == d_paired).sum(axis=1) - 1
    return (1 + smaller + equal).astype(np.int64)


def acc_at_k(ranks: Sequence[int], k: int) -> float:
    if not len(ranks):
        raise LengthMismatch("no ranks given")
    if k < 1:
        raise LengthMismatch(f"k {k} < 1")
    arr = np.asarray(ranks)
    return float((arr <= k).mean())


@dataclass(frozen=True)
class CurveSample:
    step: int
    fraction: float
    rank: int
    percentile: float

    @property
    def inv_rank(self) -> float:
        return 1.0 / self.rank


def area_under(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Trapezoid area normalized by the x-span, scaled to [0, 100]."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size == 0:
        raise EmptyEpisode("no curve samples")
    if xs.size == 1:
        return float(ys[0] * 100.0)
    span = xs[-1] - xs[0]
    if span <= 0:
        raise LengthMismatch("curve x values must increase")
    trapezoid = getattr(np, "trapezoid", np.trapz)
    return float(trapezoid(ys, xs) / span * 100.0)


def onthefly_curves(
    prefixes: Sequence[VectorSketch],
    net,
    gallery: GalleryFeatures,
    paired_id: str,
    line_width: int = 1,
) -> tuple[list[CurveSample], float, float]:
    """Per-prefix retrieval curve over a drawing episode.

    Returns the curve samples plus the normalized areas (r_a, r_b): r_a is the
    ranking-percentile area, r_b the 1/rank area, both on a 0-100 scale.
    """
    if not prefixes:
        raise EmptyEpisode("episode has no prefixes")
    hw = net.config.input_hw
    images = np.stack([rasterize(p, hw, hw, line_width).pixels for p in prefixes])
    embs = net.embed(images)
    total = prefixes[-1].stroke_count
    samples = []
    for i, prefix in enumerate(prefixes):
        rr = rank(embs[i], gallery, paired_id)
        samples.append(
            CurveSample(
                step=i + 1,
                fraction=prefix.stroke_count / total,
                rank=rr.rank,
                percentile=rr.percentile,
            )
        )
    return samples, *curve_areas(samples)


def curve_areas(samples: Sequence[CurveSample]) -> tuple[float, float]:
    xs = [s.fraction for s in samples]
    r_a = area_under(xs, [s.percentile for s in samples])
    r_b = area_under(xs, [s.inv_rank for s in samples])
    return r_a, r_b


def stroke_prefixes(sketch: VectorSketch) -> list[VectorSketch]:
    return [sketch.prefix(k) for k in range(1, sketch.stroke_count + 1)]


def write_curve_csv(path: Path | str, samples: Sequence[CurveSample], r_a: float, r_b: float) -> None:
    """Line CSV `step,fraction,rank,percentile`; the trailing summary row is
    `summary,<r@A>,<r@B>,<n_steps>`."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "fraction", "rank", "percentile"])
        for s in samples:
            writer.writerow([s.step, f"{s.fraction:.6f}", s.rank, f"{s.percentile:.6f}"])
        writer.writerow(["summary", f"{r_a:.6f}", f"{r_b:.6f}", len(samples)])
