"""Gradient maps: per-view input gradients of the training loss, signed fusion
back into the volume frame, corpus averaging and gradient-per-volume ranking."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .model import BrainAgeModel, PseudoSample
from .numcore import Tensor, backward, mean, square, sub
from .synthcorpus import CropGeometry, region_volumes
from . import svg

log = logging.getLogger(__name__)

NOTICE = ("gradients are taken of the per-sample MSE w.r.t. the normalised view chunks; "
          "no per-sample normalisation is applied before averaging")


@dataclass
class ViewGradients:
    g_s: np.ndarray
    g_c: np.ndarray
    g_a: np.ndarray

    def __iter__(self):
        return iter((self.g_s, self.g_c, self.g_a))


@dataclass
class FusedGradientMap:
    volume: np.ndarray
    count: int


@dataclass
class RegionAttribution:
    region_id: int
    attribution: float
    volume: float
    score: float
    rank: int


def batch_view_gradients(model: BrainAgeModel, views: np.ndarray, volumes: np.ndarray,
                         ages: np.ndarray) -> np.ndarray:
    """(B, 3, c1, c2, t) gradients; row i is ∂(ŷ_i − y_i)²/∂views_i.

    Samples do not interact in the forward pass, so one backward pass of the
    summed per-sample losses yields every per-sample gradient.
    """
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 5 or views.shape[1] != 3:
        raise ShapeError(f"expected views of shape (B, 3, c1, c2, t), got {views.shape}")
    inputs = [Tensor(views[:, i], requires_grad=True) for i in range(3)]
    pred = model.forward(*inputs, volumes)
    diff = sub(pred, np.asarray(ages, dtype=np.float64))
    backward(mean(square(diff)) * float(len(views)))
    out = np.stack([t.grad if t.grad is not None else np.zeros(t.shape) for t in inputs], axis=1)
    for p in model.parameters():
        p.grad = None
    return out


def view_gradients(model: BrainAgeModel, sample: PseudoSample) -> ViewGradients:
    g = batch_view_gradients(model, sample.views[None], np.asarray(sample.region_volumes)[None],
                             np.array([sample.age]))[0]
    return ViewGradients(g[0], g[1], g[2])


def fuse_to_volume(grads: ViewGradients | Sequence[np.ndarray], crop: CropGeometry) -> np.ndarray:
    """|Σ_views scatter(g_view)| in the full volume frame; uncovered voxels are 0."""
    grads = list(grads)
    if len(grads) != 3:
        raise ContractError(f"expected three view gradients, got {len(grads)}")
    out = np.zeros(crop.volume_shape)
    for view, g in enumerate(grads):
        if tuple(g.shape) != tuple(crop.chunk_shape):
            raise ShapeError(f"view {view} gradient shape {g.shape} != crop chunk shape {crop.chunk_shape}")
        crop.scatter(g, view, out)
    return np.abs(out)


def average_maps(maps: Sequence[np.ndarray]) -> np.ndarray:
    if len(maps) == 0:
        raise ContractError("cannot average an empty list of gradient maps")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ShapeError(f"gradient map shapes differ: {m.shape} vs {shape}")
    return np.mean(np.stack(maps), axis=0)


def rank_regions(gbar: np.ndarray, label_map: np.ndarray, volumes: np.ndarray | None = None,
                 voxel_volume: float = 8.0) -> list[RegionAttribution]:
    """Score_r = Σ_{voxels of r} Ḡ / volume_r, sorted descending, ties by region id.

    ``volumes`` (mm³, index r−1 for region r) defaults to the voxel counts of
    ``label_map`` times ``voxel_volume``.  Zero-volume regions score 0 and go last.
    """
    if gbar.shape != label_map.shape:
        raise ShapeError(f"gradient map {gbar.shape} and label map {label_map.shape} are not aligned")
    if volumes is None:
        n_regions = int(label_map.max()) if label_map.size else 0
        volumes = region_volumes(label_map, n_regions, voxel_volume)
    volumes = np.asarray(volumes, dtype=np.float64)
    n_regions = volumes.size
    labels = label_map.astype(np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() > n_regions):
        raise ContractError(f"label map has ids outside 0..{n_regions}")
    sums = np.bincount(labels, weights=gbar.ravel(), minlength=n_regions + 1)[1:]
    rows = []
    for i in range(n_regions):
        rid = i + 1
        if volumes[i] <= 0:
            log.warning("region %d has zero volume; scored 0 and ranked last", rid)
            rows.append((1, 0.0, rid, float(sums[i]), 0.0))
        else:
            rows.append((0, -float(sums[i] / volumes[i]), rid, float(sums[i]), float(volumes[i])))
    rows.sort()
    return [RegionAttribution(rid, attr, vol, -neg if neg else 0.0, rank + 1)
            for rank, (_, neg, rid, attr, vol) in enumerate(rows)]


def corpus_gradient_map(model: BrainAgeModel, views: np.ndarray, volumes: np.ndarray, ages: np.ndarray,
                        crop: CropGeometry, batch_size: int = 16) -> FusedGradientMap:
    """Ḡ over the given samples, accumulated in sample order."""
    maps = []
    for i in range(0, len(views), batch_size):
        g = batch_view_gradients(model, views[i:i + batch_size], volumes[i:i + batch_size], ages[i:i + batch_size])
        maps.extend(fuse_to_volume(row, crop) for row in g)
    return FusedGradientMap(average_maps(maps), len(maps))


def write_ranking_csv(ranking: Sequence[RegionAttribution], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "region_id", "score", "volume"])
        for r in ranking:
            w.writerow([r.rank, r.region_id, repr(r.score), repr(r.volume)])


def ranking_svg(ranking: Sequence[RegionAttribution], top: int = 15, highlight: Sequence[int] = ()) -> str:
    rows = list(ranking)[:top]
    return svg.bars([f"region {r.region_id}" for r in rows], [r.score for r in rows],
                    f"Top {len(rows)} regions by gradient per volume", "score",
                    highlight=[f"region {h}" for h in highlight])
