"""Segmentation metrics and test-resolution strategies."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import tensorgrad as tg
from .collection_graph import CollectionGraph, attach_test_shapes
from .compatibility import DescriptorCache
from .geometry import LabeledPointCloud, knn_query, subsample_points
from .model import ModelConfig, predict


@dataclass
class SegmentationResult:
    shape_id: str
    predicted: np.ndarray
    truth: np.ndarray
    part_count: int

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=np.int64)
        self.truth = np.asarray(self.truth, dtype=np.int64)
        if self.predicted.shape != self.truth.shape:
            raise ValueError("prediction and ground truth lengths differ")
        for arr in (self.predicted, self.truth):
            if arr.size and (arr.min() < 0 or arr.max() >= self.part_count):
                raise ValueError(f"labels must lie in [0, {self.part_count})")

    def counts(self):
        """Per-class intersection and union counts."""
        c = self.part_count
        inter = np.bincount(self.truth[self.predicted == self.truth], minlength=c)
        pred = np.bincount(self.predicted, minlength=c)
        true = np.bincount(self.truth, minlength=c)
        return inter, pred + true - inter

    def class_ious(self) -> np.ndarray:
        """IoU per class, NaN where the class is absent from both labelings."""
        inter, union = self.counts()
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, inter / np.maximum(union, 1), np.nan)

    def shape_iou(self) -> float:
        return float(np.nanmean(self.class_ious()))


def _part_count(results: Sequence[SegmentationResult]) -> int:
    if not results:
        raise ValueError("empty result set")
    counts = {r.part_count for r in results}
    if len(counts) != 1:
        raise ValueError("inconsistent part counts across results")
    return counts.pop()


def class_ious(results: Sequence[SegmentationResult]) -> np.ndarray:
    """Per-class IoU with intersections and unions pooled over all shapes."""
    c = _part_count(results)
    inter = np.zeros(c, dtype=np.int64)
    union = np.zeros(c, dtype=np.int64)
    for r in results:
        i, u = r.counts()
        inter += i
        union += u
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def part_miou(results: Sequence[SegmentationResult]) -> float:
    return float(np.nanmean(class_ious(results)))


def shape_miou(results: Sequence[SegmentationResult]) -> float:
    _part_count(results)
    return float(np.mean([r.shape_iou() for r in results]))


def nn_label_upsample(low_positions: np.ndarray, low_predictions: np.ndarray, high_positions: np.ndarray) -> np.ndarray:
    """Give each high-resolution point the prediction of its nearest low-resolution point."""
    low_positions = np.asarray(low_positions)
    if len(low_positions) == 0:
        raise ValueError("empty low-resolution source")
    nearest = knn_query(low_positions, high_positions, k=1)[:, 0]
    return np.asarray(low_predictions)[nearest]


def scaled_edge_k(edge_k: int, n_train: int, n_test: int) -> int:
    return max(1, int(round(edge_k * n_test / n_train)))


def segment(store: tg.ParameterStore, cfg: ModelConfig, graph: CollectionGraph, shape: LabeledPointCloud,
            shapes_by_id: Mapping[str, LabeledPointCloud], strategy: str = "direct",
            train_res: Optional[int] = None, seed: int = 0) -> np.ndarray:
    """Predicted labels for one shape already attached to ``graph``.

    ``direct`` runs the network on every point with the EdgeConv neighbour
    count scaled by the resolution ratio. ``upsample`` runs at ``train_res``
    on a seeded subsample and copies labels to the remaining points from the
    nearest evaluated point.
    """
    if strategy not in ("direct", "upsample"):
        raise ValueError(f"unknown strategy {strategy!r}")
    n_lo = train_res or shape.n_points
    neighbors = [shapes_by_id[n] for n in graph.neighbors(shape.shape_id)]
    weights = graph.weights(shape.shape_id)
    if strategy == "direct":
        edge_k = scaled_edge_k(cfg.trunk.edge_k, n_lo, shape.n_points)
        return predict(store, shape, neighbors, cfg, weights=weights, query_edge_k=edge_k).argmax(axis=1)
    low, _ = subsample_points(shape, min(n_lo, shape.n_points), seed)
    probs = predict(store, low, neighbors, cfg, weights=weights)
    return nn_label_upsample(low.positions, probs.argmax(axis=1), shape.positions)


def attach_for_eval(store: tg.ParameterStore, cfg: ModelConfig, graph: CollectionGraph,
                    shapes: Sequence[LabeledPointCloud], shapes_by_id: Mapping[str, LabeledPointCloud],
                    train_res: int, seed: int = 0) -> CollectionGraph:
    """Wire unseen shapes to training shapes by compatibility score.

    Descriptors of the new shapes come from a seeded ``train_res`` subsample
    so the compatibility net sees the resolution it was trained on.
    """
    cache = DescriptorCache(cfg.compat)
    desc = {i: cache.get(shapes_by_id[i], store, 0) for i in graph.ids}
    for j, s in enumerate(shapes):
        low = subsample_points(s, min(train_res, s.n_points), seed + j)[0] if s.n_points > train_res else s
        desc[s.shape_id] = cache.get(low, store, 0)
    return attach_test_shapes(graph, [s.shape_id for s in shapes], desc, store["compat.Vq"], store["compat.Vk"])


@dataclass
class EvalReport:
    strategy: str
    results: List[SegmentationResult]
    part_miou: float
    shape_miou: float
    edge_k: int

    def class_ious(self) -> np.ndarray:
        return class_ious(self.results)

    def to_csv(self) -> str:
        c = self.results[0].part_count
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["shape_id"] + [f"iou_{i}" for i in range(c)] + ["shape_iou", "part_miou"])
        for r in self.results:
            w.writerow([r.shape_id] + [repr(float(x)) for x in r.class_ious()] + [repr(r.shape_iou()), ""])
        w.writerow(["summary"] + [repr(float(x)) for x in self.class_ious()] + [repr(self.shape_miou), repr(self.part_miou)])
        return buf.getvalue()


def evaluate(
    store: tg.ParameterStore,
    cfg: ModelConfig,
    graph: CollectionGraph,
    test_shapes: Sequence[LabeledPointCloud],
    shapes_by_id: Mapping[str, LabeledPointCloud],
    strategy: str = "direct",
    train_res: Optional[int] = None,
    seed: int = 0,
) -> EvalReport:
    """Segment ``test_shapes`` (already attached to ``graph``) and score them."""
    results = []
    edge_k = cfg.trunk.edge_k
    for i, shape in enumerate(test_shapes):
        if strategy == "direct":
            edge_k = scaled_edge_k(cfg.trunk.edge_k, train_res or shape.n_points, shape.n_points)
        pred = segment(store, cfg, graph, shape, shapes_by_id, strategy, train_res, seed + i)
        results.append(SegmentationResult(shape.shape_id, pred, shape.labels, shape.part_count))
    return EvalReport(strategy, results, part_miou(results), shape_miou(results), edge_k)
