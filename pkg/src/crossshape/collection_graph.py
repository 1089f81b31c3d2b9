"""Directed graph over a shape collection whose edges pick cross-shape neighbours."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .compatibility import score_matrix

SPLITS = ("train", "val", "test")


@dataclass
class CollectionGraph:
    """Nodes in insertion order (that order is the tie-break index).

    ``edges[m]`` lists ``(neighbour id, c(m, n))``; the self weight is the
    remainder ``1 - sum`` and is never stored.
    """

    graph_k: int
    splits: Dict[str, str] = field(default_factory=dict)
    edges: Dict[str, List[Tuple[str, float]]] = field(default_factory=dict)
    version: int = 0

    @property
    def ids(self) -> List[str]:
        return list(self.splits)

    def train_ids(self) -> List[str]:
        return [i for i, s in self.splits.items() if s == "train"]

    def neighbors(self, shape_id: str) -> List[str]:
        return [n for n, _ in self.edges[shape_id]]

    def self_weight(self, shape_id: str) -> float:
        return 1.0 - sum(w for _, w in self.edges[shape_id])

    def weights(self, shape_id: str) -> List[float]:
        """``[c(m, m), c(m, n_1), ...]`` in neighbour order."""
        return [self.self_weight(shape_id)] + [w for _, w in self.edges[shape_id]]

    def check(self) -> None:
        for m, nbrs in self.edges.items():
            if len(nbrs) != self.graph_k:
                raise ValueError(f"{m} has {len(nbrs)} neighbours, expected {self.graph_k}")
            for n, w in nbrs:
                if n == m:
                    raise ValueError(f"self edge on {m}")
                if self.splits.get(n) != "train":
                    raise ValueError(f"{m} points at non-train shape {n}")
                if w < 0:
                    raise ValueError(f"negative weight on {m}->{n}")
            if abs(sum(self.weights(m)) - 1.0) > 1e-6 or self.self_weight(m) < -1e-9:
                raise ValueError(f"weights of {m} do not sum to 1")


def _rank(values: np.ndarray, candidates: Sequence[int], k: int, largest: bool) -> List[int]:
    """Pick ``k`` candidates by value; equal values go to the lower index."""
    cand = np.asarray(candidates)
    v = values[cand]
    key = -v if largest else v
    order = np.lexsort((cand, key))
    return [int(c) for c in cand[order[:k]]]


def init_graph(ids: Sequence[str], splits: Sequence[str], graph_k: int, descriptors: np.ndarray) -> CollectionGraph:
    """Link every shape to its ``graph_k`` L2-nearest training shapes.

    Weights start uniform over the neighbours and the shape itself.
    """
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if len(ids) != len(splits) or len(ids) != len(descriptors):
        raise ValueError("ids, splits and descriptors must align")
    for s in splits:
        if s not in SPLITS:
            raise ValueError(f"unknown split {s!r}")
    train = [i for i, s in enumerate(splits) if s == "train"]
    if graph_k < 0 or graph_k >= len(train):
        raise ValueError(f"graph_k={graph_k} needs more than {graph_k} training shapes (have {len(train)})")
    graph = CollectionGraph(graph_k, dict(zip(ids, splits)))
    w = 1.0 / (graph_k + 1)
    for m, shape_id in enumerate(ids):
        cand = [t for t in train if t != m]
        d = ((descriptors - descriptors[m]) ** 2).sum(axis=1)
        graph.edges[shape_id] = [(ids[n], w) for n in _rank(d, cand, graph_k, largest=False)]
    return graph


def _select(scores: np.ndarray, m: int, train: Sequence[int], k: int) -> Tuple[List[int], List[float]]:
    cand = [t for t in train if t != m]
    chosen = _rank(scores[m], cand, k, largest=True)
    s = np.array([scores[m, m]] + [scores[m, n] for n in chosen])
    e = np.exp(s - s.max())
    c = e / e.sum()
    return chosen, c[1:].tolist()


def _scores(graph_ids: Sequence[str], descriptors: Mapping[str, np.ndarray], Vq, Vk) -> np.ndarray:
    missing = [i for i in graph_ids if i not in descriptors]
    if missing:
        raise KeyError(f"no descriptor for {missing[:3]}")
    return score_matrix(np.stack([np.asarray(descriptors[i]).reshape(-1) for i in graph_ids]), Vq, Vk)


def update_graph(graph: CollectionGraph, descriptors: Mapping[str, np.ndarray], Vq, Vk,
                 ids: Optional[Sequence[str]] = None) -> CollectionGraph:
    """Re-pick neighbours of ``ids`` (default: every node) by highest score, then re-weight.

    Returns a new graph with the version bumped; the input is untouched.
    """
    new = copy.deepcopy(graph)
    all_ids = graph.ids
    scores = _scores(all_ids, descriptors, Vq, Vk)
    train = [i for i, n in enumerate(all_ids) if graph.splits[n] == "train"]
    targets = all_ids if ids is None else list(ids)
    pos = {n: i for i, n in enumerate(all_ids)}
    for shape_id in targets:
        chosen, w = _select(scores, pos[shape_id], train, graph.graph_k)
        new.edges[shape_id] = [(all_ids[n], wi) for n, wi in zip(chosen, w)]
    new.version = graph.version + 1
    return new


def reweight(graph: CollectionGraph, descriptors: Mapping[str, np.ndarray], Vq, Vk) -> CollectionGraph:
    """Recompute compatibility weights for the current neighbour sets."""
    new = copy.deepcopy(graph)
    all_ids = graph.ids
    scores = _scores(all_ids, descriptors, Vq, Vk)
    pos = {n: i for i, n in enumerate(all_ids)}
    for m, nbrs in graph.edges.items():
        s = np.array([scores[pos[m], pos[m]]] + [scores[pos[m], pos[n]] for n, _ in nbrs])
        e = np.exp(s - s.max())
        c = e / e.sum()
        new.edges[m] = [(n, float(ci)) for (n, _), ci in zip(nbrs, c[1:])]
    return new


def attach_test_shapes(graph: CollectionGraph, test_ids: Sequence[str], descriptors: Mapping[str, np.ndarray],
                       Vq, Vk) -> CollectionGraph:
    """Add test nodes wired to their highest-scoring training shapes."""
    if not test_ids:
        return copy.deepcopy(graph)
    if not graph.train_ids():
        raise ValueError("graph has no training shapes")
    new = copy.deepcopy(graph)
    for t in test_ids:
        if t in new.splits:
            raise ValueError(f"shape {t} already in graph")
        new.splits[t] = "test"
    new.edges.update({t: [] for t in test_ids})
    out = update_graph(new, descriptors, Vq, Vk, ids=test_ids)
    out.version = graph.version
    return out
