"""Shape compatibility: pooled global descriptors and scaled dot-product scores."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np

from . import tensorgrad as tg
from .backbone import TrunkConfig, init_trunk, trunk

PREFIX = "compat"


@dataclass
class CompatConfig:
    trunk: TrunkConfig = field(default_factory=lambda: TrunkConfig(widths=(64, 128, 128, 256)))
    embed: int = 1024

    @property
    def descriptor_width(self) -> int:
        return 2 * self.embed


def init_compat(store: tg.ParameterStore, cfg: CompatConfig, rng: np.random.Generator) -> None:
    init_trunk(store, PREFIX, cfg.trunk, rng)
    cat = sum(cfg.trunk.widths)
    bound = 1.0 / np.sqrt(cat)
    store.add(f"{PREFIX}.5.W", rng.uniform(-bound, bound, (cat, cfg.embed)).astype(np.float32))
    store.add(f"{PREFIX}.5.b", rng.uniform(-bound, bound, (cfg.embed,)).astype(np.float32))
    d = cfg.descriptor_width
    bound = 1.0 / np.sqrt(d)
    store.add(f"{PREFIX}.Vq", rng.uniform(-bound, bound, (d, d)).astype(np.float32))
    store.add(f"{PREFIX}.Vk", rng.uniform(-bound, bound, (d, d)).astype(np.float32))


def pool_descriptor(y: tg.Node) -> tg.Node:
    """``[max_i y_i ; mean_i y_i]`` as a ``1 x 2D`` row."""
    return tg.concat([tg.reduce_max(y, axis=0, keepdims=True), tg.reduce_mean(y, axis=0, keepdims=True)])


def global_descriptor(positions: tg.Node, params: Dict[str, tg.Node], cfg: CompatConfig) -> tg.Node:
    outs = trunk(positions, params, PREFIX, cfg.trunk)
    y = tg.add(tg.matmul(tg.concat(outs), params[f"{PREFIX}.5.W"]), params[f"{PREFIX}.5.b"])
    return pool_descriptor(y)


def pairwise_score(g_m: tg.Node, g_n: tg.Node, Vq: tg.Node, Vk: tg.Node) -> tg.Node:
    """``(Vq g_m) . (Vk g_n) / sqrt(D')`` as a ``1 x 1`` node."""
    if g_m.shape[-1] != Vq.shape[0] or g_n.shape[-1] != Vk.shape[0]:
        raise ValueError("descriptor width does not match the query/key maps")
    q = tg.matmul(g_m, Vq)
    k = tg.matmul(g_n, Vk)
    return tg.scale(tg.matmul(q, tg.transpose(k)), 1.0 / np.sqrt(g_m.shape[-1]))


def compatibility_weights(g_m: tg.Node, g_neighbors: Sequence[tg.Node], Vq: tg.Node, Vk: tg.Node) -> tg.Node:
    """Softmax over ``[s(m, m), s(m, n_1), ...]``; self comes first."""
    scores = [pairwise_score(g_m, g_m, Vq, Vk)] + [pairwise_score(g_m, g, Vq, Vk) for g in g_neighbors]
    return tg.softmax_rows(tg.concat(scores))


def normalize_compatibilities(scores: Mapping[str, float]) -> Dict[str, float]:
    """Softmax over a name -> score map (which must contain the shape itself)."""
    if not scores:
        raise ValueError("empty compatibility set")
    names = list(scores)
    s = np.array([scores[n] for n in names], dtype=np.float64)
    e = np.exp(s - s.max())
    w = e / e.sum()
    return dict(zip(names, w.tolist()))


def score_matrix(descriptors: np.ndarray, Vq: np.ndarray, Vk: np.ndarray) -> np.ndarray:
    """All-pairs ``s(m, n)`` for stacked ``M x D'`` descriptors (float64)."""
    g = np.asarray(descriptors, dtype=np.float64)
    q = g @ np.asarray(Vq, dtype=np.float64)
    k = g @ np.asarray(Vk, dtype=np.float64)
    return (q @ k.T) / np.sqrt(g.shape[1])


class DescriptorCache:
    """Dropout-free descriptors keyed by shape id, valid for one parameter version."""

    def __init__(self, cfg: CompatConfig):
        self.cfg = cfg
        self.version = -1
        self._store: Dict[tuple, np.ndarray] = {}

    def invalidate(self) -> None:
        self._store.clear()
        self.version = -1

    def get(self, cloud, params: tg.ParameterStore, version: int) -> np.ndarray:
        if version != self.version:
            self._store.clear()
            self.version = version
        key = (cloud.shape_id, cloud.n_points)
        if key not in self._store:
            tape = tg.Tape(enabled=False)
            bound = {n: tape.leaf(params[n]) for n in params.names(PREFIX + ".")}
            self._store[key] = global_descriptor(tape.leaf(cloud.positions), bound, self.cfg).value
        return self._store[key]

    def many(self, clouds, params: tg.ParameterStore, version: int) -> List[np.ndarray]:
        return [self.get(c, params, version) for c in clouds]
