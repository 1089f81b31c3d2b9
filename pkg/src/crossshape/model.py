"""CrossShapeNet: trunk, per-layer cross/self attention, compatibility mixing, MLP head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensorgrad as tg
from .attention import csa_layer, init_attention, multi_shape_aggregate
from .backbone import TrunkConfig, dgcnn_trunk, init_trunk
from .compatibility import CompatConfig, compatibility_weights, global_descriptor, init_compat
from .geometry import LabeledPointCloud


@dataclass
class ModelConfig:
    num_classes: int = 4
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    head_widths: Tuple[int, ...] = (1024, 512, 256, 128)
    dropout: float = 0.5
    compat: CompatConfig = field(default_factory=CompatConfig)
    key_subsample: Optional[int] = None

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(self.trunk.widths)


def init_params(cfg: ModelConfig, seed: int) -> tg.ParameterStore:
    """Fan-in uniform weights, unit/zero group-norm affine terms."""
    rng = np.random.default_rng(seed)
    store = tg.ParameterStore()
    init_trunk(store, "backbone", cfg.trunk, rng)
    init_attention(store, "csa", cfg.widths, rng)
    init_attention(store, "ssa", cfg.widths, rng)
    d_in = 2 * sum(cfg.widths)
    for layer, d_out in enumerate(list(cfg.head_widths) + [cfg.num_classes], start=1):
        bound = 1.0 / np.sqrt(d_in)
        store.add(f"head.{layer}.W", rng.uniform(-bound, bound, (d_in, d_out)).astype(np.float32))
        store.add(f"head.{layer}.b", rng.uniform(-bound, bound, (d_out,)).astype(np.float32))
        d_in = d_out
    init_compat(store, cfg.compat, rng)
    return store


def is_compat(name: str) -> bool:
    return name.startswith("compat.")


@dataclass
class ForwardResult:
    probs: tg.Node
    weights: tg.Node
    # (neighbour index, layer) -> attention node; neighbour index -1 is self
    attention: Dict[Tuple[int, int], tg.Node] = field(default_factory=dict)


def _weights_node(tape: tg.Tape, weights, k: int, dtype) -> tg.Node:
    w = np.asarray(weights, dtype=dtype).reshape(1, -1)
    if w.shape[1] != k + 1:
        raise ValueError(f"expected {k + 1} compatibility weights (self first), got {w.shape[1]}")
    if abs(float(w.sum()) - 1.0) > 1e-5:
        raise ValueError("compatibility weights must sum to 1")
    return tape.const(w)


def forward(
    query: LabeledPointCloud,
    neighbors: Sequence[LabeledPointCloud],
    params: Dict[str, tg.Node],
    cfg: ModelConfig,
    *,
    weights=None,
    descriptors: Optional[Sequence[np.ndarray]] = None,
    training: bool = False,
    seed: int = 0,
    query_edge_k: Optional[int] = None,
    keep_attention: bool = False,
) -> ForwardResult:
    """Per-point part probabilities for ``query``.

    Compatibility weights (self first) come from ``weights`` if given, else
    from ``descriptors`` (cached ``[query, *neighbors]`` descriptors), else
    from the compatibility net evaluated on the tape. ``query_edge_k``
    overrides the EdgeConv neighbour count for the query trunk only, for
    inference at a higher resolution than the neighbours.
    """
    tape = next(iter(params.values())).tape
    dtype = params["backbone.1.W"].dtype
    rng = np.random.default_rng(seed) if training else None

    def positions(cloud):
        return tape.const(np.asarray(cloud.positions, dtype=dtype))

    q_layers, q_cat = dgcnn_trunk(positions(query), params, "backbone", cfg.trunk, query_edge_k)
    n_layers = [dgcnn_trunk(positions(n), params, "backbone", cfg.trunk)[0] for n in neighbors]

    attention: Dict[Tuple[int, int], tg.Node] = {}
    ssa_out: List[tg.Node] = []
    csa_out: List[List[tg.Node]] = [[] for _ in neighbors]
    for l, x_m in enumerate(q_layers, start=1):
        res = csa_layer(x_m, x_m, params, "ssa", l)
        ssa_out.append(res.output)
        if keep_attention:
            attention[(-1, l)] = res.attention
        for j, layers in enumerate(n_layers):
            res = csa_layer(x_m, layers[l - 1], params, "csa", l, cfg.key_subsample, seed=seed * 131 + l)
            csa_out[j].append(res.output)
            if keep_attention:
                attention[(j, l)] = res.attention

    k = len(neighbors)
    if k == 0:
        w = tape.const(np.ones((1, 1), dtype=dtype))
    elif weights is not None:
        w = _weights_node(tape, weights, k, dtype)
    elif descriptors is not None:
        g = [tape.const(np.asarray(d, dtype=dtype)) for d in descriptors]
        w = compatibility_weights(g[0], g[1:], params["compat.Vq"], params["compat.Vk"])
    else:
        g_m = global_descriptor(positions(query), params, cfg.compat)
        g_n = [global_descriptor(positions(n), params, cfg.compat) for n in neighbors]
        w = compatibility_weights(g_m, g_n, params["compat.Vq"], params["compat.Vk"])

    mixed = multi_shape_aggregate(tg.concat(ssa_out), [tg.concat(c) for c in csa_out], w)
    h = tg.concat([q_cat, mixed])
    n_head = len(cfg.head_widths) + 1
    for layer in range(1, n_head + 1):
        h = tg.add(tg.matmul(h, params[f"head.{layer}.W"]), params[f"head.{layer}.b"])
        if layer < n_head:
            h = tg.relu(h)
            if layer > 1:
                h = tg.dropout(h, cfg.dropout, rng, training)
    return ForwardResult(tg.softmax_rows(h), w, attention)


def predict(store: tg.ParameterStore, query: LabeledPointCloud, neighbors: Sequence[LabeledPointCloud],
            cfg: ModelConfig, **kwargs) -> np.ndarray:
    """Evaluation-mode probabilities without recording a tape."""
    tape = tg.Tape(enabled=False)
    params = {n: tape.leaf(v) for n, v in store.arrays.items()}
    return forward(query, neighbors, params, cfg, **kwargs).probs.value


def export_attention(query: LabeledPointCloud, neighbor: LabeledPointCloud, store: tg.ParameterStore,
                     cfg: ModelConfig, layer: int, region: Sequence[int]) -> np.ndarray:
    """Total attention each key point of ``neighbor`` receives from the query rows in ``region``."""
    region = np.asarray(region, dtype=np.intp)
    if region.size == 0:
        raise ValueError("empty query region")
    if not 1 <= layer <= len(cfg.widths):
        raise ValueError(f"layer must lie in 1..{len(cfg.widths)}")
    if region.min() < 0 or region.max() >= query.n_points:
        raise ValueError("region index out of range")
    tape = tg.Tape(enabled=False)
    params = {n: tape.leaf(v) for n, v in store.arrays.items()}
    q_layers, _ = dgcnn_trunk(tape.const(query.positions), params, "backbone", cfg.trunk)
    n_layers, _ = dgcnn_trunk(tape.const(neighbor.positions), params, "backbone", cfg.trunk)
    A = csa_layer(q_layers[layer - 1], n_layers[layer - 1], params, "csa", layer).attention.value
    return A[region].sum(axis=0)
