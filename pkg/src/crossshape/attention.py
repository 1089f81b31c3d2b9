"""Cross-shape attention: projections, point attention, non-local convolution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from . import tensorgrad as tg
from .geometry import subsample_indices


@dataclass
class AttentionResult:
    output: tg.Node
    attention: tg.Node
    key_index: Optional[np.ndarray] = None


def init_attention(store: tg.ParameterStore, prefix: str, widths: Sequence[int], rng: np.random.Generator) -> None:
    for layer, d in enumerate(widths, start=1):
        bound = 1.0 / np.sqrt(d)
        for role in ("Wq", "Wk", "Wv"):
            store.add(f"{prefix}.{layer}.{role}", rng.uniform(-bound, bound, (d, d)).astype(np.float32))


def project(x: tg.Node, W: tg.Node) -> tg.Node:
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"width mismatch: features {x.shape[-1]} vs weight {W.shape}")
    return tg.matmul(x, W)


def attention_matrix(q: tg.Node, k: tg.Node) -> tg.Node:
    """Row-wise softmax of ``q k^T / sqrt(D)``."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    logits = tg.scale(tg.matmul(q, tg.transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    return tg.softmax_rows(logits)


def cross_shape_convolve(A: tg.Node, x_n: tg.Node, Wv: tg.Node) -> tg.Node:
    """``x'_i = sum_j A[i, j] Wv x_j`` in row-vector form."""
    if A.shape[1] != x_n.shape[0]:
        raise ValueError(f"attention has {A.shape[1]} columns but {x_n.shape[0]} key rows")
    return tg.matmul(A, project(x_n, Wv))


def csa_layer(x_m: tg.Node, x_n: tg.Node, params: Dict[str, tg.Node], prefix: str, layer: int,
              key_subsample: Optional[int] = None, seed: int = 0) -> AttentionResult:
    """Attend from the points of ``x_m`` to those of ``x_n``.

    Passing ``x_n = x_m`` with the self-attention parameter prefix gives
    self-shape attention. With ``key_subsample`` only a seeded uniform subset
    of key rows enters the softmax and the sum.
    """
    Wq, Wk, Wv = (params[f"{prefix}.{layer}.{r}"] for r in ("Wq", "Wk", "Wv"))
    d = Wq.shape[0]
    if x_m.shape[-1] != d or x_n.shape[-1] != d:
        raise ValueError(f"layer width {d} does not match features {x_m.shape[-1]}/{x_n.shape[-1]}")
    key_index = None
    if key_subsample is not None and key_subsample < x_n.shape[0]:
        key_index = subsample_indices(x_n.shape[0], key_subsample, seed)
        x_n = tg.gather_rows(x_n, key_index)
    A = attention_matrix(project(x_m, Wq), project(x_n, Wk))
    return AttentionResult(cross_shape_convolve(A, x_n, Wv), A, key_index)


def multi_shape_aggregate(x_self: tg.Node, x_neighbors: Sequence[tg.Node], weights: tg.Node) -> tg.Node:
    """Compatibility-weighted sum of the self term and the neighbour terms.

    ``weights`` is a ``1 x (1 + len(x_neighbors))`` row whose first entry
    belongs to the self term.
    """
    if weights.shape != (1, 1 + len(x_neighbors)):
        raise ValueError(f"expected 1 x {1 + len(x_neighbors)} weights, got {weights.shape}")
    if abs(float(weights.value.sum()) - 1.0) > 1e-6:
        raise ValueError("compatibility weights must sum to 1")
    for x in x_neighbors:
        if x.shape != x_self.shape:
            raise ValueError(f"shape mismatch {x.shape} vs {x_self.shape}")
    column = tg.transpose(weights)
    out = tg.mul(x_self, tg.gather_rows(column, [0]))
    for j, x in enumerate(x_neighbors, start=1):
        out = tg.add(out, tg.mul(x, tg.gather_rows(column, [j])))
    return out
