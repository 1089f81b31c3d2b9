"""DGCNN-style trunk: EdgeConv layers over dynamic kNN graphs with group norm."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensorgrad as tg
from .geometry import knn_indices

LEAKY_SLOPE = 0.2


@dataclass
class TrunkConfig:
    widths: Tuple[int, ...] = (64, 64, 128, 256)
    edge_k: int = 20
    groups: int = 8
    dynamic: bool = True
    # "sequential": layer l consumes layer l-1. "table": the last layer
    # consumes the second layer's output, as the architecture table lists it.
    wiring: str = "sequential"

    def input_widths(self, in_dim: int = 3) -> List[int]:
        ins = [in_dim] + list(self.widths[:-1])
        if self.wiring == "table":
            ins[3] = self.widths[1]
        elif self.wiring != "sequential":
            raise ValueError(f"unknown trunk wiring {self.wiring!r}")
        return ins


def init_trunk(store: tg.ParameterStore, prefix: str, cfg: TrunkConfig, rng: np.random.Generator) -> None:
    for layer, (d_in, d_out) in enumerate(zip(cfg.input_widths(), cfg.widths), start=1):
        if d_out % cfg.groups:
            raise ValueError(f"{cfg.groups} groups do not divide width {d_out}")
        bound = 1.0 / np.sqrt(2 * d_in)
        store.add(f"{prefix}.{layer}.W", rng.uniform(-bound, bound, (2 * d_in, d_out)).astype(np.float32))
        store.add(f"{prefix}.{layer}.gamma", np.ones(d_out, np.float32))
        store.add(f"{prefix}.{layer}.beta", np.zeros(d_out, np.float32))


def edge_conv(x: tg.Node, W: tg.Node, gamma: tg.Node, beta: tg.Node, edge_k: int, groups: int,
              neighbors: Optional[np.ndarray] = None, fused: bool = True) -> tg.Node:
    """One EdgeConv layer.

    Edge features ``[x_i; x_j - x_i]`` go through the shared map ``W``, a
    leaky rectifier and group norm, then are max-pooled over the ``edge_k``
    neighbours. The map is evaluated as ``x_i (W1 - W2) + x_j W2`` so the
    ``2 D``-wide edge tensor is never built; ``fused`` selects the single
    normalize-and-pool primitive over the three-step chain.
    """
    n, d_in = x.shape
    if W.shape[0] != 2 * d_in:
        raise ValueError(f"EdgeConv weight expects input width {W.shape[0] // 2}, got {d_in}")
    if edge_k >= n:
        raise ValueError(f"edge_k={edge_k} must be below the number of points ({n})")
    if neighbors is None:
        neighbors = knn_indices(x.value, edge_k, exclude_self=True)
    tape = x.tape
    w_top = _rows(W, 0, d_in)
    w_bot = _rows(W, d_in, 2 * d_in)
    center = tg.matmul(x, tg.sub(w_top, w_bot))              # P x D_out
    other = tg.gather_rows(tg.matmul(x, w_bot), neighbors)   # P x k x D_out
    h = tg.add(other, tg.broadcast_to(_unsqueeze(center), other.shape))
    if fused:
        return tg.edge_norm_max(h, gamma, beta, groups, LEAKY_SLOPE)
    h = tg.leaky_relu(h, LEAKY_SLOPE)
    h = tg.group_norm(h, gamma, beta, groups)
    return tg.reduce_max(h, axis=1)


def _rows(W: tg.Node, start: int, stop: int) -> tg.Node:
    return tg.gather_rows(W, np.arange(start, stop))


def _unsqueeze(a: tg.Node) -> tg.Node:
    # P x D -> P x 1 x D as a gather over a singleton axis
    return tg.gather_rows(a, np.arange(a.shape[0])[:, None])


def trunk(positions: tg.Node, params: Dict[str, tg.Node], prefix: str, cfg: TrunkConfig,
          edge_k: Optional[int] = None) -> List[tg.Node]:
    """Per-layer outputs of the stacked EdgeConv trunk.

    The first layer's graph comes from 3-D positions; later layers rebuild
    it in their input feature space unless ``cfg.dynamic`` is off.
    """
    k = cfg.edge_k if edge_k is None else edge_k
    static = None if cfg.dynamic else knn_indices(positions.value, k, exclude_self=True)
    outs: List[tg.Node] = []
    for layer in range(1, len(cfg.widths) + 1):
        if layer == 1:
            inp = positions
        elif cfg.wiring == "table" and layer == 4:
            inp = outs[1]
        else:
            inp = outs[-1]
        outs.append(edge_conv(inp, params[f"{prefix}.{layer}.W"], params[f"{prefix}.{layer}.gamma"],
                              params[f"{prefix}.{layer}.beta"], k, cfg.groups, neighbors=static))
    return outs


def dgcnn_trunk(positions: tg.Node, params: Dict[str, tg.Node], prefix: str, cfg: TrunkConfig,
                edge_k: Optional[int] = None):
    """Returns ``(per_layer, concat)``."""
    outs = trunk(positions, params, prefix, cfg, edge_k)
    return outs, tg.concat(outs)
