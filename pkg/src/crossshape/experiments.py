"""Desk-scale experiment harness shared by the scripts and the acceptance suite."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensorgrad as tg
from .attention import csa_layer
from .backbone import TrunkConfig
from .cli import make_dataset
from .compatibility import CompatConfig
from .config import RunConfig
from .evaluation import EvalReport, attach_for_eval, evaluate
from .geometry import LabeledPointCloud
from .model import ModelConfig
from .training import TrainingResult, run_training


def desk_config(seed: int = 0) -> RunConfig:
    """Full-width K1 model on 24/8/8 shapes of two four-part families at N=512.

    Patience and the epoch cap are tightened from the library defaults so the
    five phases fit a half-hour budget on one core.
    """
    cfg = RunConfig(seed=seed)
    cfg.data.seed = seed
    cfg.train.graph_k = 1
    cfg.train.patience = 5
    cfg.train.max_epochs = 30
    return cfg


def low_data_config(seed: int, graph_k: int) -> RunConfig:
    """Twelve training shapes and a narrower network, for multi-seed comparisons.

    Training keeps the library patience and has no epoch cap; small models can
    sit on a plateau for several epochs before the loss starts to fall.
    """
    cfg = RunConfig(seed=seed)
    cfg.data.seed = seed
    cfg.data.n_train = 12
    cfg.data.n_points = cfg.data.test_points = 256
    cfg.model = ModelConfig(
        trunk=TrunkConfig(widths=(32, 32, 64, 64), edge_k=16),
        head_widths=(256, 128, 64, 32),
        compat=CompatConfig(trunk=TrunkConfig(widths=(32, 32, 32, 64), edge_k=16), embed=128),
    )
    cfg.train.graph_k = graph_k
    return cfg


@dataclass
class RunOutcome:
    training: TrainingResult
    report: EvalReport
    seconds: float


def train_and_test(cfg: RunConfig, data: Optional[Dict[str, List[LabeledPointCloud]]] = None,
                   strategy: str = "direct", progress=None) -> RunOutcome:
    start = time.perf_counter()
    data = data if data is not None else make_dataset(cfg)
    res = run_training(cfg, data["train"], data["val"], progress=progress)
    shapes = {c.shape_id: c for split in data.values() for c in split}
    graph = attach_for_eval(res.store, cfg.model, res.graph, data["test"], shapes, cfg.data.n_points, cfg.eval.seed)
    report = evaluate(res.store, cfg.model, graph, data["test"], shapes, strategy, cfg.data.n_points, cfg.eval.seed)
    return RunOutcome(res, report, time.perf_counter() - start)


def compare_variants(seeds: Sequence[int], progress=None) -> Dict[str, List[float]]:
    """Test part mIoU of the K1 model and the self-attention-only model per seed.

    Both variants of one seed share the dataset and the initial weights.
    """
    out: Dict[str, List[float]] = {"k1": [], "ssa": []}
    for seed in seeds:
        data = make_dataset(low_data_config(seed, 1))
        for name, k in (("k1", 1), ("ssa", 0)):
            score = train_and_test(low_data_config(seed, k), copy.deepcopy(data)).report.part_miou
            out[name].append(score)
            if progress:
                progress(seed, name, score)
    return out


def time_csa(points: int = 2500, width: int = 64, keys: Optional[int] = None, repeats: int = 5,
             seed: int = 0) -> float:
    """Best-of-``repeats`` wall time of one cross-shape attention layer forward."""
    rng = np.random.default_rng(seed)
    tape = tg.Tape(enabled=False)
    scale = 1.0 / np.sqrt(width)
    params = {f"csa.1.{r}": tape.leaf(rng.uniform(-scale, scale, (width, width)).astype(np.float32))
              for r in ("Wq", "Wk", "Wv")}
    x_m = tape.leaf(rng.normal(size=(points, width)).astype(np.float32))
    x_n = tape.leaf(rng.normal(size=(points, width)).astype(np.float32))
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        csa_layer(x_m, x_n, params, "csa", 1, keys, seed)
        best = min(best, time.perf_counter() - t0)
    return best
