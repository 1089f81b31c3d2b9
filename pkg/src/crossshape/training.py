"""Adam, per-epoch training and the alternating segmentation/compatibility schedule."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensorgrad as tg
from .collection_graph import CollectionGraph, init_graph, reweight, update_graph
from .compatibility import DescriptorCache
from .config import RunConfig, TrainConfig, dumps_config, loads_config
from .evaluation import SegmentationResult, part_miou, shape_miou
from .formats import dumps_checkpoint, loads_checkpoint
from .geometry import LabeledPointCloud, d2_descriptor
from .model import ModelConfig, forward, init_params, is_compat, predict

LOG_COLUMNS = ("phase", "epoch", "train_loss", "val_part_miou", "val_shape_miou")


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, store: tg.ParameterStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        zeros = {n: np.zeros_like(a) for n, a in store.arrays.items()}
        return cls(lr, beta1, beta2, eps, 0, zeros, {n: z.copy() for n, z in zeros.items()})

    def as_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "m": self.m, "v": self.v}


def adam_step(store: tg.ParameterStore, grads: Mapping[str, np.ndarray], state: AdamState,
              names: Optional[Sequence[str]] = None) -> None:
    """Bias-corrected Adam update of ``names`` (default: trainable ones), in place.

    Every updated parameter needs a finite gradient; everything else is
    left bit-identical.
    """
    names = store.trainable_names() if names is None else list(names)
    for n in names:
        if n not in grads:
            raise KeyError(f"missing gradient for {n}")
        if not np.all(np.isfinite(grads[n])):
            raise tg.NonFiniteError(f"non-finite gradient for {n}")
    state.t += 1
    t = state.t
    for n in names:
        p = store.arrays[n]
        dt = p.dtype.type
        g = np.asarray(grads[n], dtype=p.dtype)
        m = state.m[n] = dt(state.beta1) * state.m[n] + dt(1 - state.beta1) * g
        v = state.v[n] = dt(state.beta2) * state.v[n] + dt(1 - state.beta2) * (g * g)
        step = state.lr / (1 - state.beta1 ** t)
        denom = np.sqrt(v / dt(1 - state.beta2 ** t)) + dt(state.eps)
        store.arrays[n] = p - dt(step) * m / denom


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(store: tg.ParameterStore, state: Optional[AdamState], graph: Optional[CollectionGraph],
                    path: Union[str, Path], meta: Optional[dict] = None) -> None:
    data = dumps_checkpoint(store.arrays, store.trainable, state.as_dict() if state else None, graph, meta or {})
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


@dataclass
class Checkpoint:
    store: tg.ParameterStore
    state: Optional[AdamState]
    graph: Optional[CollectionGraph]
    meta: dict

    def config(self) -> RunConfig:
        return loads_config(self.meta.get("config", ""))


def load_checkpoint(path: Union[str, Path], expect: Optional[tg.ParameterStore] = None) -> Checkpoint:
    """Read a checkpoint; with ``expect``, names and shapes must match it."""
    raw = loads_checkpoint(Path(path).read_bytes())
    store = tg.ParameterStore()
    for n, a in raw["params"].items():
        store.add(n, a, n in raw["trainable"])
    if expect is not None:
        if set(expect.arrays) != set(store.arrays):
            raise ValueError("checkpoint parameter names do not match the model")
        for n, a in expect.arrays.items():
            if a.shape != store[n].shape:
                raise ValueError(f"shape mismatch on load for {n}: {store[n].shape} vs {a.shape}")
    state = None
    if raw["adam"] is not None:
        a = raw["adam"]
        state = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["t"], a["m"], a["v"])
    return Checkpoint(store, state, raw["graph"], raw["meta"])


# ---------------------------------------------------------------------------
# epochs

PHASES = ("csn", "compat")


def phase_predicate(phase: str) -> Callable[[str], bool]:
    """Which parameters a phase trains; the rest stay frozen."""
    if phase == "csn":
        return lambda n: not is_compat(n)
    if phase == "compat":
        return is_compat
    raise ValueError(f"unknown phase {phase!r}")


@dataclass
class EpochMetrics:
    loss: float
    train_part_miou: float


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def shape_loss(query: LabeledPointCloud, neighbors: Sequence[LabeledPointCloud], store: tg.ParameterStore,
               cfg: ModelConfig, descriptors=None, training: bool = True, seed: int = 0):
    """Mean per-point cross-entropy for one query on a fresh tape; returns ``(loss, grads, probs)``."""
    tape = tg.Tape()
    params = store.bind(tape)
    res = forward(query, neighbors, params, cfg, descriptors=descriptors, training=training, seed=seed)
    loss = tg.cross_entropy(res.probs, query.labels)
    if not math.isfinite(float(loss.value)):
        raise tg.NonFiniteError(f"non-finite loss on shape {query.shape_id}")
    return float(loss.value), tg.backward(tape, loss), res.probs.value


def train_epoch(shapes: Sequence[LabeledPointCloud], by_id: Mapping[str, LabeledPointCloud], graph: CollectionGraph,
                store: tg.ParameterStore, state: AdamState, phase: str, cfg: ModelConfig, batch_size: int,
                seed: int, cache: Optional[DescriptorCache] = None, version: int = 0) -> EpochMetrics:
    """One pass over ``shapes`` in seeded-shuffled order.

    The csn phase reads compatibility weights from descriptors of the frozen
    compatibility net (cached); the compat phase evaluates that net on the
    tape so the segmentation loss reaches it. ``version`` identifies the
    compatibility parameters for ``cache``.
    """
    store.set_trainable(phase_predicate(phase))
    names = store.trainable_names()
    order = np.random.default_rng(seed).permutation(len(shapes))
    losses: List[float] = []
    results: List[SegmentationResult] = []
    for start in range(0, len(order), batch_size):
        batch = [shapes[i] for i in order[start:start + batch_size]]
        total: Dict[str, np.ndarray] = {}
        for q in batch:
            nbrs = [by_id[n] for n in graph.neighbors(q.shape_id)]
            desc = None
            if phase == "csn" and nbrs:
                desc = (cache or DescriptorCache(cfg.compat)).many([q] + nbrs, store, version)
            loss, grads, probs = shape_loss(q, nbrs, store, cfg, desc, True, _seed(seed, int(start), len(losses)))
            losses.append(loss)
            results.append(SegmentationResult(q.shape_id, probs.argmax(1), q.labels, q.part_count))
            for n in names:
                total[n] = grads[n] if n not in total else total[n] + grads[n]
        inv = 1.0 / len(batch)
        adam_step(store, {n: g * g.dtype.type(inv) for n, g in total.items()}, state, names)
    return EpochMetrics(float(np.mean(losses)), part_miou(results))


def validate(shapes: Sequence[LabeledPointCloud], by_id: Mapping[str, LabeledPointCloud], graph: CollectionGraph,
             store: tg.ParameterStore, cfg: ModelConfig, cache: DescriptorCache, version: int) -> Tuple[float, float]:
    """Part and shape mIoU with live compatibility weights."""
    results = []
    for q in shapes:
        nbrs = [by_id[n] for n in graph.neighbors(q.shape_id)]
        desc = cache.many([q] + nbrs, store, version) if nbrs else None
        probs = predict(store, q, nbrs, cfg, descriptors=desc)
        results.append(SegmentationResult(q.shape_id, probs.argmax(1), q.labels, q.part_count))
    return part_miou(results), shape_miou(results)


# ---------------------------------------------------------------------------
# alternating schedule

@dataclass
class TrainingResult:
    store: tg.ParameterStore
    graph: CollectionGraph
    best_val: float
    log: List[dict]
    phases_run: List[str]
    graph_versions: List[int]

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["phase"], r["epoch"], repr(r["train_loss"]), repr(r["val_part_miou"]), repr(r["val_shape_miou"])])
    return buf.getvalue()


def initial_graph(train: Sequence[LabeledPointCloud], val: Sequence[LabeledPointCloud], graph_k: int,
                  bins: int = 32, seed: int = 0) -> CollectionGraph:
    clouds = list(train) + list(val)
    desc = np.stack([d2_descriptor(c, bins=bins, seed=seed) for c in clouds])
    splits = ["train"] * len(train) + ["val"] * len(val)
    return init_graph([c.shape_id for c in clouds], splits, graph_k, desc)


def all_descriptors(clouds: Sequence[LabeledPointCloud], store: tg.ParameterStore, cfg: ModelConfig) -> Dict[str, np.ndarray]:
    cache = DescriptorCache(cfg.compat)
    return {c.shape_id: cache.get(c, store, 0) for c in clouds}


def run_training(cfg: RunConfig, train: Sequence[LabeledPointCloud], val: Sequence[LabeledPointCloud],
                 graph: Optional[CollectionGraph] = None, out_dir: Optional[Union[str, Path]] = None,
                 progress: Optional[Callable[[dict], None]] = None) -> TrainingResult:
    """Alternate segmentation and compatibility phases per ``cfg.train.phases``.

    Each phase trains until validation part mIoU has not improved for
    ``patience`` epochs (or ``max_epochs`` is reached), then reloads the best
    parameters seen in that phase. Compatibility phases are followed by a
    neighbour re-selection over the whole graph. With ``graph_k = 0`` there
    is nothing for the compatibility net to weigh and its phases are skipped.
    With ``out_dir`` the overall best model is written to ``best.ckpt`` and
    the log to ``metrics.csv``.
    """
    cfg.validate()
    tc: TrainConfig = cfg.train
    if not train or not val:
        raise ValueError("training needs non-empty train and val splits")
    mc = cfg.model
    store = init_params(mc, cfg.seed)
    if graph is None:
        graph = initial_graph(train, val, tc.graph_k, cfg.data.d2_bins, cfg.data.seed)
    graph.check()
    by_id = {c.shape_id: c for c in list(train) + list(val)}
    out = Path(out_dir) if out_dir is not None else None
    meta = {"config": dumps_config(cfg)}

    log: List[dict] = []
    phases_run: List[str] = []
    versions = [graph.version]
    best_overall = -1.0
    best_store = store.copy()
    best_graph = graph
    compat_version = 0
    for p_idx, phase in enumerate(tc.phases):
        if phase == "compat" and tc.graph_k == 0:
            continue
        phases_run.append(phase)
        label = f"{p_idx + 1}-{phase}"
        state = AdamState.fresh(store, tc.lr, tc.beta1, tc.beta2, tc.eps)
        cache = DescriptorCache(mc.compat)
        phase_best, _ = validate(val, by_id, graph, store, mc, cache, compat_version)
        phase_store = store.copy()
        stale = 0
        epoch = 0
        while stale < tc.patience and (tc.max_epochs is None or epoch < tc.max_epochs):
            epoch += 1
            m = train_epoch(train, by_id, graph, store, state, phase, mc, tc.batch(),
                            _seed(cfg.seed, p_idx, epoch), cache, compat_version)
            if phase == "compat":
                compat_version += 1
            vp, vs = validate(val, by_id, graph, store, mc, cache, compat_version)
            row = {"phase": label, "epoch": epoch, "train_loss": m.loss, "val_part_miou": vp, "val_shape_miou": vs}
            log.append(row)
            if progress:
                progress(row)
            if vp > phase_best:
                phase_best, phase_store, stale = vp, store.copy(), 0
            else:
                stale += 1
        store = phase_store
        if phase == "compat":
            graph = update_graph(graph, all_descriptors(list(train) + list(val), store, mc),
                                 store["compat.Vq"], store["compat.Vk"])
            versions.append(graph.version)
        if phase_best > best_overall:
            best_overall, best_store, best_graph = phase_best, store.copy(), graph
            if out is not None:
                save_checkpoint(best_store, None, best_graph, out / "best.ckpt", meta)
        if out is not None:
            (out / "metrics.csv").write_text(format_log(log))

    final_graph = best_graph
    if tc.graph_k > 0:
        final_graph = reweight(best_graph, all_descriptors(list(train) + list(val), best_store, mc),
                               best_store["compat.Vq"], best_store["compat.Vk"])
    best_store.set_trainable(lambda n: True)
    if out is not None:
        save_checkpoint(best_store, None, final_graph, out / "best.ckpt", meta)
    return TrainingResult(best_store, final_graph, best_overall, log, phases_run, versions)
