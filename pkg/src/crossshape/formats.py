"""On-disk formats: point clouds, collection graphs and binary checkpoints."""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .collection_graph import SPLITS, CollectionGraph
from .geometry import LabeledPointCloud

PathLike = Union[str, Path]


class FormatError(ValueError):
    """Malformed or truncated artifact."""


# ---------------------------------------------------------------------------
# point clouds

PC_MAGIC = "CSNPC"
PC_VERSION = 1


def _fmt(x: np.float32) -> str:
    return np.format_float_positional(x, precision=9, unique=False, fractional=False, trim="-")


def dumps_point_cloud(cloud: LabeledPointCloud) -> str:
    labels = cloud.labels if cloud.labels is not None else np.full(cloud.n_points, -1)
    out = [f"{PC_MAGIC} {PC_VERSION} {cloud.n_points} {cloud.part_count}"]
    for p, lab in zip(cloud.positions.astype(np.float32), labels):
        out.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {int(lab)}")
    return "\n".join(out) + "\n"


def loads_point_cloud(text: str, shape_id: str = "", family: str = "") -> LabeledPointCloud:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty point-cloud file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != PC_MAGIC:
        raise FormatError(f"bad point-cloud header {lines[0]!r}")
    if head[1] != str(PC_VERSION):
        raise FormatError(f"unsupported point-cloud version {head[1]}")
    try:
        n, c = int(head[2]), int(head[3])
        rows = [ln.split() for ln in lines[1:]]
        if len(rows) != n or any(len(r) != 4 for r in rows):
            raise FormatError(f"expected {n} rows of 4 fields")
        pos = np.array([r[:3] for r in rows], dtype=np.float64).astype(np.float32)
        lab = np.array([int(r[3]) for r in rows], dtype=np.int64)
    except ValueError as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(str(e)) from e
    unlabeled = lab < 0
    if unlabeled.any() and not unlabeled.all():
        raise FormatError("mixed labeled and unlabeled points")
    try:
        return LabeledPointCloud(pos, None if unlabeled.all() else lab, c, shape_id, family)
    except ValueError as e:
        raise FormatError(str(e)) from e


def save_point_cloud(cloud: LabeledPointCloud, path: PathLike) -> None:
    Path(path).write_text(dumps_point_cloud(cloud))


def load_point_cloud(path: PathLike, shape_id: Optional[str] = None, family: str = "") -> LabeledPointCloud:
    path = Path(path)
    return loads_point_cloud(path.read_text(), shape_id if shape_id is not None else path.stem, family)


# ---------------------------------------------------------------------------
# collection graphs

def dumps_graph(graph: CollectionGraph) -> str:
    out = [f"# graph_k {graph.graph_k} version {graph.version}"]
    for m, split in graph.splits.items():
        nbrs = graph.edges.get(m, [])
        out.append(" ".join([m, split, str(len(nbrs))] + [f"{n}:{float(w)!r}" for n, w in nbrs]))
    return "\n".join(out) + "\n"


def loads_graph(text: str) -> CollectionGraph:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise FormatError("graph file lacks its header comment")
    head = lines[0][1:].split()
    try:
        meta = dict(zip(head[::2], head[1::2]))
        graph = CollectionGraph(int(meta["graph_k"]), version=int(meta["version"]))
    except (KeyError, ValueError) as e:
        raise FormatError(f"bad graph header {lines[0]!r}") from e
    for ln in lines[1:]:
        if not ln.strip() or ln.startswith("#"):
            continue
        parts = ln.split()
        if len(parts) < 3:
            raise FormatError(f"short graph line {ln!r}")
        m, split, k = parts[0], parts[1], parts[2]
        if split not in SPLITS:
            raise FormatError(f"unknown split {split!r}")
        if m in graph.splits:
            raise FormatError(f"duplicate node {m}")
        try:
            k = int(k)
            if len(parts) != 3 + k:
                raise FormatError(f"node {m} declares {k} neighbours but lists {len(parts) - 3}")
            edges = []
            for tok in parts[3:]:
                n, w = tok.rsplit(":", 1)
                edges.append((n, float(w)))
        except ValueError as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError(f"bad graph line {ln!r}") from e
        graph.splits[m] = split
        graph.edges[m] = edges
    try:
        graph.check()
    except ValueError as e:
        raise FormatError(str(e)) from e
    return graph


def save_graph(graph: CollectionGraph, path: PathLike) -> None:
    Path(path).write_text(dumps_graph(graph))


def load_graph(path: PathLike) -> CollectionGraph:
    return loads_graph(Path(path).read_text())


# ---------------------------------------------------------------------------
# checkpoints
#
# magic, u32 format version, then sections (u32 tag length, tag, u64 payload
# length, payload). Array tables are u32 count followed by entries of
# (u32 name length, name, u32 rank, rank x u32 extents, float32 LE data).

CKPT_MAGIC = b"CSNCKPT1"
CKPT_VERSION = 1


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def done(self) -> bool:
        return self.pos == len(self.data)


def _table_bytes(arrays: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise ValueError(f"checkpoint arrays are float32; {name} is {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    return buf.getvalue()


def _read_table(r: _Reader) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.text()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    return out


def _section(tag: str, payload: bytes) -> bytes:
    raw = tag.encode("ascii")
    return struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload


def dumps_checkpoint(params: Dict[str, np.ndarray], trainable: Dict[str, bool], adam: Optional[dict],
                     graph: Optional[CollectionGraph], meta: dict) -> bytes:
    """``adam`` holds ``m``, ``v`` (array dicts), ``t`` and the hyperparameters."""
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    out.append(_section("params", _table_bytes(params)))
    out.append(_section("trainable", json.dumps([n for n in params if trainable.get(n, True)]).encode()))
    if adam is not None:
        hyper = struct.pack("<Q4d", adam["t"], adam["lr"], adam["beta1"], adam["beta2"], adam["eps"])
        out.append(_section("adam", hyper + _table_bytes(adam["m"]) + _table_bytes(adam["v"])))
    if graph is not None:
        out.append(_section("graph", dumps_graph(graph).encode("utf-8")))
    out.append(_section("meta", json.dumps(meta, sort_keys=True).encode("utf-8")))
    return b"".join(out)


def loads_checkpoint(data: bytes) -> dict:
    r = _Reader(data)
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out = {"params": None, "trainable": None, "adam": None, "graph": None, "meta": None}
    while not r.done():
        tag = r.take(r.u32()).decode("ascii", errors="replace")
        body = _Reader(r.take(r.u64()))
        if tag == "params":
            out["params"] = _read_table(body)
        elif tag == "trainable":
            out["trainable"] = set(json.loads(body.take(len(body.data)).decode()))
        elif tag == "adam":
            t, lr, b1, b2, eps = struct.unpack("<Q4d", body.take(40))
            out["adam"] = {"t": t, "lr": lr, "beta1": b1, "beta2": b2, "eps": eps,
                           "m": _read_table(body), "v": _read_table(body)}
        elif tag == "graph":
            out["graph"] = loads_graph(body.take(len(body.data)).decode("utf-8"))
        elif tag == "meta":
            out["meta"] = json.loads(body.take(len(body.data)).decode("utf-8"))
        else:
            raise FormatError(f"unknown checkpoint section {tag!r}")
        if not body.done():
            raise FormatError(f"trailing bytes in section {tag!r}")
    if out["params"] is None or out["meta"] is None:
        raise FormatError("checkpoint lacks params or meta section")
    return out
