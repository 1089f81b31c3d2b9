"""Command-line entry point: ``crossshape <subcommand> --out RUN_DIR ...``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy

from . import __version__
from . import tensorgrad as tg
from .config import ConfigError, RunConfig, apply_env, dumps_config, loads_config
from .evaluation import attach_for_eval, evaluate, segment
from .formats import FormatError, load_graph, load_point_cloud, save_graph, save_point_cloud
from .geometry import LabeledPointCloud, generate_collection
from .model import export_attention
from .training import initial_graph, load_checkpoint, run_training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLIT_DIRS = ("train", "val", "test")


class UsageError(Exception):
    pass


class LockError(Exception):
    pass


@contextmanager
def run_lock(out: Path):
    """Exclusive marker file; a second writer on the same directory fails fast."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise LockError(f"{out} is locked by another run (remove {lock} if stale)") from e
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def resolve_config(args) -> RunConfig:
    text = ""
    if args.manifest:
        text = json.loads(Path(args.manifest).read_text())["config"]
    elif args.config:
        text = Path(args.config).read_text()
    elif (Path(args.out) / "config.txt").exists():
        text = (Path(args.out) / "config.txt").read_text()
    cfg = loads_config(text)
    if not args.manifest:
        apply_env(cfg)
    cfg.validate()
    return cfg


def write_manifest(out: Path, command: str, argv: Sequence[str], cfg: RunConfig) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": dumps_config(cfg),
        "seeds": {"run": cfg.seed, "data": cfg.data.seed, "eval": cfg.eval.seed},
        "versions": {"crossshape": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    (out / f"manifest-{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# data directories

def make_dataset(cfg: RunConfig) -> Dict[str, List[LabeledPointCloud]]:
    d = cfg.data
    fit = generate_collection(d.families, d.n_train + d.n_val, d.n_points, d.seed)
    test = generate_collection(d.families, d.n_test, d.test_points, d.seed + 1_000_003) if d.n_test else []
    for c in test:
        c.shape_id = "test_" + c.shape_id
    return {"train": fit[:d.n_train], "val": fit[d.n_train:], "test": test}


def write_dataset(data: Dict[str, List[LabeledPointCloud]], root: Path) -> None:
    for split, clouds in data.items():
        (root / split).mkdir(parents=True, exist_ok=True)
        for c in clouds:
            save_point_cloud(c, root / split / f"{c.shape_id}.pc")


def read_dataset(root: Path) -> Dict[str, List[LabeledPointCloud]]:
    if not root.is_dir():
        raise FileNotFoundError(f"no dataset at {root}")
    out = {}
    for split in SPLIT_DIRS:
        files = sorted((root / split).glob("*.pc")) if (root / split).is_dir() else []
        out[split] = [load_point_cloud(f) for f in files]
    return out


def dataset_for(args, cfg: RunConfig, out: Path) -> Dict[str, List[LabeledPointCloud]]:
    root = Path(args.data) if args.data else out / "data"
    if not root.exists() and not args.data:
        data = make_dataset(cfg)
        write_dataset(data, root)
        return data
    return read_dataset(root)


def by_id(data) -> Dict[str, LabeledPointCloud]:
    return {c.shape_id: c for split in data.values() for c in split}


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, cfg: RunConfig, out: Path) -> None:
    root = Path(args.data) if args.data else out / "data"
    write_dataset(make_dataset(cfg), root)
    (out / "config.txt").write_text(dumps_config(cfg))


def cmd_build_graph(args, cfg: RunConfig, out: Path) -> None:
    data = dataset_for(args, cfg, out)
    graph = initial_graph(data["train"], data["val"], cfg.train.graph_k, cfg.data.d2_bins, cfg.data.seed)
    save_graph(graph, out / "graph.txt")


def cmd_train(args, cfg: RunConfig, out: Path) -> None:
    data = dataset_for(args, cfg, out)
    graph = load_graph(args.graph) if args.graph else None
    log = (lambda row: print(",".join(str(v) for v in row.values()), flush=True)) if args.verbose else None
    res = run_training(cfg, data["train"], data["val"], graph, out, progress=log)
    save_graph(res.graph, out / "graph_trained.txt")
    print(f"best val part mIoU {res.best_val:.4f} after phases {' '.join(res.phases_run)}")


def _checkpoint(args, out: Path):
    path = Path(args.checkpoint) if args.checkpoint else out / "best.ckpt"
    ck = load_checkpoint(path)
    if ck.graph is None:
        raise FormatError(f"{path} carries no collection graph")
    return ck


def cmd_eval(args, cfg: RunConfig, out: Path) -> None:
    ck = _checkpoint(args, out)
    mcfg = ck.config()
    data = dataset_for(args, cfg, out)
    if not data["test"]:
        raise FormatError("dataset has no test shapes")
    shapes = by_id(data)
    strategy = args.strategy or cfg.eval.strategy
    graph = attach_for_eval(ck.store, mcfg.model, ck.graph, data["test"], shapes, mcfg.data.n_points, cfg.eval.seed)
    save_graph(graph, out / "graph_test.txt")
    report = evaluate(ck.store, mcfg.model, graph, data["test"], shapes, strategy, mcfg.data.n_points, cfg.eval.seed)
    (out / f"report_{strategy}.csv").write_text(report.to_csv())
    print(f"{strategy}: part mIoU {report.part_miou:.4f}, shape mIoU {report.shape_miou:.4f}, edge_k {report.edge_k}")


def cmd_infer(args, cfg: RunConfig, out: Path) -> None:
    ck = _checkpoint(args, out)
    mcfg = ck.config()
    data = dataset_for(args, cfg, out)
    shapes = by_id(data)
    cloud = load_point_cloud(args.input)
    cloud.shape_id = "query:" + cloud.shape_id
    cloud.part_count = mcfg.model.num_classes
    graph = attach_for_eval(ck.store, mcfg.model, ck.graph, [cloud], shapes, mcfg.data.n_points, cfg.eval.seed)
    pred = segment(ck.store, mcfg.model, graph, cloud, shapes, args.strategy or cfg.eval.strategy,
                   mcfg.data.n_points, cfg.eval.seed)
    target = Path(args.output) if args.output else out / (Path(args.input).stem + ".pred.pc")
    save_point_cloud(LabeledPointCloud(cloud.positions, pred, cloud.part_count, cloud.shape_id), target)


def read_region(path: Path) -> np.ndarray:
    try:
        idx = np.array([int(tok) for tok in path.read_text().split()], dtype=np.int64)
    except ValueError as e:
        raise FormatError(f"region file {path} must hold integer point indices") from e
    return idx


def cmd_export_attn(args, cfg: RunConfig, out: Path) -> None:
    ck = _checkpoint(args, out)
    mcfg = ck.config()
    shapes = by_id(dataset_for(args, cfg, out))
    if args.query not in shapes or args.neighbor not in shapes:
        raise FormatError("unknown query or neighbour shape id")
    region = read_region(Path(args.region))
    totals = export_attention(shapes[args.query], shapes[args.neighbor], ck.store, mcfg.model, args.layer, region)
    target = Path(args.output) if args.output else out / f"attention_l{args.layer}.csv"
    nbr = shapes[args.neighbor]
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", "x", "y", "z", "attention"])
        for j, (p, a) in enumerate(zip(nbr.positions, totals)):
            w.writerow([j, repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(a))])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "export-attn": cmd_export_attn,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crossshape", description="Cross-shape attention part segmentation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--out", required=True, help="run directory")
        s.add_argument("--config", help="key = value config file")
        s.add_argument("--manifest", help="rerun with the config recorded in a manifest")
        s.add_argument("--data", help="dataset directory (default: OUT/data)")
        if name in ("eval", "infer", "export-attn"):
            s.add_argument("--checkpoint", help="default: OUT/best.ckpt")
        if name in ("eval", "infer"):
            s.add_argument("--strategy", choices=("direct", "upsample"))
    sub.choices["train"].add_argument("--graph", help="initial graph file (default: built from D2 descriptors)")
    sub.choices["train"].add_argument("--verbose", action="store_true")
    sub.choices["infer"].add_argument("--input", required=True)
    sub.choices["infer"].add_argument("--output")
    ea = sub.choices["export-attn"]
    ea.add_argument("--query", required=True)
    ea.add_argument("--neighbor", required=True)
    ea.add_argument("--layer", type=int, required=True)
    ea.add_argument("--region", required=True, help="file of query point indices")
    ea.add_argument("--output")
    return p


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    out = Path(args.out)
    try:
        with run_lock(out):
            write_manifest(out, args.command, argv, cfg)
            if args.config or args.manifest:
                # later commands on this directory pick up the same settings
                (out / "config.txt").write_text(dumps_config(cfg))
            COMMANDS[args.command](args, cfg, out)
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (LockError, FormatError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())
