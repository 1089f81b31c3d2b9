"""Point-cloud utilities: kNN, seeded subsampling, procedural shapes, D2 histograms."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


@dataclass
class LabeledPointCloud:
    positions: np.ndarray
    labels: Optional[np.ndarray] = None
    part_count: int = 0
    shape_id: str = ""
    family: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float32)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be N x 3, got {self.positions.shape}")
        if len(self.positions) < 4:
            raise ValueError("a cloud needs at least 4 points")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.positions),):
                raise ValueError("one label per point required")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.part_count):
                raise ValueError(f"labels must lie in [0, {self.part_count})")

    @property
    def n_points(self) -> int:
        return len(self.positions)

    def with_positions(self, positions: np.ndarray) -> "LabeledPointCloud":
        return LabeledPointCloud(positions, self.labels, self.part_count, self.shape_id, self.family)


def normalize_positions(positions: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has radius 1."""
    p = np.asarray(positions, dtype=np.float64)
    p = p - p.mean(axis=0)
    r = np.sqrt((p ** 2).sum(axis=1)).max()
    if r > 0:
        p = p / r
    return p.astype(np.float32)


# ---------------------------------------------------------------------------
# nearest neighbours

def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def _rank_rows(d: np.ndarray, k: int) -> np.ndarray:
    """First ``k`` columns per row by (distance, index)."""
    n = d.shape[1]
    if k >= n - 1:
        return np.argsort(d, axis=1, kind="stable")[:, :k]
    cand = np.argpartition(d, k, axis=1)[:, : k + 1]
    cd = np.take_along_axis(d, cand, axis=1)
    order = np.lexsort((cand, cd), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    cd = np.take_along_axis(cd, order, axis=1)
    out = cand[:, :k]
    # a tie across the k-th boundary may hide a lower index outside cand
    tied = np.nonzero(cd[:, k - 1] == cd[:, k])[0]
    if tied.size:
        out[tied] = np.argsort(d[tied], axis=1, kind="stable")[:, :k]
    return out


def knn_indices(points: np.ndarray, k: int, exclude_self: bool = True, method: str = "brute") -> np.ndarray:
    """Indices of the ``k`` nearest rows of ``points`` for every row.

    Rows come out by ascending squared distance, ties to the lower index.
    ``method="grid"`` uses a uniform grid and requires at most 3 columns;
    it returns the same indices as the brute-force path.
    """
    points = np.asarray(points)
    if points.ndim != 2:
        raise ValueError("points must be rank 2")
    n = len(points)
    limit = n - 1 if exclude_self else n
    if k < 1 or k > limit or k >= n:
        raise ValueError(f"k={k} needs k < number of points ({n})")
    if method == "grid":
        return _grid_knn(points, k, exclude_self)
    if method != "brute":
        raise ValueError(f"unknown kNN method {method!r}")
    d = pairwise_sq_dists(points, points)
    diag = np.arange(n)
    d[diag, diag] = np.inf if exclude_self else 0.0
    return _rank_rows(d, k)


def knn_query(source: np.ndarray, targets: np.ndarray, k: int = 1) -> np.ndarray:
    """For every target row, indices of its ``k`` nearest source rows."""
    if len(source) == 0:
        raise ValueError("empty source set")
    if k > len(source):
        raise ValueError("k exceeds number of source points")
    return _rank_rows(pairwise_sq_dists(targets, source), k)


def _grid_knn(points: np.ndarray, k: int, exclude_self: bool) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    n, dim = pts.shape
    if dim > 3:
        raise ValueError("grid kNN supports at most 3 dimensions")
    lo = pts.min(axis=0)
    extent = float((pts.max(axis=0) - lo).max()) or 1.0
    per_axis = max(1, int(round((n / max(k, 1)) ** (1.0 / dim))))
    cell = extent / per_axis + 1e-12
    coords = np.floor((pts - lo) / cell).astype(np.int64)
    cells: Dict[Tuple[int, ...], List[int]] = {}
    for i, c in enumerate(map(tuple, coords)):
        cells.setdefault(c, []).append(i)
    max_ring = per_axis + 1
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        ci = coords[i]
        cand: List[int] = []
        ring = 0
        while True:
            for off in itertools.product(range(-ring, ring + 1), repeat=dim):
                if max(abs(o) for o in off) != ring:
                    continue
                cand.extend(cells.get(tuple(ci + np.array(off)), ()))
            usable = len(cand) - (1 if exclude_self else 0)
            # every unvisited point is farther than ring * cell from i
            if usable >= k:
                idx = np.array(sorted(cand))
                d = ((pts[idx] - pts[i]) ** 2).sum(1)
                if exclude_self:
                    keep = idx != i
                    idx, d = idx[keep], d[keep]
                else:
                    d[idx == i] = 0.0
                order = np.argsort(d, kind="stable")
                if d[order[k - 1]] < (ring * cell) ** 2 or ring >= max_ring:
                    out[i] = idx[order[:k]]
                    break
            ring += 1
    return out


# ---------------------------------------------------------------------------
# subsampling

def subsample_indices(n: int, count: int, seed: int) -> np.ndarray:
    """Uniform choice without replacement, kept in ascending order."""
    if count > n:
        raise ValueError(f"cannot keep {count} of {n} points")
    if count == n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=count, replace=False))


def subsample_points(cloud, count: int, seed: int):
    """Subsample a cloud (labels carried along) or a plain matrix by rows."""
    if isinstance(cloud, LabeledPointCloud):
        idx = subsample_indices(cloud.n_points, count, seed)
        labels = None if cloud.labels is None else cloud.labels[idx]
        return LabeledPointCloud(cloud.positions[idx], labels, cloud.part_count, cloud.shape_id, cloud.family), idx
    arr = np.asarray(cloud)
    idx = subsample_indices(len(arr), count, seed)
    return arr[idx], idx


# ---------------------------------------------------------------------------
# procedural shapes
#
# Every family has four parts and at least two styles. Parts are unions of
# axis-aligned boxes and cylinders; points are spread over part surfaces by
# area, then each part's share is clipped to PART_FRACTION_BOUNDS.

FAMILY_PARTS: Dict[str, Tuple[str, ...]] = {
    "chair": ("seat", "back", "legs", "arms"),
    "table": ("top", "legs", "apron", "shelf"),
    "lamp": ("base", "stem", "shade", "arm"),
}
FAMILY_STYLES: Dict[str, Tuple[str, ...]] = {
    "chair": ("four_leg", "pedestal"),
    "table": ("four_leg", "trestle"),
    "lamp": ("desk", "floor"),
}
PART_FRACTION_BOUNDS = (0.05, 0.70)

# parameter name -> (low, high)
PARAM_BOUNDS: Dict[str, Dict[str, Tuple[float, float]]] = {
    "chair": {"width": (0.8, 1.2), "depth": (0.8, 1.2), "seat_height": (0.8, 1.2),
              "back_height": (0.7, 1.3), "leg_thickness": (0.06, 0.12), "arm_height": (0.2, 0.35)},
    "table": {"width": (1.2, 2.0), "depth": (0.8, 1.2), "height": (0.8, 1.1),
              "top_thickness": (0.05, 0.1), "leg_thickness": (0.06, 0.12), "shelf_height": (0.15, 0.35)},
    "lamp": {"base_radius": (0.3, 0.5), "stem_height": (1.0, 2.0), "shade_radius": (0.3, 0.6),
             "shade_height": (0.3, 0.5), "arm_length": (0.3, 0.6), "stem_radius": (0.03, 0.06)},
}


@dataclass
class ShapeSpec:
    family: str
    n_points: int = 512
    seed: int = 0
    style: Optional[str] = None
    params: Dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if self.family not in FAMILY_PARTS:
            raise ValueError(f"unknown family {self.family!r}")
        if self.style is not None and self.style not in FAMILY_STYLES[self.family]:
            raise ValueError(f"unknown style {self.style!r} for {self.family}")
        if self.n_points < 4 * len(FAMILY_PARTS[self.family]):
            raise ValueError("point budget too small for the family's parts")
        bounds = PARAM_BOUNDS[self.family]
        for k, v in self.params.items():
            if k not in bounds:
                raise ValueError(f"unknown parameter {k!r} for {self.family}")
            lo, hi = bounds[k]
            if not lo <= v <= hi:
                raise ValueError(f"{k}={v} outside [{lo}, {hi}]")


class _Box:
    def __init__(self, center, size):
        self.c = np.asarray(center, float)
        self.s = np.asarray(size, float)

    def area(self) -> float:
        x, y, z = self.s
        return 2 * (x * y + y * z + x * z)

    def sample(self, rng, n):
        x, y, z = self.s
        faces = np.array([y * z, y * z, x * z, x * z, x * y, x * y])
        face = rng.choice(6, size=n, p=faces / faces.sum())
        u = rng.random((n, 3)) - 0.5
        axis = face // 2
        u[np.arange(n), axis] = np.where(face % 2 == 0, -0.5, 0.5)
        return self.c + u * self.s


class _Cylinder:
    """Vertical open cylinder (side wall) with optional caps."""

    def __init__(self, base, radius, height, caps=True, top_radius=None):
        self.b = np.asarray(base, float)
        self.r = radius
        self.r2 = radius if top_radius is None else top_radius
        self.h = height
        self.caps = caps

    def area(self) -> float:
        side = np.pi * (self.r + self.r2) * np.hypot(self.h, self.r - self.r2)
        return side + (np.pi * (self.r ** 2 + self.r2 ** 2) if self.caps else 0.0)

    def sample(self, rng, n):
        side = np.pi * (self.r + self.r2) * np.hypot(self.h, self.r - self.r2)
        caps = np.pi * (self.r ** 2 + self.r2 ** 2) if self.caps else 0.0
        on_side = rng.random(n) < side / (side + caps)
        t = rng.random(n)
        theta = rng.random(n) * 2 * np.pi
        rad = self.r + (self.r2 - self.r) * t
        z = t * self.h
        cap_top = rng.random(n) < self.r2 ** 2 / (self.r ** 2 + self.r2 ** 2)
        cap_r = np.sqrt(rng.random(n)) * np.where(cap_top, self.r2, self.r)
        rad = np.where(on_side, rad, cap_r)
        z = np.where(on_side, z, np.where(cap_top, self.h, 0.0))
        return self.b + np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _draw_params(family: str, rng: np.random.Generator, given: Dict[str, float]) -> Dict[str, float]:
    out = {}
    for name, (lo, hi) in PARAM_BOUNDS[family].items():
        out[name] = given[name] if name in given else float(lo + (hi - lo) * rng.random())
    return out


def _chair(p, style):
    w, d, h = p["width"], p["depth"], p["seat_height"]
    t = p["leg_thickness"]
    seat = [_Box((0, 0, h), (w, d, 0.08))]
    back = [_Box((0, -d / 2 + 0.04, h + p["back_height"] / 2), (w, 0.06, p["back_height"]))]
    if style == "four_leg":
        legs = [_Box((sx * (w / 2 - t), sy * (d / 2 - t), h / 2), (t, t, h)) for sx in (-1, 1) for sy in (-1, 1)]
    else:
        legs = [_Cylinder((0, 0, 0.05), t, h - 0.05, caps=False), _Box((0, 0, 0.025), (0.8 * w, 0.8 * d, 0.05))]
    ah = p["arm_height"]
    arms = [_Box((sx * (w / 2 + 0.03), 0, h + ah), (0.06, 0.8 * d, 0.05)) for sx in (-1, 1)]
    arms += [_Box((sx * (w / 2 + 0.03), 0.3 * d, h + ah / 2), (0.05, 0.05, ah)) for sx in (-1, 1)]
    return [seat, back, legs, arms]


def _table(p, style):
    w, d, h = p["width"], p["depth"], p["height"]
    tt, t = p["top_thickness"], p["leg_thickness"]
    top = [_Box((0, 0, h - tt / 2), (w, d, tt))]
    if style == "four_leg":
        legs = [_Box((sx * (w / 2 - t), sy * (d / 2 - t), (h - tt) / 2), (t, t, h - tt)) for sx in (-1, 1) for sy in (-1, 1)]
    else:
        legs = [_Box((sx * (w / 2 - 2 * t), 0, (h - tt) / 2), (t, 0.7 * d, h - tt)) for sx in (-1, 1)]
        legs += [_Box((sx * (w / 2 - 2 * t), 0, 0.03), (2 * t, 0.9 * d, 0.06)) for sx in (-1, 1)]
    ah = 0.08
    apron = [_Box((0, sy * (d / 2 - t), h - tt - ah / 2), (w - 2 * t, 0.03, ah)) for sy in (-1, 1)]
    apron += [_Box((sx * (w / 2 - t), 0, h - tt - ah / 2), (0.03, d - 2 * t, ah)) for sx in (-1, 1)]
    shelf = [_Box((0, 0, p["shelf_height"]), (w - 4 * t, d - 2 * t, 0.04))]
    return [top, legs, apron, shelf]


def _lamp(p, style):
    br, sh = p["base_radius"], p["stem_height"]
    sr, shh, sm = p["shade_radius"], p["shade_height"], p["stem_radius"]
    if style == "desk":
        sh = 0.6 * sh
        base = [_Box((0, 0, 0.03), (2 * br, 1.4 * br, 0.06))]
    else:
        base = [_Cylinder((0, 0, 0), br, 0.06)]
    stem = [_Cylinder((0, 0, 0.06), sm, sh, caps=False)]
    arm_len = p["arm_length"]
    arm = [_Box((arm_len / 2, 0, 0.06 + sh), (arm_len, 2 * sm, 2 * sm))]
    shade = [_Cylinder((arm_len, 0, 0.06 + sh - shh * 0.8), sr, shh, caps=False, top_radius=0.5 * sr)]
    return [base, stem, shade, arm]


_BUILDERS = {"chair": _chair, "table": _table, "lamp": _lamp}


def _allocate(areas: np.ndarray, n: int) -> np.ndarray:
    lo, hi = PART_FRACTION_BOUNDS
    frac = np.clip(areas / areas.sum(), lo, hi)
    for _ in range(20):
        frac = frac / frac.sum()
        frac = np.clip(frac, lo, hi)
    counts = np.floor(frac / frac.sum() * n).astype(int)
    counts[np.argmax(frac)] += n - counts.sum()
    return counts


def generate_shape(spec: ShapeSpec, shape_id: Optional[str] = None) -> LabeledPointCloud:
    """Sample a labeled, unit-normalized cloud for ``spec``; deterministic per seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    style = spec.style or FAMILY_STYLES[spec.family][int(rng.integers(len(FAMILY_STYLES[spec.family])))]
    params = _draw_params(spec.family, rng, spec.params)
    parts = _BUILDERS[spec.family](params, style)
    areas = np.array([sum(prim.area() for prim in part) for part in parts])
    counts = _allocate(areas, spec.n_points)
    pts, labels = [], []
    for label, (part, count) in enumerate(zip(parts, counts)):
        prim_area = np.array([prim.area() for prim in part])
        which = rng.choice(len(part), size=count, p=prim_area / prim_area.sum())
        for j, prim in enumerate(part):
            m = int((which == j).sum())
            if m:
                pts.append(prim.sample(rng, m))
                labels.append(np.full(m, label))
    pts = np.concatenate(pts)
    labels = np.concatenate(labels)
    order = rng.permutation(len(pts))
    return LabeledPointCloud(
        normalize_positions(pts[order]), labels[order], len(parts),
        shape_id or f"{spec.family}_{style}_{spec.seed}", spec.family)


def generate_collection(families: Sequence[str], count: int, n_points: int, seed: int) -> List[LabeledPointCloud]:
    """``count`` shapes cycling through ``families``; ids are ``shape_<i>``."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2 ** 31 - 1, size=count)
    return [generate_shape(ShapeSpec(families[i % len(families)], n_points, int(s)), f"shape_{i:04d}")
            for i, s in enumerate(seeds)]


# ---------------------------------------------------------------------------
# D2 shape distribution

def d2_descriptor(cloud, bins: int = 32, samples: int = 4096, seed: int = 0, exhaustive: bool = False) -> np.ndarray:
    """Normalized histogram of distances between random point pairs.

    Distances are binned over [0, 2], the diameter of a unit-normalized
    cloud. ``exhaustive`` uses every unordered pair instead of sampling.
    """
    if bins < 8:
        raise ValueError("need at least 8 bins")
    pos = cloud.positions if isinstance(cloud, LabeledPointCloud) else np.asarray(cloud)
    pos = np.asarray(pos, dtype=np.float64)
    if np.ptp(pos, axis=0).max() == 0:
        raise ValueError("degenerate cloud: all points coincide")
    if exhaustive:
        i, j = np.triu_indices(len(pos), k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, len(pos), size=samples)
        j = rng.integers(0, len(pos) - 1, size=samples)
        j = j + (j >= i)
    dist = np.sqrt(((pos[i] - pos[j]) ** 2).sum(1))
    hist, _ = np.histogram(np.minimum(dist, 2.0), bins=bins, range=(0.0, 2.0))
    return hist / hist.sum()
