"""Minimal tape-based reverse-mode autodiff over dense numpy arrays.

Values are plain ``np.ndarray`` objects (float32 for training, float64 for
finite-difference shadows). Every primitive records one :class:`Entry` on the
tape of its inputs, but only when at least one input requires a gradient, so
frozen sub-networks cost nothing beyond their forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse


# input id recorded for operands that need no gradient
CONST = -1


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when NaN/Inf reaches an operation that refuses it."""


class Node:
    __slots__ = ("tape", "id", "value", "requires_grad", "name")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray, requires_grad: bool, name: Optional[str] = None):
        self.tape = tape
        self.id = node_id
        self.value = value
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node(#{self.id}{label}, shape={self.shape}, grad={self.requires_grad})"


@dataclass
class Entry:
    prim: str
    inputs: Tuple[int, ...]
    output: int
    saved: tuple
    vjp: Callable[..., Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    With ``enabled=False`` nothing is recorded; ops still run, which is what
    inference and frozen descriptor passes use.
    """

    enabled: bool = True
    entries: List[Entry] = field(default_factory=list)
    leaves: Dict[int, Node] = field(default_factory=dict)
    _next_id: int = 0

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def leaf(self, value, name: Optional[str] = None, requires_grad: bool = False) -> Node:
        arr = np.asarray(value)
        node = Node(self, self._new_id(), arr, requires_grad and self.enabled, name)
        if node.requires_grad:
            self.leaves[node.id] = node
        return node

    def const(self, value) -> Node:
        return self.leaf(value)

    def record(self, prim: str, inputs: Sequence[Node], value: np.ndarray, vjp, saved: tuple = ()) -> Node:
        needs = self.enabled and any(x.requires_grad for x in inputs)
        node = Node(self, self._new_id(), value, needs)
        if needs:
            ids = tuple(x.id if x.requires_grad else CONST for x in inputs)
            self.entries.append(Entry(prim, ids, node.id, saved, vjp))
        return node


def _tape(*xs: Node) -> Tape:
    tape = xs[0].tape
    for x in xs[1:]:
        if x.tape is not tape:
            raise TapeError("operands live on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives

def add(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return _tape(a, b).record(
        "add", (a, b), a.value + b.value,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return _tape(a, b).record(
        "sub", (a, b), a.value - b.value,
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g * bv, av.shape) if need_a else None,
                _unbroadcast(g * av, bv.shape) if need_b else None)

    return _tape(a, b).record("mul", (a, b), av * bv, vjp)


def scale(a: Node, c: float) -> Node:
    """Multiply by a constant, keeping the array dtype."""
    c = a.dtype.type(c)
    return a.tape.record("scale", (a,), a.value * c, lambda g: (g * c,))


def broadcast_to(a: Node, shape: Tuple[int, ...]) -> Node:
    sa = a.shape
    return a.tape.record("broadcast", (a,), np.broadcast_to(a.value, shape),
                         lambda g: (_unbroadcast(g, sa),))


def matmul(a: Node, b: Node) -> Node:
    """``a @ b`` with ``a`` of rank >= 2 and ``b`` of rank 2."""
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = g @ bv.T if need_a else None
        gb = None
        if need_b:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _tape(a, b).record("matmul", (a, b), av @ bv, vjp)


def bmm(a: Node, b: Node) -> Node:
    """Batched ``(B, n, k) @ (B, k, m)``."""
    av, bv = a.value, b.value
    if av.ndim != 3 or bv.ndim != 3 or av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
        raise ValueError(f"bmm shape mismatch {av.shape} @ {bv.shape}")
    return _tape(a, b).record(
        "bmm", (a, b), av @ bv,
        lambda g: (g @ bv.transpose(0, 2, 1), av.transpose(0, 2, 1) @ g))


def transpose(a: Node) -> Node:
    """Swap the last two axes."""
    return a.tape.record("transpose", (a,), np.swapaxes(a.value, -1, -2),
                         lambda g: (np.swapaxes(g, -1, -2),))


def concat(xs: Sequence[Node]) -> Node:
    """Concatenate along the last axis."""
    widths = [x.shape[-1] for x in xs]
    cuts = np.cumsum(widths)[:-1]
    return _tape(*xs).record(
        "concat", tuple(xs), np.concatenate([x.value for x in xs], axis=-1),
        lambda g: tuple(np.split(g, cuts, axis=-1)))


def gather_rows(a: Node, index: np.ndarray) -> Node:
    """``a[index]`` for an integer index array of any shape; rows of rank-2 ``a``."""
    index = np.asarray(index, dtype=np.intp)
    av = a.value
    if av.ndim != 2:
        raise ValueError("gather_rows expects a rank-2 array")

    def vjp(g):
        flat = index.reshape(-1)
        # scatter-add as a sparse product; summation order is fixed
        scatter = sparse.csr_matrix(
            (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))),
            shape=(av.shape[0], flat.size))
        return (np.asarray(scatter @ g.reshape(-1, av.shape[1]), dtype=av.dtype),)

    return a.tape.record("gather_rows", (a,), av[index], vjp)


def reduce_max(a: Node, axis: int, keepdims: bool = False) -> Node:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    av = a.value
    arg = np.argmax(av, axis=axis)
    arg_k = np.expand_dims(arg, axis)
    out = np.take_along_axis(av, arg_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        res = np.zeros_like(av)
        np.put_along_axis(res, arg_k, gk, axis=axis)
        return (res,)

    return a.tape.record("reduce_max", (a,), out, vjp)


def reduce_mean(a: Node, axis: int, keepdims: bool = False) -> Node:
    av = a.value
    n = av.shape[axis]

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / n, av.shape).astype(av.dtype),)

    return a.tape.record("reduce_mean", (a,), av.mean(axis=axis, keepdims=keepdims), vjp)


def reduce_sum(a: Node) -> Node:
    """Sum of all entries, as a scalar."""
    av = a.value
    return a.tape.record("reduce_sum", (a,), np.asarray(av.sum(), dtype=av.dtype),
                         lambda g: (np.full_like(av, g),))


def relu(a: Node) -> Node:
    x = a.value
    return a.tape.record("relu", (a,), np.maximum(x, x.dtype.type(0)),
                         lambda g: (g * (x > 0),))


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    if not 0 <= slope < 1:
        raise ValueError("slope must lie in [0, 1)")
    x = a.value
    s = x.dtype.type(slope)
    return a.tape.record("leaky_relu", (a,), np.maximum(x, x * s),
                         lambda g: (g * ((x > 0) * (1 - s) + s),))


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what}: non-finite input")


def softmax_rows_array(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ValueError(f"softmax_rows expects rank 2, got shape {a.shape}")
    _check_finite(a.value, "softmax_rows")
    y = softmax_rows_array(a.value)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return a.tape.record("softmax_rows", (a,), y, vjp)


def group_norm(a: Node, gamma: Node, beta: Node, groups: int, eps: float = 1e-5) -> Node:
    """Group normalization over the last (channel) axis.

    Statistics for a group pool every leading position of ``a`` with that
    group's channels, i.e. one shape is one normalization sample.
    """
    x = a.value
    c = x.shape[-1]
    if c % groups:
        raise ValueError(f"{groups} groups do not divide {c} channels")
    lead = x.shape[:-1]
    xg = x.reshape(-1, groups, c // groups)
    mu = xg.mean(axis=(0, 2), keepdims=True)
    var = ((xg - mu) ** 2).mean(axis=(0, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(*lead, c)
    gv = gamma.value
    out = xhat * gv + beta.value

    def vjp(g):
        g2 = g.reshape(-1, c)
        xh2 = xhat.reshape(-1, c)
        dgamma = (g2 * xh2).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = (g2 * gv).reshape(-1, groups, c // groups)
        xhg = xh2.reshape(-1, groups, c // groups)
        m1 = dxhat.mean(axis=(0, 2), keepdims=True)
        m2 = (dxhat * xhg).mean(axis=(0, 2), keepdims=True)
        dx = (inv * (dxhat - m1 - xhg * m2)).reshape(x.shape)
        return dx, dgamma, dbeta

    return _tape(a, gamma, beta).record("group_norm", (a, gamma, beta), out.astype(x.dtype), vjp)


def edge_norm_max(h: Node, gamma: Node, beta: Node, groups: int, slope: float = 0.2, eps: float = 1e-5) -> Node:
    """``max_k group_norm(leaky_relu(h))`` for ``h`` of shape ``P x k x C``.

    Equal to chaining the three primitives, but cheaper: group norm is a
    per-channel affine map once its statistics are known and the leaky
    rectifier is monotone, so the neighbour max can be taken first (the min
    for channels with a negative scale).
    """
    x = h.value
    p, k, c = x.shape
    if c % groups:
        raise ValueError(f"{groups} groups do not divide {c} channels")
    if not 0 <= slope < 1:
        raise ValueError("slope must lie in [0, 1)")
    cg = c // groups
    dt = x.dtype.type
    s = dt(slope)
    y = np.maximum(x, x * s)
    flat = y.reshape(-1, c)
    m = flat.shape[0] * cg
    mu = flat.sum(axis=0).reshape(groups, cg).sum(axis=1) / dt(m)
    mu_c = np.repeat(mu, cg)
    dev = flat - mu_c
    var = np.einsum("ij,ij->j", dev, dev).reshape(groups, cg).sum(axis=1) / dt(m)
    del dev
    inv = (1 / np.sqrt(var + dt(eps))).astype(x.dtype)
    inv_c = np.repeat(inv, cg)
    gv = gamma.value
    neg = np.nonzero((gv * inv_c) < 0)[0]
    best = x.max(axis=1)
    if neg.size:
        best[:, neg] = x[:, :, neg].min(axis=1)
    # first neighbour attaining the extremum
    arg = np.zeros((p, c), dtype=np.intp)
    for j in range(k - 1, -1, -1):
        np.copyto(arg, j, where=x[:, j, :] == best)
    sel = np.maximum(best, best * s)
    xhat_sel = (sel - mu_c) * inv_c
    out = xhat_sel * gv + beta.value

    def vjp(g):
        dgamma = (g * xhat_sel).sum(axis=0)
        dbeta = g.sum(axis=0)
        gg = g * gv
        m1 = gg.reshape(p, groups, cg).sum(axis=(0, 2)) / dt(m)
        m2 = (gg * xhat_sel).reshape(p, groups, cg).sum(axis=(0, 2)) / dt(m)
        # dense part of d/dy is affine in y per group: -inv*m1 - inv^2*m2*(y - mu)
        coef = np.repeat(-inv * inv * m2, cg)
        const = np.repeat(-inv * m1, cg) - coef * mu_c
        dy = y * coef
        dy += const
        direct = gg * inv_c
        for j in range(k):
            dy[:, j, :] += direct * (arg == j)
        dy *= (x > 0) * (1 - s) + s
        return dy, dgamma, dbeta

    return _tape(h, gamma, beta).record("edge_norm_max", (h, gamma, beta), out.astype(x.dtype), vjp)


def dropout(a: Node, p: float, rng: Optional[np.random.Generator], training: bool) -> Node:
    """Inverted dropout; identity outside training."""
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return a.tape.record("dropout", (a,), a.value * keep, lambda g: (g * keep,))


def cross_entropy(probs: Node, labels: Sequence[int], clamp: float = 1e-12) -> Node:
    """Mean negative log-likelihood of ``labels`` under row distributions ``probs``."""
    p = probs.value
    if p.ndim != 2:
        raise ValueError("cross_entropy expects P x C probabilities")
    labels = np.asarray(labels, dtype=np.intp)
    n, c = p.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    rows = np.arange(n)
    picked = p[rows, labels]
    clamped = np.maximum(picked, clamp)
    loss = np.asarray(-np.log(clamped).mean(), dtype=p.dtype)

    def vjp(g):
        out = np.zeros_like(p)
        live = picked > clamp
        out[rows[live], labels[live]] = -g / (n * picked[live])
        return (out,)

    return probs.tape.record("cross_entropy", (probs,), loss, vjp)


# ---------------------------------------------------------------------------
# backward pass

def backward(tape: Tape, loss: Node) -> Dict[str, np.ndarray]:
    """Reverse sweep; returns gradients of named trainable leaves.

    Gradients accumulate across fan-out. Leaves that do not require a
    gradient are never visited.
    """
    if loss.tape is not tape:
        raise TapeError("loss node is not on this tape")
    if loss.value.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.id] = np.ones_like(loss.value)
    known = set(tape.leaves)
    for entry in tape.entries:
        for i in entry.inputs:
            if i != CONST and i not in known:
                raise TapeError(f"entry {entry.prim} -> #{entry.output} references dangling node #{i}")
        known.add(entry.output)
    if loss.requires_grad and loss.id not in known:
        raise TapeError("loss node was not produced on this tape")

    for entry in reversed(tape.entries):
        g = grads.pop(entry.output, None)
        if g is None:
            continue
        in_grads = entry.vjp(g)
        for node_id, gi in zip(entry.inputs, in_grads):
            if gi is None or node_id == CONST:
                continue
            if node_id in grads:
                grads[node_id] = grads[node_id] + gi
            else:
                grads[node_id] = gi
    out: Dict[str, np.ndarray] = {}
    for node_id, leaf in tape.leaves.items():
        if leaf.name is None:
            continue
        g = grads.get(node_id)
        out[leaf.name] = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=leaf.value.dtype).reshape(leaf.shape)
    return out


# ---------------------------------------------------------------------------
# parameters

class ParameterStore:
    """Named arrays plus a trainable flag per name.

    Names follow ``<module>.<layer>.<role>``, e.g. ``csa.2.Wq``.
    """

    def __init__(self):
        self.arrays: Dict[str, np.ndarray] = {}
        self.trainable: Dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        if name in self.arrays:
            raise KeyError(f"duplicate parameter {name!r}")
        self.arrays[name] = np.asarray(value)
        self.trainable[name] = trainable

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self.arrays:
            raise KeyError(name)
        if np.shape(value) != self.arrays[name].shape:
            raise ValueError(f"shape mismatch for {name}: {np.shape(value)} vs {self.arrays[name].shape}")
        self.arrays[name] = np.asarray(value)

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self.arrays if n.startswith(prefix)]

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        for n in self.arrays:
            self.trainable[n] = bool(predicate(n))

    def trainable_names(self) -> List[str]:
        return [n for n, t in self.trainable.items() if t]

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for n, v in self.arrays.items():
            out.add(n, v.copy(), self.trainable[n])
        return out

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for n, v in self.arrays.items():
            out.add(n, v.astype(dtype), self.trainable[n])
        return out

    def bind(self, tape: Tape) -> Dict[str, Node]:
        return {n: tape.leaf(v, name=n, requires_grad=self.trainable[n]) for n, v in self.arrays.items()}

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


# ---------------------------------------------------------------------------
# gradient verification

@dataclass
class GradientReport:
    max_rel_error: Dict[str, float]
    checked_entries: Dict[str, int]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def __str__(self) -> str:
        lines = [f"{n:<24s} {e:.3e} ({self.checked_entries[n]} entries)" for n, e in self.max_rel_error.items()]
        return "\n".join(lines)


def check_gradients(
    params: ParameterStore,
    loss_fn: Callable[[ParameterStore, Tape], Node],
    step: float = 1e-3,
    max_entries: Optional[int] = None,
    seed: int = 0,
    names: Optional[Iterable[str]] = None,
    order: int = 4,
    reference_dtype=np.float64,
) -> GradientReport:
    """Compare tape gradients with central differences in a float64 shadow.

    ``loss_fn(store, tape)`` must build the scalar loss from ``store`` on
    ``tape``. ``max_entries`` caps the number of entries probed per parameter
    (chosen by a seeded generator); ``None`` probes all of them. ``order=4``
    uses the five-point central stencil, whose truncation error is small
    enough for entries with near-zero gradient; ``order=2`` is the plain
    two-point difference.

    The tape gradient always comes from the float64 shadow. Passing
    ``reference_dtype=np.longdouble`` evaluates the finite differences in
    extended precision where the platform has it, which resolves entries whose
    gradient sits near the float64 round-off floor of ``eps / step``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    shadow = params.astype(np.float64)
    tape = Tape()
    loss = loss_fn(shadow, tape)
    analytic = backward(tape, loss)
    probe = params.astype(reference_dtype)

    def value(store: ParameterStore) -> float:
        return float(loss_fn(store, Tape(enabled=False)).value)

    base = value(shadow)
    if value(shadow) != base or float(loss.value) != base or value(probe) != value(probe):
        raise ValueError("loss_fn is not deterministic; disable dropout or pin its seed")

    rng = np.random.default_rng(seed)
    report = GradientReport({}, {})
    targets = list(names) if names is not None else shadow.trainable_names()
    for name in targets:
        flat = probe.arrays[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]

            def at(offset):
                flat[i] = orig + offset
                return loss_fn(probe, Tape(enabled=False)).value

            h = flat.dtype.type(step)
            numeric = (at(h) - at(-h)) / (2 * h)
            if order == 4:
                wide = (at(2 * h) - at(-2 * h)) / (4 * h)
                numeric = (4 * numeric - wide) / 3
            numeric = float(numeric)
            flat[i] = orig
            a = float(a_flat[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
        report.max_rel_error[name] = worst
        report.checked_entries[name] = int(idx.size)
    return report
