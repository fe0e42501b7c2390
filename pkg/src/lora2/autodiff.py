"""Dense float64 matrices with a small define-by-run reverse-mode tape.

Every value is a 2-D ``numpy.ndarray``; scalars are 1x1.  A :class:`Tape`
owns the named leaves of one graph, and :meth:`Tape.backward` returns the
gradient of a scalar output with respect to every trainable leaf.

The matrix product is computed with a fixed, ascending summation order so
results are reproducible bit-for-bit across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array (scalars become 1x1)."""
    arr = np.array(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated over the inner index in ascending order.

    Each output entry is ``((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``,
    with every product rounded before the add, which is exactly what a
    scalar triple loop produces.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    tmp = np.empty_like(out)
    for t in range(a.shape[1]):
        np.multiply(a[:, t, None], b[None, t, :], out=tmp)
        out += tmp
    return out


class Tensor:
    """A node of the graph: a value plus the recipe for pushing gradients back."""

    __slots__ = ("value", "parents", "grad_fn", "requires_grad", "name", "op", "kink")

    def __init__(self, value, parents=(), grad_fn=None, op="leaf", name=None, requires_grad=None):
        self.value = as_matrix(value, name or op)
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.grad_fn = grad_fn
        self.op = op
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = bool(requires_grad)
        # sign pattern of the input at a non-smooth op (abs, relu)
        self.kink: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    def __matmul__(self, other):
        return mm(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def constant(value, name=None) -> Tensor:
    return Tensor(value, name=name, requires_grad=False)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# -- primitives ---------------------------------------------------------------


def mm(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    av, bv = a.value, b.value

    def grad_fn(g):
        return (
            matmul(g, bv.T) if a.requires_grad else None,
            matmul(av.T, g) if b.requires_grad else None,
        )

    return Tensor(matmul(av, bv), (a, b), grad_fn, "matmul")


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b, "add")
    return Tensor(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b, "sub")
    return Tensor(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return Tensor(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a, alpha: float) -> Tensor:
    a = _t(a)
    alpha = float(alpha)
    return Tensor(alpha * a.value, (a,), lambda g: (alpha * g,), "scale")


def transpose(a) -> Tensor:
    a = _t(a)
    return Tensor(a.value.T.copy(), (a,), lambda g: (g.T.copy(),), "transpose")


def sq_frobenius(a) -> Tensor:
    a = _t(a)
    av = a.value
    total = float(np.sum(av * av))
    return Tensor([[total]], (a,), lambda g: (2.0 * g[0, 0] * av,), "sq_frobenius")


def abs_sum(a) -> Tensor:
    a = _t(a)
    sign = np.sign(a.value)
    out = Tensor([[float(np.sum(np.abs(a.value)))]], (a,), lambda g: (g[0, 0] * sign,), "abs_sum")
    out.kink = sign
    return out


def total(a) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    a = _t(a)
    shape = a.shape
    return Tensor([[float(np.sum(a.value))]], (a,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def diag(v) -> Tensor:
    """Square diagonal matrix from a 1xr row."""
    v = _t(v)
    if v.shape[0] != 1:
        raise ShapeError(f"diag expects a 1xr row, got {v.shape}")
    return Tensor(np.diag(v.value[0]), (v,), lambda g: (np.diag(g).reshape(1, -1).copy(),), "diag")


def relu(a) -> Tensor:
    a = _t(a)
    on = (a.value > 0).astype(np.float64)
    out = Tensor(a.value * on, (a,), lambda g: (g * on,), "relu")
    out.kink = np.sign(a.value)
    return out


def tanh(a) -> Tensor:
    a = _t(a)
    y = np.tanh(a.value)
    return Tensor(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log softmax-probability of integer ``labels``."""
    logits = _t(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{n} rows of logits but {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -float(np.sum(logp[rows, labels])) / n

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g[0, 0] * d / n,)

    return Tensor([[loss]], (logits,), grad_fn, "cross_entropy")


# -- graph --------------------------------------------------------------------


def topological_order(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output``, inputs before consumers."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(output, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if state.get(id(node)) == 2:
                continue
            state[id(node)] = 1
        if i < len(node.parents):
            stack.append((node, i + 1))
            p = node.parents[i]
            s = state.get(id(p))
            if s == 1:
                raise GraphError(f"cycle through {p!r}")
            if s is None:
                stack.append((p, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


@dataclass
class Tape:
    """Named leaves of one define-by-run graph."""

    leaves: dict[str, Tensor] = field(default_factory=dict)

    def leaf(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self.leaves:
            raise GraphError(f"duplicate leaf {name!r}")
        t = Tensor(value, name=name, requires_grad=trainable)
        self.leaves[name] = t
        return t

    def bind(self, params: Mapping[str, np.ndarray], frozen: Iterable[str] = ()) -> dict[str, Tensor]:
        frozen = set(frozen)
        return {n: self.leaf(n, v, trainable=n not in frozen) for n, v in params.items()}

    @property
    def trainable(self) -> list[str]:
        return [n for n, t in self.leaves.items() if t.requires_grad]

    def backward(self, output: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``output`` for every trainable leaf."""
        return backward(output, [self.leaves[n] for n in self.trainable])


def backward(output: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    if output.shape != (1, 1):
        raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
    order = topological_order(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones((1, 1))}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or node.grad_fn is None:
            continue
        for p, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    if leaves is None:
        leaves = [n for n in order if not n.parents and n.requires_grad]
    result = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        result[leaf.name] = np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64)
    return result


# -- finite differences -------------------------------------------------------


LossFn = Callable[[Mapping[str, Tensor]], Tensor]


@dataclass
class GradCheckReport:
    leaf: str
    tolerance: float
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    skipped: list[tuple[int, int]]
    failures: list[tuple[int, int]]

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.leaf}: checked={self.n_checked} skipped={len(self.skipped)} "
            f"max_rel={self.max_rel_error:.3e} max_abs={self.max_abs_error:.3e}"
        )


def _kinks(output: Tensor) -> list[np.ndarray]:
    return [n.kink for n in topological_order(output) if n.kink is not None]


def _forward(fn: LossFn, params, frozen) -> Tensor:
    tape = Tape()
    out = fn(tape.bind(params, frozen))
    if out.shape != (1, 1):
        raise GraphError(f"loss must be scalar, got shape {out.shape}")
    return out


def finite_diff_check(
    fn: LossFn,
    params: Mapping[str, np.ndarray],
    leaf: str,
    step: float = 1e-6,
    tolerance: float = 1e-5,
    frozen: Iterable[str] = (),
    entries: Iterable[tuple[int, int]] | None = None,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare the tape gradient of ``fn`` w.r.t. ``leaf`` to central differences.

    Entries whose perturbation flips the sign pattern at an ``abs``/``relu``
    node sit on a kink and are reported as skipped.  Entries with
    ``|analytic| < abs_floor`` are compared absolutely against ``abs_floor``.
    ``params`` is never modified.
    """
    frozen = set(frozen)
    if leaf not in params:
        raise KeyError(f"unknown leaf {leaf!r}")
    if leaf in frozen:
        raise ValueError(f"leaf {leaf!r} is frozen")
    if step <= 0:
        raise ValueError("step must be positive")

    tape = Tape()
    out = fn(tape.bind(params, frozen))
    analytic = tape.backward(out)[leaf]

    base = np.asarray(params[leaf], dtype=np.float64)
    if entries is None:
        entries = np.ndindex(base.shape)
    max_rel = max_abs = 0.0
    skipped, failures = [], []
    n = 0
    for idx in entries:
        idx = tuple(int(i) for i in idx)
        values = []
        signs = []
        for delta in (step, -step):
            bumped = base.copy()
            bumped[idx] += delta
            o = _forward(fn, {**params, leaf: bumped}, frozen)
            values.append(o.item())
            signs.append(_kinks(o))
        if any(not np.array_equal(p, m) for p, m in zip(*signs)):
            skipped.append(idx)
            continue
        numeric = (values[0] - values[1]) / (2.0 * step)
        a = analytic[idx]
        err = abs(a - numeric)
        n += 1
        if abs(a) < abs_floor:
            max_abs = max(max_abs, err)
            ok = err <= abs_floor
        else:
            rel = err / max(abs(a), abs(numeric))
            max_rel = max(max_rel, rel)
            ok = rel <= tolerance
        if not ok:
            failures.append(idx)
    return GradCheckReport(leaf, tolerance, max_rel, max_abs, n, skipped, failures)


def check_gradients(fn: LossFn, params, frozen: Iterable[str] = (), **kw) -> list[GradCheckReport]:
    frozen = set(frozen)
    return [finite_diff_check(fn, params, name, frozen=frozen, **kw) for name in params if name not in frozen]
