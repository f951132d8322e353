"""Reverse-mode differentiation over dense matrices.

Values are float64 numpy arrays of shape ``(rows, cols)``.  A minibatch of
matrices is stored as ``(rows, batch, cols)`` so a whole batch shares one
tape; plain matrices (parameters) broadcast over the batch axis.

Every operation accepts either plain arrays or :class:`Node` objects.  When
no input is a node the result is a plain array and nothing is recorded, so
the same model code serves both training (on a tape) and fast inference.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit

from .errors import ContractError, ShapeError

__all__ = [
    "Node",
    "Tape",
    "value",
    "matmul",
    "bilinear",
    "transpose",
    "elementwise",
    "add",
    "sub",
    "hadamard",
    "scale",
    "sigmoid",
    "tanh",
    "total",
    "mean_of",
    "frobenius_mse",
    "bce_with_logits",
    "loss_elements",
    "backward",
    "grad_check",
    "record",
    "pick",
    "LOSS_KINDS",
]

LOSS_KINDS = ("frobenius_mse", "bce_with_logits")


class Node:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value", "parents", "vjp", "name")

    def __init__(self, tape, index, value, parents=(), vjp=None, name=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or f"#{self.index}"
        return f"Node({label}, shape={self.value.shape})"


class Tape:
    """Records operations in evaluation order for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def param(self, name: str, array) -> Node:
        """Register a trainable leaf."""
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        node = self._push(np.asarray(array, dtype=np.float64), (), None, name)
        self.params[name] = node
        return node

    def params_from(self, arrays: Mapping[str, np.ndarray]) -> dict[str, Node]:
        return {name: self.param(name, arr) for name, arr in arrays.items()}

    def _push(self, val, parents, vjp, name=None) -> Node:
        node = Node(self, len(self.nodes), val, parents, vjp, name)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        return backward(self, loss)

    def clear(self) -> None:
        """Drop every recorded node, breaking the node/tape reference cycle."""
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
        self.nodes.clear()
        self.params.clear()


def value(x):
    """The numeric value of a node or array."""
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _record(out, inputs, vjp):
    tape = _tape_of(*inputs)
    if tape is None:
        return out
    return tape._push(out, tuple(inputs), vjp)


def record(out, inputs, vjp):
    """Record a custom operation.

    ``vjp`` maps the output cotangent to one cotangent (or ``None``) per
    input.  Returns ``out`` unchanged when no input is a node.
    """
    return _record(out, inputs, vjp)


def any_node(*xs) -> bool:
    return _tape_of(*xs) is not None


def pick(a, i: int):
    """Entry ``i`` along the leading axis of a stacked value."""
    av = value(a)

    def vjp(g):
        z = np.zeros_like(av)
        z[i] = g
        return (z,)

    return _record(av[i], (a,), vjp)


def mshape(x) -> tuple[int, int]:
    """(rows, cols) of a plain or batched matrix value."""
    shp = value(x).shape
    return shp[0], shp[-1]


def batch_size(x) -> int | None:
    shp = value(x).shape
    return shp[1] if len(shp) == 3 else None


def _expand(a: np.ndarray, other: np.ndarray) -> np.ndarray:
    # a plain matrix broadcasts over the batch axis of a batched one
    if a.ndim == 2 and other.ndim == 3:
        return a[:, None, :]
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if grad.ndim == 3 and len(shape) == 2:
        grad = grad.sum(axis=1)
    if grad.shape != shape:
        grad = grad.sum(axis=tuple(i for i, n in enumerate(shape) if n == 1), keepdims=True)
    return grad


def _check_same(a, b, op):
    sa, sb = value(a).shape, value(b).shape
    if mshape(a) != mshape(b):
        raise ShapeError(f"{op}: shapes {sa} and {sb} differ")
    if len(sa) == 3 and len(sb) == 3 and sa[1] != sb[1]:
        raise ShapeError(f"{op}: batch sizes {sa[1]} and {sb[1]} differ")


# --------------------------------------------------------------------- ops
#
# Batched values are laid out (rows, batch, cols).  With that layout both a
# right product x @ R and a left product L @ x over a whole batch are single
# GEMMs on reshaped views, with no copies.


def _rm(x: np.ndarray, r: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x @ r
    return (x.reshape(-1, x.shape[-1]) @ r).reshape(x.shape[:-1] + (r.shape[1],))


def _lm(left: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return left @ x
    return (left @ x.reshape(x.shape[0], -1)).reshape((left.shape[0],) + x.shape[1:])


def _right_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # d/dR of sum(g * (x @ R)), summed over the batch
    return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def _left_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # d/dL of sum(g * (L @ x)), summed over the batch
    return g.reshape(g.shape[0], -1) @ x.reshape(x.shape[0], -1).T


def matmul(a, b):
    av, bv = value(a), value(b)
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: {av.shape} x {bv.shape}")
    if bv.ndim == 2:
        out = _rm(av, bv)
        return _record(out, (a, b), lambda g: (_rm(g, bv.T), _right_grad(av, g)))
    if av.ndim == 2:
        out = _lm(av, bv)
        return _record(out, (a, b), lambda g: (_left_grad(bv, g), _lm(av.T, g)))
    raise ShapeError("matmul: at most one operand may be batched")


def bilinear(left, x, right, left_transposed: bool = False):
    """``L x R`` (or ``Lᵀ x R``) as one recorded operation; ``L`` and ``R`` are plain matrices."""
    lv, xv, rv = value(left), value(x), value(right)
    if lv.ndim != 2 or rv.ndim != 2:
        raise ShapeError("bilinear: factors must be unbatched matrices")
    lt = lv.T if left_transposed else lv
    rows, cols = mshape(xv)
    if lt.shape[1] != rows or cols != rv.shape[0]:
        raise ShapeError(
            f"bilinear: left {lv.shape}{'ᵀ' if left_transposed else ''}, "
            f"x {xv.shape}, right {rv.shape}"
        )
    m = _rm(xv, rv)
    out = _lm(lt, m)

    def vjp(g):
        dm = _lm(lt.T, g)
        dlt = _left_grad(m, g)
        return (dlt.T if left_transposed else dlt), _rm(dm, rv.T), _right_grad(xv, dm)

    return _record(out, (left, x, right), vjp)


def transpose(a):
    av = value(a)
    if av.ndim != 2:
        raise ShapeError("transpose: batched values are not supported")
    return _record(av.T, (a,), lambda g: (g.T,))


def add(a, b):
    _check_same(a, b, "add")
    av, bv = value(a), value(b)
    return _record(_expand(av, bv) + _expand(bv, av), (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same(a, b, "sub")
    av, bv = value(a), value(b)
    return _record(_expand(av, bv) - _expand(bv, av), (a, b), lambda g: (g, -g))


def hadamard(a, b):
    _check_same(a, b, "hadamard")
    av, bv = _expand(value(a), value(b)), _expand(value(b), value(a))
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float):
    return _record(value(a) * c, (a,), lambda g: (g * c,))


_sigmoid = expit


def sigmoid(a):
    s = _sigmoid(value(a))
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a):
    t = np.tanh(value(a))
    return _record(t, (a,), lambda g: (g * (1.0 - t * t),))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "hadamard": hadamard}


def elementwise(kind: str, a, b=None):
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def total(a):
    """Sum of all entries as a 1x1 matrix."""
    av = value(a)
    shape = av.shape
    return _record(np.array([[av.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_of(terms: Iterable):
    """Average of equally shaped values (nodes or arrays)."""
    terms = list(terms)
    if not terms:
        raise ContractError("mean_of needs at least one term")
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / len(terms))


# ------------------------------------------------------------------ losses


def _bce_elements(y, logits):
    return np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))


def loss_elements(kind: str, y: np.ndarray, yhat: np.ndarray) -> np.ndarray:
    """Per-entry loss values, used for per-sequence scoring."""
    if kind == "frobenius_mse":
        d = y - yhat
        return d * d
    if kind == "bce_with_logits":
        return _bce_elements(y, yhat)
    raise ContractError(f"unknown loss kind {kind!r}")


def frobenius_mse(y, yhat):
    """Mean squared difference over all entries, as a 1x1 matrix."""
    if value(y).shape != value(yhat).shape:
        raise ShapeError(f"frobenius_mse: {value(y).shape} vs {value(yhat).shape}")
    yv, hv = value(y), value(yhat)
    d = yv - hv
    n = d.size
    out = np.array([[np.mean(d * d)]])
    return _record(out, (y, yhat), lambda g: (g[0, 0] * 2.0 * d / n, -g[0, 0] * 2.0 * d / n))


def bce_with_logits(y, logits):
    """Mean binary cross-entropy of targets against logits, as a 1x1 matrix."""
    if value(y).shape != value(logits).shape:
        raise ShapeError(f"bce_with_logits: {value(y).shape} vs {value(logits).shape}")
    yv, lv = value(y), value(logits)
    n = lv.size
    out = np.array([[np.mean(_bce_elements(yv, lv))]])

    def vjp(g):
        c = g[0, 0] / n
        return -c * lv, c * (_sigmoid(lv) - yv)

    return _record(out, (y, logits), vjp)


LOSSES: dict[str, Callable] = {
    "frobenius_mse": frobenius_mse,
    "bce_with_logits": bce_with_logits,
}


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a 1x1 loss node with respect to every registered parameter."""
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise ContractError("loss is not a node of this tape")
    if loss.value.shape != (1, 1):
        raise ContractError(f"loss must be 1x1, got {loss.value.shape}")
    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * (loss.index + 1)
    grads[loss.index] = np.ones((1, 1))
    for node in reversed(nodes[: loss.index + 1]):
        g = grads[node.index]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not isinstance(parent, Node) or pg is None:
                continue
            pg = _unbroadcast(pg, parent.value.shape)
            cur = grads[parent.index]
            grads[parent.index] = pg if cur is None else cur + pg
    out = {}
    for name, node in tape.params.items():
        g = grads[node.index] if node.index <= loss.index else None
        out[name] = np.zeros_like(node.value) if g is None else g
    return out


def grad_check(
    f: Callable[[Mapping], object],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    max_entries: int | None = 400,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` maps a dict of parameters (nodes or arrays) to a 1x1 loss.  Relative
    error per entry is ``|a - n| / max(|a|, |n|, floor)``.  Above
    ``max_entries`` total entries a seeded random subsample is checked.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    nodes = tape.params_from(params)
    analytic = backward(tape, f(nodes))

    entries = [(k, idx) for k, v in params.items() for idx in np.ndindex(v.shape)]
    if max_entries is not None and len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in sorted(pick)]

    worst = 0.0
    for name, idx in entries:
        arr = params[name]
        orig = arr[idx]
        arr[idx] = orig + eps
        up = float(value(f(params))[0, 0])
        arr[idx] = orig - eps
        down = float(value(f(params))[0, 0])
        arr[idx] = orig
        numeric = (up - down) / (2.0 * eps)
        a = float(analytic[name][idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, rel)
    return worst
