"""Recurrent cells and the bilinear output head.

Parameter containers hold either numpy arrays or tape nodes, so one set of
step functions is used for both training and inference.  Parameters live in
flat ``name -> array`` dicts; the ``*_view`` helpers slice a dict into the
structured containers below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from . import matgrad as mg
from .errors import ShapeError

GATES = ("i", "f", "o", "c")
MAT_FACTORS = ("U_xh", "V_xh", "U_hh", "V_hh", "B")
VEC_FACTORS = ("W_x", "W_h", "b")
FORGET_BIAS = 1.0


@dataclass
class MatGateParams:
    U_xh: Any  # n_r x k_r (enters transposed)
    V_xh: Any  # n_c x k_c
    U_hh: Any  # k_r x k_r
    V_hh: Any  # k_c x k_c
    B: Any  # k_r x k_c


@dataclass
class MatLstmParams:
    i: MatGateParams
    f: MatGateParams
    o: MatGateParams
    c: MatGateParams

    @property
    def dims(self) -> tuple[int, int, int, int]:
        n_r, k_r = mg.value(self.i.U_xh).shape
        n_c, k_c = mg.value(self.i.V_xh).shape
        return n_r, n_c, k_r, k_c


@dataclass
class VecGateParams:
    W_x: Any  # d x k
    W_h: Any  # k x k
    b: Any  # 1 x k


@dataclass
class VecLstmParams:
    i: VecGateParams
    f: VecGateParams
    o: VecGateParams
    c: VecGateParams


@dataclass
class MatState:
    """Hidden state ``H`` and working memory ``C`` (1 x k for vector cells)."""

    H: Any
    C: Any


@dataclass
class MatnetLayer:
    U: Any  # out_r x in_r, or None for a plain dense layer on 1 x d rows
    V: Any  # in_c x out_c
    B: Any  # out_r x out_c
    activation: str = "tanh"


@dataclass
class MatnetParams:
    layers: list[MatnetLayer]
    dropout_rate: float = 0.0


# ------------------------------------------------------------------ shapes


def matlstm_shapes(n_r: int, n_c: int, k_r: int, k_c: int) -> dict[str, tuple[int, int]]:
    per_gate = {
        "U_xh": (n_r, k_r),
        "V_xh": (n_c, k_c),
        "U_hh": (k_r, k_r),
        "V_hh": (k_c, k_c),
        "B": (k_r, k_c),
    }
    return {f"{g}.{name}": shape for g in GATES for name, shape in per_gate.items()}


def veclstm_shapes(d: int, k: int) -> dict[str, tuple[int, int]]:
    per_gate = {"W_x": (d, k), "W_h": (k, k), "b": (1, k)}
    return {f"{g}.{name}": shape for g in GATES for name, shape in per_gate.items()}


def matnet_shapes(
    in_shape: tuple[int, int], sizes: list[tuple[int, int]], vector: bool = False
) -> dict[str, tuple[int, int]]:
    """Shapes of a head mapping ``in_shape`` through each shape in ``sizes``.

    For vector heads every shape is ``(1, d)`` and layers carry no left factor.
    """
    shapes = {}
    prev = in_shape
    for li, out in enumerate(sizes):
        if not vector:
            shapes[f"{li}.U"] = (out[0], prev[0])
        shapes[f"{li}.V"] = (prev[1], out[1])
        shapes[f"{li}.B"] = out
        prev = out
    return shapes


# ------------------------------------------------------------------ init


def glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_out, fan_in = shape[0], shape[1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_from_shapes(rng: np.random.Generator, shapes: Mapping[str, tuple[int, int]]) -> dict:
    """Glorot factors, zero biases, forget-gate bias at +1."""
    out = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("B", "b"):
            fill = FORGET_BIAS if name.split(".")[-2] == "f" else 0.0
            out[name] = np.full(shape, fill)
        else:
            out[name] = glorot(rng, shape)
    return out


# ------------------------------------------------------------------ views


def _sub(params: Mapping[str, Any], prefix: str) -> dict[str, Any]:
    p = prefix + "." if prefix else ""
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def matlstm_view(params: Mapping[str, Any], prefix: str = "") -> MatLstmParams:
    sub = _sub(params, prefix)
    gates = {g: MatGateParams(*(sub[f"{g}.{n}"] for n in MAT_FACTORS)) for g in GATES}
    return MatLstmParams(**gates)


def veclstm_view(params: Mapping[str, Any], prefix: str = "") -> VecLstmParams:
    sub = _sub(params, prefix)
    gates = {g: VecGateParams(*(sub[f"{g}.{n}"] for n in VEC_FACTORS)) for g in GATES}
    return VecLstmParams(**gates)


def matnet_view(
    params: Mapping[str, Any], prefix: str, n_layers: int, dropout_rate: float = 0.0,
    output_activation: str = "identity",
) -> MatnetParams:
    sub = _sub(params, prefix)
    layers = []
    for li in range(n_layers):
        act = output_activation if li == n_layers - 1 else "tanh"
        layers.append(MatnetLayer(sub.get(f"{li}.U"), sub[f"{li}.V"], sub[f"{li}.B"], act))
    return MatnetParams(layers, dropout_rate)


# ------------------------------------------------------------------ cells


def mat_op(X, H, g: MatGateParams):
    """``U_xhᵀ X V_xh + U_hhᵀ H V_hh + B``."""
    n_r, k_r = mg.value(g.U_xh).shape
    n_c, k_c = mg.value(g.V_xh).shape
    xs, hs = mg.mshape(X), mg.mshape(H)
    if xs != (n_r, n_c) or hs != (k_r, k_c):
        raise ShapeError(f"mat_op: X {xs}, H {hs} for gate dims n=({n_r},{n_c}) k=({k_r},{k_c})")
    a = mg.bilinear(g.U_xh, X, g.V_xh, left_transposed=True)
    b = mg.bilinear(g.U_hh, H, g.V_hh, left_transposed=True)
    return mg.add(mg.add(a, b), g.B)


def _lstm_update(i, f, o, cand, prev: MatState) -> MatState:
    c = mg.add(mg.hadamard(f, prev.C), mg.hadamard(i, cand))
    return MatState(H=mg.hadamard(o, c), C=c)


def matlstm_step_composed(X, prev: MatState, p: MatLstmParams) -> MatState:
    """Reference matrix-LSTM step built from primitive tape operations."""
    i = mg.sigmoid(mat_op(X, prev.H, p.i))
    f = mg.sigmoid(mat_op(X, prev.H, p.f))
    o = mg.sigmoid(mat_op(X, prev.H, p.o))
    cand = mg.tanh(mat_op(X, prev.H, p.c))
    return _lstm_update(i, f, o, cand, prev)


def _vec_gate(x, h, g: VecGateParams):
    return mg.add(mg.add(mg.matmul(x, g.W_x), mg.matmul(h, g.W_h)), g.b)


def lstm_step_composed(x, prev: MatState, p: VecLstmParams) -> MatState:
    """Reference vector-LSTM step built from primitive tape operations."""
    _check_vec(x, prev, p)
    i = mg.sigmoid(_vec_gate(x, prev.H, p.i))
    f = mg.sigmoid(_vec_gate(x, prev.H, p.f))
    o = mg.sigmoid(_vec_gate(x, prev.H, p.o))
    cand = mg.tanh(_vec_gate(x, prev.H, p.c))
    return _lstm_update(i, f, o, cand, prev)


def _check_vec(x, prev: MatState, p: VecLstmParams) -> None:
    d, k = mg.value(p.i.W_x).shape
    if mg.mshape(x) != (1, d) or mg.mshape(prev.H) != (1, k):
        raise ShapeError(
            f"lstm_step: x {mg.value(x).shape}, h {mg.value(prev.H).shape} for d={d}, k={k}"
        )


# Fused steps.  The four gates share one recorded operation: pre-activations
# come from stacked GEMMs and the backward pass is written out by hand.  The
# composed versions above are the reference they are tested against.


def _as_batched(x: np.ndarray, batch: int) -> np.ndarray:
    if x.ndim == 2:
        x = x[:, None, :]
    if x.shape[1] != batch:
        x = np.ascontiguousarray(np.broadcast_to(x, (x.shape[0], batch, x.shape[2])))
    return x


def _cell_state(pre: np.ndarray, c_prev: np.ndarray):
    gates = mg._sigmoid(pre[:3])
    cand = np.tanh(pre[3])
    i, f, o = gates
    c = f * c_prev
    c += i * cand
    return gates, cand, c, o * c


def _cell_state_grad(dh, dc, gates, cand, c, c_prev):
    i, f, o = gates
    dc = dc + dh * o
    dpre = np.empty((4,) + c.shape)
    np.multiply(dc, i * (1.0 - cand * cand), out=dpre[3])
    np.multiply(gates, 1.0 - gates, out=dpre[:3])
    dpre[0] *= dc * cand
    dpre[1] *= dc * c_prev
    dpre[2] *= dh * c
    return dpre, dc * f


def _step_outputs(stacked, inputs, vjp, squeeze: bool) -> MatState:
    h, c = stacked
    if squeeze:
        h, c = h[:, 0, :], c[:, 0, :]
    if not mg.any_node(*inputs):
        return MatState(H=h, C=c)
    if squeeze:
        inner = vjp
        vjp = lambda g: inner(g[:, :, None, :])  # noqa: E731
        stacked = stacked[:, :, 0, :]
    node = mg.record(stacked, inputs, vjp)
    return MatState(H=mg.pick(node, 0), C=mg.pick(node, 1))


def matlstm_step(X, prev: MatState, p: MatLstmParams) -> MatState:
    """One matrix-LSTM step; every gate reads the previous hidden state."""
    n_r, n_c, k_r, k_c = p.dims
    xs, hs = mg.mshape(X), mg.mshape(prev.H)
    if xs != (n_r, n_c) or hs != (k_r, k_c):
        raise ShapeError(f"matlstm_step: X {xs}, H {hs} for dims n=({n_r},{n_c}) k=({k_r},{k_c})")
    gl = [getattr(p, g) for g in GATES]
    facts = [[mg.value(getattr(g, n)) for g in gl] for n in MAT_FACTORS]
    Ux, Vx, Uh, Vh, Bs = facts
    xv, hv, cv = mg.value(X), mg.value(prev.H), mg.value(prev.C)
    batch = max(mg.batch_size(a) or 1 for a in (xv, hv, cv))
    squeeze = all(a.ndim == 2 for a in (xv, hv, cv))
    xb, hb, cb = (_as_batched(a, batch) for a in (xv, hv, cv))

    def left_side(inp, U, V):
        # U_gᵀ (inp V_g) for every gate g at once -> (4, k_r, batch*k_c), plus the middle term
        rows = inp.shape[0]
        m = mg._rm(inp, np.concatenate(V, axis=1))
        m = np.ascontiguousarray(m.reshape(rows, batch, 4, k_c).transpose(2, 0, 1, 3))
        m = m.reshape(4, rows, batch * k_c)
        return np.matmul(np.stack(U).transpose(0, 2, 1), m), m

    ax, mx = left_side(xb, Ux, Vx)
    ah, mh = left_side(hb, Uh, Vh)
    pre = (ax + ah).reshape(4, k_r, batch, k_c)
    pre += np.stack(Bs)[:, :, None, :]
    gates, cand, c, h = _cell_state(pre, cb)

    def vjp(g):
        dpre, dc_prev = _cell_state_grad(g[0], g[1], gates, cand, c, cb)
        dB = dpre.sum(axis=2)
        dflat = dpre.reshape(4, k_r, batch * k_c)

        def right_side(inp, U, V, m):
            rows = inp.shape[0]
            dU = np.matmul(m, dflat.transpose(0, 2, 1))  # (4, rows, k_r)
            dm = np.matmul(np.stack(U), dflat).reshape(4, rows, batch, k_c)
            dm = dm.transpose(1, 2, 0, 3).reshape(rows, batch, 4 * k_c)
            dV = mg._right_grad(inp, dm)
            dinp = mg._rm(dm, np.concatenate(V, axis=1).T)
            return dinp, list(dU), np.split(dV, 4, axis=1)

        dX, dUx, dVx = right_side(xb, Ux, Vx, mx)
        dH, dUh, dVh = right_side(hb, Uh, Vh, mh)
        per_gate = []
        for j in range(4):
            per_gate += [dUx[j], dVx[j], dUh[j], dVh[j], dB[j]]
        return (dX, dH, dc_prev, *per_gate)

    inputs = (X, prev.H, prev.C, *(getattr(g, n) for g in gl for n in MAT_FACTORS))
    return _step_outputs(np.stack([h, c]), inputs, vjp, squeeze)


def lstm_step(x, prev: MatState, p: VecLstmParams) -> MatState:
    """Standard LSTM step on row vectors ``x`` (1 x d) and state (1 x k)."""
    _check_vec(x, prev, p)
    gl = [getattr(p, g) for g in GATES]
    Wx, Wh, bs = ([mg.value(getattr(g, n)) for g in gl] for n in VEC_FACTORS)
    k = Wh[0].shape[0]
    xv, hv, cv = mg.value(x), mg.value(prev.H), mg.value(prev.C)
    batch = max(mg.batch_size(a) or 1 for a in (xv, hv, cv))
    squeeze = all(a.ndim == 2 for a in (xv, hv, cv))
    xb, hb, cb = (_as_batched(a, batch) for a in (xv, hv, cv))
    Wx_all, Wh_all = np.concatenate(Wx, axis=1), np.concatenate(Wh, axis=1)
    pre = mg._rm(xb, Wx_all)
    pre += mg._rm(hb, Wh_all)
    pre += np.concatenate(bs, axis=1)
    pre = np.ascontiguousarray(pre.reshape(1, batch, 4, k).transpose(2, 0, 1, 3))
    gates, cand, c, h = _cell_state(pre, cb)

    def vjp(g):
        dpre, dc_prev = _cell_state_grad(g[0], g[1], gates, cand, c, cb)
        dflat = dpre.transpose(1, 2, 0, 3).reshape(1, batch, 4 * k)
        dWx = np.split(mg._right_grad(xb, dflat), 4, axis=1)
        dWh = np.split(mg._right_grad(hb, dflat), 4, axis=1)
        db = np.split(dflat.sum(axis=1), 4, axis=1)
        per_gate = []
        for j in range(4):
            per_gate += [dWx[j], dWh[j], db[j]]
        return (mg._rm(dflat, Wx_all.T), mg._rm(dflat, Wh_all.T), dc_prev, *per_gate)

    inputs = (x, prev.H, prev.C, *(getattr(g, n) for g in gl for n in VEC_FACTORS))
    return _step_outputs(np.stack([h, c]), inputs, vjp, squeeze)


def zero_state(shape: tuple[int, int], batch: int | None = None) -> MatState:
    """All-zero state; batched states use the ``(rows, batch, cols)`` layout."""
    full = shape if batch is None else (shape[0], batch, shape[1])
    return MatState(H=np.zeros(full), C=np.zeros(full))


_ACTIVATIONS = {"tanh": mg.tanh, "sigmoid": mg.sigmoid, "identity": lambda z: z}


def matnet_forward(H, p: MatnetParams, training: bool = False, rng: np.random.Generator | None = None):
    """Apply ``Z <- f(U Z V + B)`` layer by layer.

    Inverted dropout is applied to every hidden layer output, only in
    training mode.
    """
    z = H
    last = len(p.layers) - 1
    for li, layer in enumerate(p.layers):
        if layer.U is None:
            lin = mg.matmul(z, layer.V)
        else:
            lin = mg.bilinear(layer.U, z, layer.V)
        z = _ACTIVATIONS[layer.activation](mg.add(lin, layer.B))
        if training and li < last and p.dropout_rate > 0.0:
            if rng is None:
                raise ValueError("dropout in training mode needs an rng")
            keep = 1.0 - p.dropout_rate
            mask = (rng.random(mg.value(z).shape) < keep) / keep
            z = mg.hadamard(z, mask)
    return z


def param_count(spec) -> int:
    """Exact number of scalar parameters of a model configuration."""
    from .models import param_shapes

    return int(sum(r * c for r, c in param_shapes(spec).values()))
