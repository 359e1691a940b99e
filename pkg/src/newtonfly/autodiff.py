"""Reverse-mode differentiation over a recorded tape of whole-array ops.

Every op accepts numpy arrays or :class:`Node` objects. When no input is a Node the
op returns a plain array, so the same simulation code runs with or without a tape.

Timestep-boundary state edges are recorded with :func:`carry`; during
:func:`backward` their adjoints are multiplied by the decay factor ``exp(-alpha*dt)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class AutodiffError(RuntimeError):
    pass


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.finalized = False

    def param(self, name: str, value) -> "Node":
        """Leaf node whose gradient is returned by :func:`backward` under ``name``."""
        node = Node(self, np.asarray(value), (), None, "leaf", name=name)
        return node

    def finalize(self) -> "Tape":
        self.finalized = True
        return self

    def __len__(self):
        return len(self.nodes)


class Node:
    __slots__ = ("tape", "index", "value", "parents", "vjp", "op", "carry", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, tape, value, parents, vjp, op, carry=None, name=None):
        if tape.finalized:
            raise AutodiffError(f"cannot record '{op}' on a finalized tape")
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.carry = carry
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node({self.op}#{self.index}, shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def val(x):
    return x.value if isinstance(x, Node) else x


def is_node(x) -> bool:
    return isinstance(x, Node)


def record(op: str, value, parents: Sequence, vjp: Callable, carry: str | None = None):
    """Record ``value`` as the output of ``op``; ``vjp(g)`` returns one adjoint per parent."""
    tape = None
    for p in parents:
        if isinstance(p, Node):
            tape = p.tape
            break
    if tape is None:
        return value
    return Node(tape, value, tuple(parents), vjp, op, carry=carry)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------- elementwise

def add(a, b):
    av, bv = val(a), val(b)
    out = av + bv
    return record("add", out, (a, b),
                  lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))))


def sub(a, b):
    av, bv = val(a), val(b)
    out = av - bv
    return record("sub", out, (a, b),
                  lambda g: (_unbroadcast(g, np.shape(av)), -_unbroadcast(g, np.shape(bv))))


def mul(a, b):
    av, bv = val(a), val(b)
    out = av * bv
    return record("mul", out, (a, b),
                  lambda g: (_unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))))


def div(a, b):
    av, bv = val(a), val(b)
    out = av / bv
    return record("div", out, (a, b),
                  lambda g: (_unbroadcast(g / bv, np.shape(av)),
                             _unbroadcast(-g * av / (bv * bv), np.shape(bv))))


def neg(a):
    return record("neg", -val(a), (a,), lambda g: (-g,))


def square(a):
    av = val(a)
    return record("square", av * av, (a,), lambda g: (2.0 * av * g,))


def exp(a):
    out = np.exp(val(a))
    return record("exp", out, (a,), lambda g: (g * out,))


def tanh(a):
    out = np.tanh(val(a))
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    out = _sigmoid(val(a))
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope: float = 0.01):
    av = val(a)
    pos = av > 0
    out = np.where(pos, av, slope * av)
    return record("leaky_relu", out, (a,), lambda g: (np.where(pos, g, slope * g),))


def relu(a):
    av = val(a)
    pos = av > 0
    return record("relu", np.where(pos, av, 0.0 * av), (a,), lambda g: (np.where(pos, g, 0.0 * g),))


def softplus(a):
    """Numerically stable ln(1 + e^x)."""
    av = val(a)
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    return record("softplus", out, (a,), lambda g: (g * _sigmoid(av),))


def smooth_l1(a, beta: float = 1.0):
    """0.5 x^2 / beta for |x| < beta, |x| - 0.5 beta otherwise."""
    av = val(a)
    small = np.abs(av) < beta
    out = np.where(small, 0.5 * av * av / beta, np.abs(av) - 0.5 * beta)
    return record("smooth_l1", out, (a,), lambda g: (g * np.where(small, av / beta, np.sign(av)),))


def norm(a, axis: int = -1):
    """Euclidean norm; the subgradient at 0 is taken as 0."""
    av = val(a)
    n = np.sqrt(np.sum(av * av, axis=axis))

    def vjp(g):
        nk = np.expand_dims(n, axis)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.where(nk > 0, av / safe, 0.0) * np.expand_dims(g, axis),)

    return record("norm", n, (a,), vjp)


def sum_sq(a, axis: int = -1):
    av = val(a)
    return record("sum_sq", np.sum(av * av, axis=axis), (a,),
                  lambda g: (2.0 * av * np.expand_dims(g, axis),))


def stop_gradient(a):
    return np.array(val(a), copy=True)


def carry(a, kind: str = "kin"):
    """Identity that marks a timestep-boundary state edge for temporal gradient decay."""
    if kind not in ("kin", "actuator"):
        raise ValueError(f"unknown carry kind {kind!r}")
    return record("carry", val(a), (a,), lambda g: (g,), carry=kind)


# ----------------------------------------------------------------------------- reductions / shape

def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    av = val(a)
    out = np.sum(av, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)

    return record("sum", out, (a,), vjp)


def mean(a, axis=None):
    av = val(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    av = val(a)
    return record("reshape", av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def getitem(a, idx):
    av = val(a)

    def vjp(g):
        out = np.zeros_like(av, dtype=g.dtype)
        if _is_fancy(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return record("getitem", av[idx], (a,), vjp)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def stack(items: Sequence, axis: int = 0):
    vals = [val(x) for x in items]
    out = np.stack(vals, axis=axis)
    n = len(items)
    return record("stack", out, tuple(items),
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def concat(items: Sequence, axis: int = -1):
    vals = [val(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return record("concat", out, tuple(items), lambda g: tuple(np.split(g, splits, axis=axis)))


# ----------------------------------------------------------------------------- linear algebra

def _lanewise(x, w):
    """``x @ w`` with one product per leading row (or per image for 3-D ``x``).

    A single BLAS call over the whole batch picks tail microkernels by row index, so a
    lane's result could depend on where it sits in the batch.
    """
    if x.ndim == 2 and w.ndim == 2:
        return np.matmul(x[:, None, :], w)[:, 0]
    return np.matmul(x, w)


def matmul(a, b):
    av, bv = val(a), val(b)
    out = _lanewise(av, bv)

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2) if is_node(a) else None
        gb = None
        if is_node(b):
            if av.ndim == 1:
                gb = np.outer(av, g)
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return record("matmul", out, (a, b), vjp)


def affine(x, w, b):
    """x @ w + b for x of shape (batch, in)."""
    xv, wv, bv = val(x), val(w), val(b)
    out = _lanewise(xv, wv) + bv

    def vjp(g):
        return (g @ wv.T if is_node(x) else None,
                xv.T @ g if is_node(w) else None,
                g.sum(axis=0) if is_node(b) else None)

    return record("affine", out, (x, w, b), vjp)


def rotate(mats, v):
    """Batched ``mats[i] @ v[i]`` with constant (non-differentiated) matrices."""
    m = val(mats)
    out = np.einsum("bij,bj->bi", m, val(v))
    return record("rotate", out, (v,), lambda g: (np.einsum("bij,bi->bj", m, g),))


def conv2d(x, w, b):
    """Valid, stride-1 convolution in NHWC layout.

    x: (B, H, W, C); w: (k, k, C, F); b: (F,). Returns (B, H-k+1, W-k+1, F).
    Windows are recomputed in the backward pass instead of stored.
    """
    xv, wv, bv = val(x), val(w), val(b)
    k, _, c, f = wv.shape
    bsz, h, wd, _ = xv.shape
    ho, wo = h - k + 1, wd - k + 1

    def cols_of(xx):
        # (B, Ho, Wo, C, k, k) -> (B*Ho*Wo, k*k*C) ordered (ky, kx, c)
        win = sliding_window_view(xx, (k, k), axis=(1, 2))
        return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(bsz * ho * wo, k * k * c)

    wmat = wv.reshape(k * k * c, f)
    out = _lanewise(cols_of(xv).reshape(bsz, ho * wo, k * k * c), wmat).reshape(bsz, ho, wo, f) + bv

    def vjp(g):
        g2 = g.reshape(bsz * ho * wo, f)
        gx = gw = gb = None
        if is_node(w):
            gw = (cols_of(xv).T @ g2).reshape(wv.shape)
        if is_node(b):
            gb = g2.sum(axis=0)
        if is_node(x):
            dcols = (g2 @ wmat.T).reshape(bsz, ho, wo, k, k, c)
            gx = np.zeros(xv.shape, dtype=dcols.dtype)
            for i in range(k):
                for j in range(k):
                    gx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
        return gx, gw, gb

    return record("conv2d", out, (x, w, b), vjp)


def gru_cell(x, h, wx, wh, bx, bh):
    """GRU update with gates ordered (reset, update, candidate).

    h' = (1 - z) * h + z * n, so a saturated-closed update gate keeps memory unchanged.
    """
    xv, hv, wxv, whv, bxv, bhv = (val(t) for t in (x, h, wx, wh, bx, bh))
    H = hv.shape[-1]
    gx = _lanewise(xv, wxv) + bxv
    gh = _lanewise(hv, whv) + bhv
    r = _sigmoid(gx[:, :H] + gh[:, :H])
    z = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    ghn = gh[:, 2 * H:]
    n = np.tanh(gx[:, 2 * H:] + r * ghn)
    out = (1.0 - z) * hv + z * n

    def vjp(g):
        dz = g * (n - hv)
        dn = g * z
        dan = dn * (1.0 - n * n)
        dar = dan * ghn * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgx = np.concatenate([dar, daz, dan], axis=1)
        dgh = np.concatenate([dar, daz, dan * r], axis=1)
        return (dgx @ wxv.T if is_node(x) else None,
                g * (1.0 - z) + dgh @ whv.T if is_node(h) else None,
                xv.T @ dgx if is_node(wx) else None,
                hv.T @ dgh if is_node(wh) else None,
                dgx.sum(axis=0) if is_node(bx) else None,
                dgh.sum(axis=0) if is_node(bh) else None)

    return record("gru_cell", out, (x, h, wx, wh, bx, bh), vjp)


# ----------------------------------------------------------------------------- backward

@dataclass
class DecayConfig:
    """Temporal gradient decay.

    ``mode="rate"`` applies ``exp(-alpha * dt)`` per carried edge; ``mode="factor"``
    applies ``alpha`` itself.
    """

    alpha: float = 0.0
    dt: float = 1.0 / 15.0
    mode: str = "rate"
    decay_actuator: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("decay alpha must be >= 0")
        if self.mode not in ("rate", "factor"):
            raise ValueError(f"unknown decay mode {self.mode!r}")
        if self.mode == "factor" and self.alpha > 1:
            raise ValueError("per-step decay factor must be in [0, 1]")

    @property
    def factor(self) -> float:
        if self.mode == "factor":
            return float(self.alpha)
        return math.exp(-self.alpha * self.dt)

    def applies(self, kind: str) -> bool:
        return kind == "kin" or (kind == "actuator" and self.decay_actuator)


def backward(tape: Tape, seeds, decay: DecayConfig | None = None, wrt: Sequence[Node] | None = None):
    """Accumulate adjoints in reverse recording order.

    ``seeds`` is a scalar loss Node or a mapping Node -> seed adjoint. Returns a dict of
    leaf name -> float64 gradient, or, if ``wrt`` is given, the adjoints of those nodes.
    """
    if not tape.finalized:
        raise AutodiffError("tape not finalized; call tape.finalize() before backward()")
    if isinstance(seeds, Node):
        if seeds.value.size != 1:
            raise AutodiffError("loss node must be scalar")
        seeds = {seeds: np.ones_like(seeds.value)}
    factor = 1.0 if decay is None else decay.factor
    adj: list = [None] * len(tape.nodes)
    for node, s in seeds.items():
        if node.tape is not tape:
            raise AutodiffError("seed node belongs to another tape")
        s = np.asarray(s, dtype=np.float64)
        adj[node.index] = s if adj[node.index] is None else adj[node.index] + s
    want = {id(n) for n in wrt} if wrt is not None else set()
    kept = {}
    for node in reversed(tape.nodes):
        g = adj[node.index]
        if g is None:
            continue
        if id(node) in want:
            kept[id(node)] = g
        if not node.parents:
            continue
        if node.carry is not None and decay is not None and decay.applies(node.carry):
            g = g * factor
        if not np.all(np.isfinite(g)):
            raise AutodiffError(f"non-finite adjoint at op '{node.op}' (node {node.index})")
        grads = node.vjp(g)
        for p, gp in zip(node.parents, grads):
            if gp is None or not isinstance(p, Node):
                continue
            if adj[p.index] is None:
                adj[p.index] = gp
            else:
                adj[p.index] = adj[p.index] + gp
        adj[node.index] = None  # free memory early
    if wrt is not None:
        return [kept.get(id(n), np.zeros_like(n.value)) for n in wrt]
    out = {}
    for node in tape.nodes:
        if node.name is not None and not node.parents:
            g = adj[node.index]
            out[node.name] = (np.zeros(node.value.shape) if g is None
                              else np.asarray(g, dtype=np.float64))
    return out


def grad_check(f: Callable, x0, h: float = 1e-5) -> float:
    """Max relative error of the taped gradient of scalar ``f`` against central differences.

    ``f`` maps an array-or-Node to a scalar array-or-Node using ops from this module.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    tape = Tape()
    xn = tape.param("x", x0)
    y = f(xn)
    tape.finalize()
    analytic = backward(tape, y)["x"]
    flat = x0.ravel()
    err = 0.0
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fd = (float(f(xp.reshape(x0.shape))) - float(f(xm.reshape(x0.shape)))) / (2 * h)
        a = analytic.ravel()[i]
        err = max(err, abs(a - fd) / (abs(a) + 1e-8))
    return err
