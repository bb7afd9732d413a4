"""Tape-based reverse-mode autodiff over the fixed op set of the network.

A :class:`Graph` records every node in creation order, which is already a
topological order (parents always exist before their children). ``backward``
walks the tape in reverse and only visits nodes that received a gradient, so
parameters off the loss path keep an exactly-zero gradient.

Conventions:

* ``conv3x3`` is a correlation (kernel not flipped), stride 1, zero pad 1.
* ``maxpool2x2`` breaks ties by the first element of the window in row-major
  scan order.
* ``bilinear_up2x`` samples at ``s = (o + 0.5) / 2 - 0.5`` clamped to
  ``[0, dim - 1]`` (half-pixel centres with edge clamping).
"""

from __future__ import annotations

import contextlib
import functools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import check_finite, get_dtype


class Node:
    __slots__ = ("graph", "id", "op", "parents", "value", "grad", "backward_fn", "name")

    def __init__(self, graph, op, parents, value, backward_fn=None, name=None):
        self.graph = graph
        self.id = len(graph.nodes)
        self.op = op
        self.parents = tuple(parents)
        self.value = value
        self.grad = None
        self.backward_fn = backward_fn
        self.name = name
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.id} {self.op}{label} shape={self.value.shape}>"


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name=None) -> Node:
        return Node(self, "leaf", (), np.asarray(value), name=name)

    def backward(self, loss: Node) -> None:
        if loss.graph is not self:
            raise ValueError("loss node belongs to a different graph")
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            factor = _CORRUPTION.get(node.op)
            for parent, g in zip(node.parents, grads):
                if g is None:
                    continue
                if factor is not None:
                    g = g * factor
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.value.dtype, copy=True)
                else:
                    parent.grad += g

    def grad_of(self, node: Node) -> np.ndarray:
        """Gradient of ``node``; zeros if the node was not on the loss path."""
        return np.zeros_like(node.value) if node.grad is None else node.grad


# op name -> multiplier applied to that op's input gradients (negative-control hook)
_CORRUPTION: dict[str, float] = {}


@contextlib.contextmanager
def corrupt_gradient(op: str, factor: float = 1.5):
    """Deliberately scale the backward output of ``op``; used to prove the gradcheck bites."""
    _CORRUPTION[op] = factor
    try:
        yield
    finally:
        _CORRUPTION.pop(op, None)


def _emit(op, parents, value, backward_fn):
    check_finite(value, op)
    return Node(parents[0].graph, op, parents, value, backward_fn)


def _check_same_graph(*nodes):
    g = nodes[0].graph
    if any(n.graph is not g for n in nodes[1:]):
        raise ValueError("nodes come from different graphs")


# ---------------------------------------------------------------- convolution

def _im2col(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (n, c, h, w, 3, 3)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv3x3(x: Node, w: Node, b: Node) -> Node:
    _check_same_graph(x, w, b)
    xv, wv, bv = x.value, w.value, b.value
    if wv.ndim != 4 or wv.shape[2:] != (3, 3):
        raise ValueError(f"conv3x3 weight must be (c_out, c_in, 3, 3), got {wv.shape}")
    n, c, h, wd = xv.shape
    c_out, c_in = wv.shape[:2]
    if c != c_in:
        raise ValueError(f"conv3x3 channel mismatch: input has {c}, weight expects {c_in}")
    if bv.shape != (c_out,):
        raise ValueError(f"conv3x3 bias must have shape ({c_out},), got {bv.shape}")
    cols = _im2col(xv)
    wmat = wv.reshape(c_out, c_in * 9)
    out = (cols @ wmat.T + bv).reshape(n, h, wd, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (g2.T @ cols).reshape(wv.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ wmat).reshape(n, h, wd, c, 3, 3)
        dxp = np.zeros((n, c, h + 2, wd + 2), dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + h, j:j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1], dw, db

    return _emit("conv3x3", (x, w, b), np.ascontiguousarray(out), backward)


# ---------------------------------------------------------------- pooling / pointwise

def maxpool2x2(x: Node) -> Node:
    xv = x.value
    n, c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}; crop or pad first")
    win = xv.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return _emit("maxpool2x2", (x,), out, backward)


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _emit("relu", (x,), np.where(mask, x.value, 0).astype(x.value.dtype), lambda g: (g * mask,))


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.value + b.value, lambda g: (g, g))


def gate_combine(u: Node, v: Node, mode: str = "mul") -> Node:
    """Fuse the two gate branches: ``u * v`` (multiplicative) or ``u + v`` (additive)."""
    if u.shape != v.shape:
        raise ValueError(f"gate inputs differ in shape: {u.shape} vs {v.shape}")
    if mode == "mul":
        uv, vv = u.value, v.value
        return _emit("gate_mul", (u, v), uv * vv, lambda g: (g * vv, g * uv))
    if mode == "add":
        return _emit("gate_add", (u, v), u.value + v.value, lambda g: (g, g))
    raise ValueError(f"unknown gate mode {mode!r}")


def concat_channels(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.shape[0] != bv.shape[0] or av.shape[2:] != bv.shape[2:]:
        raise ValueError(f"concat needs equal batch and spatial dims: {av.shape} vs {bv.shape}")
    ca = av.shape[1]
    out = np.concatenate([av, bv], axis=1)
    return _emit("concat", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


# ---------------------------------------------------------------- batch norm

@dataclass
class BatchNormState:
    """Running statistics and hyper-parameters of one batch-norm layer.

    The learnable scale and shift travel as graph nodes (``gamma``/``beta``
    arguments of :func:`batchnorm`); this object holds everything else.
    """

    channels: int
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=np.float64)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=np.float64)
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("batch-norm momentum must lie in (0, 1)")


def batchnorm(x: Node, gamma: Node, beta: Node, state: BatchNormState) -> Node:
    xv, gv, bv = x.value, gamma.value, beta.value
    c = xv.shape[1]
    if gv.shape != (c,) or bv.shape != (c,) or state.channels != c:
        raise ValueError(f"batchnorm channel mismatch: input has {c} channels, "
                         f"gamma {gv.shape}, beta {bv.shape}, state {state.channels}")
    dt = xv.dtype
    g4 = gv.reshape(1, c, 1, 1)
    if state.mode == "infer":
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(dt).reshape(1, c, 1, 1)
        xhat = (xv - state.running_mean.astype(dt).reshape(1, c, 1, 1)) * inv
        out = g4 * xhat + bv.reshape(1, c, 1, 1)

        def backward(g):
            return g * g4 * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _emit("batchnorm", (x, gamma, beta), out, backward)

    if state.mode != "train":
        raise ValueError(f"unknown batch-norm mode {state.mode!r}")
    m = xv.shape[0] * xv.shape[2] * xv.shape[3]
    mu = xv.mean(axis=(0, 2, 3), keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(state.eps))
    xhat = xc * inv
    out = g4 * xhat + bv.reshape(1, c, 1, 1)

    # biased variance, i.e. exactly the statistic used to normalize; with
    # batch size 1 and 2x2 maps the unbiased m/(m-1) factor skews inference
    mom = state.momentum
    state.running_mean = (1 - mom) * state.running_mean + mom * mu.reshape(c).astype(np.float64)
    state.running_var = (1 - mom) * state.running_var + mom * var.reshape(c).astype(np.float64)

    def backward(g):
        dxhat = g * g4
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = inv * (dxhat - s1 / m - xhat * s2 / m)
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _emit("batchnorm", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------- upsampling

@functools.lru_cache(maxsize=64)
def upsample_matrix(dim: int, dtype=np.float64) -> np.ndarray:
    """(2*dim, dim) interpolation matrix for half-pixel 2x bilinear sampling."""
    m = np.zeros((2 * dim, dim), dtype=np.float64)
    for o in range(2 * dim):
        s = min(max((o + 0.5) / 2.0 - 0.5, 0.0), dim - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, dim - 1)
        frac = s - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    m.setflags(write=False)
    return m.astype(dtype)


def bilinear_up2x(x: Node) -> Node:
    xv = x.value
    _, _, h, w = xv.shape
    if h < 1 or w < 1:
        raise ValueError("bilinear_up2x needs non-empty spatial dims")
    uh = upsample_matrix(h, xv.dtype.type)
    uw = upsample_matrix(w, xv.dtype.type)
    out = uh @ xv @ uw.T
    return _emit("bilinear_up2x", (x,), out, lambda g: (uh.T @ g @ uw,))


# ---------------------------------------------------------------- losses / reductions

def softmax(scores: np.ndarray) -> np.ndarray:
    """Channel softmax of an (n, C, h, w) array, max-subtracted for stability."""
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(scores: Node, target, class_weights=None, ignore_index: int = 255) -> Node:
    """Class-weighted pixel cross-entropy, averaged over non-ignored pixels.

    ``target`` is an integer (n, h, w) label map. A pixel with label ``t``
    contributes ``-class_weights[t] * log softmax(scores)[t]``. If every pixel
    is ignored the loss is 0 and so is the gradient.
    """
    sv = scores.value
    n, C, h, w = sv.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} does not match scores {sv.shape}")
    weights = np.ones(C) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (C,):
        raise ValueError(f"class_weights must have length {C}, got {weights.shape}")
    if np.any(weights < 0):
        raise ValueError("class_weights must be non-negative")
    valid = target != ignore_index
    bad = valid & ((target < 0) | (target >= C))
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"target value {int(target[pos])} at pixel {pos} outside [0, {C})")

    dt = sv.dtype
    count = int(valid.sum())
    if count == 0:
        return _emit("softmax_xent", (scores,), np.zeros((), dtype=dt), lambda g: (np.zeros_like(sv),))
    t = np.where(valid, target, 0)
    z = sv - sv.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp_t = np.take_along_axis(z, t[:, None], axis=1)[:, 0] - logsum
    wpix = np.where(valid, weights.astype(dt)[t], 0).astype(dt)
    loss = np.asarray(-(wpix * logp_t).sum() / count, dtype=dt)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[:, None], 1.0, axis=1)
        return ((p - onehot) * (wpix / count)[:, None] * g,)

    return _emit("softmax_xent", (scores,), loss, backward)


def weighted_sum(nodes, weights) -> Node:
    """Scalar ``sum_k weights[k] * nodes[k]`` over scalar nodes."""
    nodes = list(nodes)
    weights = [float(wk) for wk in weights]
    if len(nodes) != len(weights) or not nodes:
        raise ValueError("weighted_sum needs equally many (>0) nodes and weights")
    dt = nodes[0].value.dtype
    total = np.asarray(sum(wk * float(nd.value) for nd, wk in zip(nodes, weights)), dtype=dt)
    return _emit("weighted_sum", nodes, total, lambda g: tuple(g * wk for wk in weights))


def project(x: Node, r) -> Node:
    """Scalar ``sum(r * x)`` with a constant ``r``; the probe used by gradient checks."""
    r = np.asarray(r, dtype=x.value.dtype)
    if r.shape != x.shape:
        raise ValueError(f"projection shape {r.shape} does not match {x.shape}")
    return _emit("project", (x,), np.asarray((r * x.value).sum(), dtype=x.value.dtype), lambda g: (g * r,))


DIFFERENTIABLE_OPS = (
    "conv3x3", "maxpool2x2", "relu", "batchnorm", "bilinear_up2x",
    "concat", "gate_mul", "gate_add", "softmax_xent",
)
