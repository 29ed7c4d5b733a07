"""Small reverse-mode autodiff over dense 2-D numpy arrays.

Only the operations the network uses are provided.  Every op returns a
:class:`Var` holding its value and a closure mapping the output gradient to
gradients of its inputs; :func:`backward` walks the graph in reverse
topological order.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

EPS = 1e-12


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or ''}{self.value.shape})"


def param(value, name=None) -> Var:
    return Var(np.asarray(value), name=name)


def const(value) -> Var:
    return Var(value)


def backward(root: Var) -> None:
    """Accumulate d(root)/d(v) into ``v.grad`` for every ancestor ``v``."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for p, g in zip(node.parents, node.backward_fn(node.grad)):
            if g is None:
                continue
            p.grad = g if p.grad is None else p.grad + g


def matmul(a: Var, b: Var) -> Var:
    def bw(g):
        return g @ b.value.T, a.value.T @ g
    return Var(a.value @ b.value, (a, b), bw)


def linear(x: Var, w: Var) -> Var:
    """x @ w.T, the row-vector form of ``W · h``."""
    def bw(g):
        return g @ w.value, g.T @ x.value
    return Var(x.value @ w.value.T, (x, w), bw)


def transpose(a: Var) -> Var:
    return Var(a.value.T, (a,), lambda g: (g.T,))


def spmm(m, x: Var) -> Var:
    """Constant (sparse or dense) matrix times ``x``."""
    mt = m.T
    if sp.issparse(mt):
        mt = mt.tocsr()

    def bw(g):
        return (np.asarray(mt @ g),)
    return Var(np.asarray(m @ x.value), (x,), bw)


def add(a: Var, b: Var) -> Var:
    return Var(a.value + b.value, (a, b), lambda g: (g, g))


def scale(a: Var, c: float) -> Var:
    return Var(a.value * c, (a,), lambda g: (g * c,))


def mul_const(a: Var, m: np.ndarray) -> Var:
    return Var(a.value * m, (a,), lambda g: (g * m,))


def concat(a: Var, b: Var) -> Var:
    k = a.value.shape[1]
    return Var(np.concatenate([a.value, b.value], axis=1), (a, b), lambda g: (g[:, :k], g[:, k:]))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return Var(a.value * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Var) -> Var:
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Var(out, (a,), lambda g: (g * out * (1.0 - out),))


def hardshrink(a: Var, tau: float) -> Var:
    keep = (a.value > tau) | (a.value < -tau)
    return Var(np.where(keep, a.value, 0.0), (a,), lambda g: (g * keep,))


def l2_normalize_rows(a: Var, eps: float = EPS) -> Var:
    """h / max(||h||, eps) per row."""
    x = a.value
    norm = np.sqrt(np.einsum("ij,ij->i", x, x))
    big = norm > eps
    den = np.where(big, norm, eps)[:, None]
    out = x / den

    def bw(g):
        # d(x/|x|) = (g - out <out, g>) / |x| on rows above eps; linear below
        dot = np.einsum("ij,ij->i", out, g)[:, None]
        return (np.where(big[:, None], (g - out * dot) / den, g / eps),)
    return Var(out, (a,), bw)


def weighted_mean_rows(w: Var, h: Var) -> Var:
    """Row i = sum_j w[i,j] h[j] / sum_j w[i,j]; rows with zero weight sum give 0."""
    wv, hv = w.value, h.value
    s = wv.sum(axis=1)
    nz = s != 0
    inv = np.zeros_like(s)
    inv[nz] = 1.0 / s[nz]
    out = (wv @ hv) * inv[:, None]

    def bw(g):
        gs = g * inv[:, None]
        dh = wv.T @ gs
        dw = gs @ hv.T - np.einsum("ij,ij->i", gs, out)[:, None]
        dw[~nz] = 0.0
        return dw, dh
    return Var(out, (w, h), bw)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Var, labels: np.ndarray, eps: float = EPS):
    """Mean of -log(max(p_true, eps)).  Returns (loss Var, probabilities)."""
    p = softmax(logits.value)
    n = len(labels)
    rows = np.arange(n)
    pt = p[rows, labels]
    loss = -np.mean(np.log(np.maximum(pt, eps)))

    def bw(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        d[pt <= eps] = 0.0  # clamped rows are flat
        return (d * (g / n),)
    return Var(np.asarray(loss), (logits,), bw), p


def weighted_bce(p: Var, target: np.ndarray, weight: np.ndarray, eps: float = EPS) -> Var:
    """sum(w * bce(p, t)) / sum(w), with p clamped to [eps, 1 - eps]."""
    pv = p.value
    pc = np.clip(pv, eps, 1.0 - eps)
    inside = (pv >= eps) & (pv <= 1.0 - eps)
    wsum = weight.sum()
    ell = -(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc))
    loss = (weight * ell).sum() / wsum

    def bw(g):
        d = (-(target / pc) + (1.0 - target) / (1.0 - pc)) * weight / wsum
        return (np.where(inside, d, 0.0) * g,)
    return Var(np.asarray(loss), (p,), bw)


def head_rows(a: Var, k: int) -> Var:
    """First ``k`` rows."""
    def bw(g):
        out = np.zeros_like(a.value)
        out[:k] = g
        return (out,)
    return Var(a.value[:k], (a,), bw)


def top_left(a: Var, r: int, c: int) -> Var:
    def bw(g):
        out = np.zeros_like(a.value)
        out[:r, :c] = g
        return (out,)
    return Var(a.value[:r, :c], (a,), bw)
