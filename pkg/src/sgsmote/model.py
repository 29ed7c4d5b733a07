"""Stochastic GraphSMOTE: GraphSAGE encoder, per-batch latent SMOTE, edge
decoder with hard shrinkage, GraphSAGE classifier and the composite loss."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad

NORM_EPS = 1e-12
CKPT_MAGIC = b"SGSM"
CKPT_VERSION = 1


class NumericError(FloatingPointError):
    """Non-finite values in a forward or backward pass."""


# -- parameters ----------------------------------------------------------------

def param_shapes(in_dim: int, hidden: int, layers: int, num_classes: int) -> dict[str, tuple[int, int]]:
    """Weight shapes in the fixed checkpoint order."""
    shapes = {}
    prev = in_dim
    for l in range(1, layers + 1):
        shapes[f"enc{l}.W_pool"] = (hidden, prev)
        shapes[f"enc{l}.W_enc"] = (hidden, prev + hidden)
        prev = hidden
    shapes["dec.W"] = (prev, prev)
    shapes["clf.W_pool"] = (prev, prev)
    shapes["clf.W"] = (prev, 2 * prev)
    shapes["clf.W_proj"] = (num_classes, prev)
    return shapes


def init_params(in_dim, hidden, layers, num_classes, rng) -> dict[str, np.ndarray]:
    """Glorot-uniform initialisation."""
    params = {}
    for name, (r, c) in param_shapes(in_dim, hidden, layers, num_classes).items():
        limit = np.sqrt(6.0 / (r + c))
        params[name] = rng.uniform(-limit, limit, size=(r, c))
    return params


def num_layers(params) -> int:
    return sum(1 for k in params if k.endswith(".W_enc"))


# -- batch structure -----------------------------------------------------------

@dataclass
class Block:
    """Sampled bipartite hop: destination nodes are the first ``n_dst`` source
    nodes; ``indptr``/``indices`` list each destination's sampled sources."""

    n_dst: int
    n_src: int
    indptr: np.ndarray
    indices: np.ndarray

    def mean_matrix(self) -> sp.csr_matrix:
        deg = np.diff(self.indptr)
        w = np.repeat(np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0), deg)
        return sp.csr_matrix((w, self.indices, self.indptr), shape=(self.n_dst, self.n_src))


@dataclass
class BatchBlocks:
    seeds: np.ndarray
    layer_nodes: list[np.ndarray]  # [0] = seeds, [h] = nodes within h hops
    blocks: list[Block]  # blocks[h-1] maps layer_nodes[h] -> layer_nodes[h-1]
    features: np.ndarray  # rows for layer_nodes[-1]
    labels: np.ndarray  # seed labels
    seed_adjacency: np.ndarray  # real adjacency among seeds, dense

    @property
    def input_nodes(self) -> np.ndarray:
        return self.layer_nodes[-1]


@dataclass
class SmoteOutput:
    interp: sp.csr_matrix  # (b + s) x b; H_smote = interp @ H
    labels_aug: np.ndarray
    anchor: np.ndarray
    neighbor: np.ndarray
    lam: np.ndarray
    n_orig: int

    @property
    def n_synthetic(self) -> int:
        return len(self.anchor)


# -- layers ----------------------------------------------------------------

def _check(v: ad.Var, what: str) -> ad.Var:
    if not np.all(np.isfinite(v.value)):
        raise NumericError(f"non-finite values in {what}")
    return v


def sage_layer_forward(h_src: ad.Var, block: Block, w_pool: ad.Var, w_enc: ad.Var) -> ad.Var:
    """One GraphSAGE mean layer with ReLU and L2 row normalisation."""
    # mean(W h_j) == W mean(h_j); aggregating first is cheaper
    neigh = ad.linear(ad.spmm(block.mean_matrix(), h_src), w_pool)
    self_h = ad.head_rows(h_src, block.n_dst)
    out = ad.l2_normalize_rows(ad.relu(ad.linear(ad.concat(self_h, neigh), w_enc)), NORM_EPS)
    return _check(out, "encoder layer")


def encode(blocks: BatchBlocks, params: dict[str, ad.Var]) -> ad.Var:
    """Encoder output for the seed nodes; layer 1 consumes the outermost hop."""
    L = len(blocks.blocks)
    h = ad.const(blocks.features)
    for l in range(1, L + 1):
        h = sage_layer_forward(h, blocks.blocks[L - l], params[f"enc{l}.W_pool"], params[f"enc{l}.W_enc"])
    return h


def smote_upsample(h: np.ndarray, labels: np.ndarray, k: int, rng) -> SmoteOutput:
    """Interpolate synthetic rows so every class with at least two members
    reaches the majority count.

    ``rng`` needs ``integers`` and ``random`` (a numpy Generator).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    b = len(labels)
    classes, counts = np.unique(labels, return_counts=True)
    top = counts.max(initial=0)
    anchors, nbrs, lams, new_labels = [], [], [], []
    for c, cnt in zip(classes, counts):
        need = top - cnt
        if cnt < 2 or need == 0:
            continue
        idx = np.nonzero(labels == c)[0]
        kk = min(k, cnt - 1)
        x = h[idx]
        sq = np.einsum("ij,ij->i", x, x)
        dist = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
        np.fill_diagonal(dist, np.inf)
        knn = np.argsort(dist, axis=1, kind="stable")[:, :kk]
        a = rng.integers(0, cnt, size=need)
        pick = rng.integers(0, kk, size=need)
        lam = rng.random(need)
        anchors.append(idx[a])
        nbrs.append(idx[knn[a, pick]])
        lams.append(lam)
        new_labels.append(np.full(need, c, dtype=labels.dtype))
    if anchors:
        anchor = np.concatenate(anchors)
        neighbor = np.concatenate(nbrs)
        lam = np.concatenate(lams).astype(float)
    else:
        anchor = neighbor = np.zeros(0, dtype=np.int64)
        lam = np.zeros(0)
    return SmoteOutput(interpolation_matrix(b, anchor, neighbor, lam),
                       np.concatenate([labels] + new_labels), anchor, neighbor, lam, b)


def interpolation_matrix(b, anchor, neighbor, lam) -> sp.csr_matrix:
    s = len(anchor)
    rows = np.concatenate([np.arange(b), b + np.arange(s), b + np.arange(s)])
    cols = np.concatenate([np.arange(b), anchor, neighbor])
    vals = np.concatenate([np.ones(b), 1.0 - lam, lam])
    # coo sums duplicates, so anchor == neighbor would still give weight 1
    return sp.coo_matrix((vals, (rows, cols)), shape=(b + s, b)).tocsr()


def decode_adjacency(h: ad.Var, w_dec: ad.Var) -> ad.Var:
    """sigmoid(H W H^T)."""
    return ad.sigmoid(ad.matmul(ad.matmul(h, w_dec), ad.transpose(h)))


def hardshrink(a: ad.Var, tau: float) -> ad.Var:
    if tau < 0:
        raise ValueError("tau must be >= 0")
    return ad.hardshrink(a, tau)


def classify(h: ad.Var, a_used: ad.Var, params: dict[str, ad.Var]) -> ad.Var:
    """Logits of the GraphSAGE-plus-linear classifier over batch rows."""
    neigh = ad.linear(ad.weighted_mean_rows(a_used, h), params["clf.W_pool"])
    hc = ad.l2_normalize_rows(ad.relu(ad.linear(ad.concat(h, neigh), params["clf.W"])), NORM_EPS)
    return _check(ad.linear(hc, params["clf.W_proj"]), "classifier")


def bce_weights(adj: np.ndarray) -> np.ndarray:
    """Off-diagonal pair weights; positives scaled by #zeros / #ones."""
    n = adj.shape[0]
    off = ~np.eye(n, dtype=bool)
    ones = int(adj[off].sum())
    zeros = int(off.sum()) - ones
    pos_w = zeros / ones if ones else 1.0
    return np.where(off, np.where(adj > 0, pos_w, 1.0), 0.0)


@dataclass
class ForwardResult:
    loss: ad.Var
    ce: float
    bce: float
    probs: np.ndarray
    smote: SmoteOutput
    a_dec: np.ndarray
    a_thr: np.ndarray
    h_enc: np.ndarray


def loss_total(logits: ad.Var, labels_aug, a_dec: ad.Var, adj: np.ndarray, gamma: float):
    """CE over all (original + synthetic) rows plus gamma * BCE between the
    decoded and the real adjacency of the original rows."""
    ce, probs = ad.softmax_cross_entropy(logits, np.asarray(labels_aug))
    b = adj.shape[0]
    w = bce_weights(adj)
    if w.sum() > 0:
        bce = ad.weighted_bce(ad.top_left(a_dec, b, b), (adj > 0).astype(float), w)
    else:
        bce = ad.const(np.asarray(0.0))
    total = ad.add(ce, ad.scale(bce, gamma))
    return total, ce, bce, probs


def forward_train(params: dict[str, ad.Var], blocks: BatchBlocks, *, k: int, gamma: float,
                  tau: float, rng=None, smote: SmoteOutput | None = None,
                  clf_graph: bool = True) -> ForwardResult:
    """Training pass.  Pass ``smote`` to replay a previous pass's sampling
    choices (anchors, neighbors, lambdas) instead of drawing new ones."""
    h_enc = encode(blocks, params)
    if smote is None:
        smote = smote_upsample(h_enc.value, blocks.labels, k, rng)
    h_smote = ad.spmm(smote.interp, h_enc)
    a_dec = decode_adjacency(h_smote, params["dec.W"])
    m = a_dec.value.shape[0]
    a_thr = ad.mul_const(hardshrink(a_dec, tau), 1.0 - np.eye(m))
    a_used = a_thr if clf_graph else ad.const(np.zeros((m, m)))
    logits = classify(h_smote, a_used, params)
    total, ce, bce, probs = loss_total(logits, smote.labels_aug, a_dec, blocks.seed_adjacency, gamma)
    if not np.isfinite(total.value):
        raise NumericError(f"non-finite loss (ce={ce.value}, bce={bce.value})")
    return ForwardResult(total, float(ce.value), float(bce.value), probs, smote,
                         a_dec.value, a_thr.value, h_enc.value)


def forward_infer(params: dict[str, ad.Var], blocks: BatchBlocks, clf_graph: bool = True) -> np.ndarray:
    """Class probabilities for the seeds: no SMOTE, no decoder; the classifier
    aggregates over the real adjacency among seeds."""
    h = encode(blocks, params)
    adj = blocks.seed_adjacency if clf_graph else np.zeros_like(blocks.seed_adjacency)
    return ad.softmax(classify(h, ad.const(adj.astype(float)), params).value)


def as_vars(params: dict[str, np.ndarray]) -> dict[str, ad.Var]:
    return {k: ad.param(v, k) for k, v in params.items()}


def gradients(params: dict[str, np.ndarray], blocks: BatchBlocks, **kw) -> tuple[ForwardResult, dict]:
    """Forward + backward; returns the pass and d(loss)/d(param) per weight."""
    pv = as_vars(params)
    res = forward_train(pv, blocks, **kw)
    ad.backward(res.loss)
    grads = {}
    for name, v in pv.items():
        g = v.grad if v.grad is not None else np.zeros_like(v.value)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        grads[name] = g
    return res, grads


# -- checkpoint ----------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    header: dict = field(default_factory=dict)


def save_checkpoint(path, params: dict[str, np.ndarray], header: dict) -> None:
    """SGSM file: magic, u16 version, u32 JSON length, JSON header, then the
    weights as little-endian float64 in header order."""
    header = dict(header)
    header["params"] = [[k, int(v.shape[0]), int(v.shape[1])] for k, v in params.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if len(buf) < 10:
        raise ValueError(f"{path}: truncated checkpoint")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10 + hlen
    if pos > len(buf):
        raise ValueError(f"{path}: truncated checkpoint")
    header = json.loads(buf[10:pos])
    params = {}
    for name, r, c in header["params"]:
        size = 8 * r * c
        if pos + size > len(buf):
            raise ValueError(f"{path}: truncated checkpoint")
        params[name] = np.frombuffer(buf, dtype="<f8", count=r * c, offset=pos).reshape(r, c).copy()
        pos += size
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return Checkpoint(params, header)
