"""Layered neighbor sampling over a CSR graph."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .graph import ScoreGraph
from .model import BatchBlocks, Block


def _segments(offsets, nodes):
    """Flat CSR positions of the neighbor lists of ``nodes``, with per-entry
    owner index and per-node degree."""
    starts = offsets[nodes]
    deg = offsets[nodes + 1] - starts
    total = int(deg.sum())
    seg = np.repeat(np.arange(len(nodes)), deg)
    first = np.cumsum(deg) - deg
    pos = np.repeat(starts - first, deg) + np.arange(total)
    return pos, seg, deg, first


def sample_hop(offsets, neighbors, dst, fanout, rng):
    """Sample up to ``fanout`` distinct neighbors per destination node
    (``None`` = all).  Returns (owner index, neighbor id) pairs sorted by
    owner then neighbor."""
    pos, seg, deg, first = _segments(offsets, dst)
    nb = neighbors[pos]
    if fanout is None or len(nb) == 0:
        return seg, nb
    if fanout <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    capped = deg > fanout
    if not capped.any():
        return seg, nb
    # uniform sample without replacement: keep the `fanout` smallest random keys
    keys = rng.random(len(nb))
    order = np.lexsort((keys, seg))
    rank = np.empty(len(nb), dtype=np.int64)
    rank[order] = np.arange(len(nb)) - first[seg[order]]
    keep = rank < fanout
    keep |= ~capped[seg]
    seg, nb = seg[keep], nb[keep]
    order = np.lexsort((nb, seg))
    return seg[order], nb[order]


def seed_adjacency(g: ScoreGraph, seeds: np.ndarray) -> np.ndarray:
    b = len(seeds)
    where = np.full(g.n, -1, dtype=np.int64)
    where[seeds] = np.arange(b)
    pos, seg, _, _ = _segments(g.csr_offsets, seeds)
    cols = where[g.csr_neighbors[pos]]
    ok = cols >= 0
    adj = np.zeros((b, b))
    adj[seg[ok], cols[ok]] = 1.0
    return adj


def sample_neighbors(g: ScoreGraph, seeds, fanouts: Sequence, rng, features=None,
                     labels=None) -> BatchBlocks:
    """Blocks for a seed batch.  ``fanouts[l-1]`` caps encoder layer ``l``;
    the hop adjacent to the seeds feeds the last layer, so it uses
    ``fanouts[-1]`` and the outermost hop uses ``fanouts[0]``."""
    seeds = np.asarray(seeds, dtype=np.int64)
    L = len(fanouts)
    where = np.full(g.n, -1, dtype=np.int64)
    nodes = seeds
    where[seeds] = np.arange(len(seeds))
    if len(np.unique(seeds)) != len(seeds):
        raise ValueError("duplicate seed ids")
    layer_nodes = [seeds]
    blocks = []
    for hop in range(1, L + 1):
        fanout = fanouts[L - hop]
        seg, nb = sample_hop(g.csr_offsets, g.csr_neighbors, nodes, fanout, rng)
        new = np.unique(nb[where[nb] < 0])
        where[new] = len(nodes) + np.arange(len(new))
        src = np.concatenate([nodes, new])
        indptr = np.zeros(len(nodes) + 1, dtype=np.int64)
        np.add.at(indptr, seg + 1, 1)
        blocks.append(Block(len(nodes), len(src), np.cumsum(indptr), where[nb]))
        nodes = src
        layer_nodes.append(nodes)
    x = g.features if features is None else features
    y = g.labels if labels is None else labels
    return BatchBlocks(
        seeds=seeds,
        layer_nodes=layer_nodes,
        blocks=blocks,
        features=np.asarray(x[nodes], dtype=np.float64),
        labels=np.asarray(y[seeds], dtype=np.int64),
        seed_adjacency=seed_adjacency(g, seeds),
    )
