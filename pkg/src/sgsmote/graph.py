"""Homogeneous note graph: edge construction, CSR storage and the SGGR file."""

from __future__ import annotations

import bisect
import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .score import Score, format_rational, parse_rational

ON, CONS, DUR = 0, 1, 2
TAG_NAMES = ("ON", "CONS", "DUR")

MAGIC = b"SGGR"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")  # magic, version, n, d, nnz (directed entries)


class GraphFormatError(ValueError):
    pass


def build_edges(score: Score) -> list[tuple[int, int, int]]:
    """Undirected edges (i, j, tag) with i < j.

    A pair that satisfies several relations is stored once, tagged by
    priority ON > CONS > DUR.
    """
    notes = score.notes
    found: dict[tuple[int, int], int] = {}

    def add(i, j, tag):
        key = (i, j) if i < j else (j, i)
        prev = found.get(key)
        if prev is None or tag < prev:
            found[key] = tag

    by_onset: dict[Fraction, list[int]] = {}
    for note in notes:
        by_onset.setdefault(note.onset, []).append(note.id)
    onsets = sorted(by_onset)

    for group in by_onset.values():
        for a in range(len(group)):
            for b in range(a + 1, len(group)):
                add(group[a], group[b], ON)

    for note in notes:
        for j in by_onset.get(note.offset, ()):
            add(note.id, j, CONS)

    # notes whose onset falls strictly inside (on_i, on_i + dur_i)
    for note in notes:
        lo = bisect.bisect_right(onsets, note.onset)
        hi = bisect.bisect_left(onsets, note.offset)
        for k in range(lo, hi):
            for j in by_onset[onsets[k]]:
                add(note.id, j, DUR)

    return sorted((i, j, t) for (i, j), t in found.items())


@dataclass
class ScoreGraph:
    n: int
    csr_offsets: np.ndarray
    csr_neighbors: np.ndarray
    edge_tags: np.ndarray
    features: np.ndarray
    feature_manifest: list[dict]
    labels: np.ndarray
    onset_group: np.ndarray
    beat_group: np.ndarray
    piece_id: str
    onsets: list[Fraction] = field(default_factory=list)
    classes: tuple[str, ...] = ("none", "PAC")

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.csr_neighbors) // 2

    def neighbors(self, i: int) -> np.ndarray:
        return self.csr_neighbors[self.csr_offsets[i]:self.csr_offsets[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        rows = np.repeat(np.arange(self.n), self.degrees())
        a[rows, self.csr_neighbors] = 1.0
        return a

    def check(self):
        off = self.csr_offsets
        if len(off) != self.n + 1 or off[0] != 0 or np.any(np.diff(off) < 0):
            raise GraphFormatError("bad CSR offsets")
        rows = np.repeat(np.arange(self.n), np.diff(off))
        fwd = set(zip(rows.tolist(), self.csr_neighbors.tolist()))
        if any(i == j for i, j in fwd):
            raise GraphFormatError("self-loop in adjacency")
        if any((j, i) not in fwd for i, j in fwd):
            raise GraphFormatError("adjacency is not symmetric")
        return True


def csr_from_edges(n: int, edges) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetric CSR (both directions stored, neighbors sorted ascending)."""
    if len(edges):
        e = np.asarray(edges, dtype=np.int64)
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        tag = np.concatenate([e[:, 2], e[:, 2]])
    else:
        src = dst = tag = np.zeros(0, dtype=np.int64)
    order = np.lexsort((dst, src))
    src, dst, tag = src[order], dst[order], tag[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(offsets, src + 1, 1)
    offsets = np.cumsum(offsets)
    return offsets, dst, tag.astype(np.uint8)


def group_ids(keys) -> np.ndarray:
    """Consecutive group ids in order of first appearance of each key."""
    ids: dict = {}
    return np.array([ids.setdefault(k, len(ids)) for k in keys], dtype=np.int64)


def to_graph(score: Score, edges, features: np.ndarray, labels, manifest=None,
             classes=("none", "PAC")) -> ScoreGraph:
    n = len(score.notes)
    features = np.asarray(features)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != n:
        raise ValueError(f"feature rows {features.shape} do not match {n} nodes")
    if labels.shape != (n,):
        raise ValueError(f"label length {labels.shape} does not match {n} nodes")
    if manifest is not None and len(manifest) != features.shape[1]:
        raise ValueError("manifest length does not match feature width")
    for i, j, _ in edges:
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise ValueError(f"bad edge ({i}, {j})")
    offsets, nbrs, tags = csr_from_edges(n, edges)
    onset_group = group_ids(note.onset for note in score.notes)
    beat_group = group_ids(score.beat_of(note.onset)[2] for note in score.notes)
    return ScoreGraph(
        n=n,
        csr_offsets=offsets,
        csr_neighbors=nbrs,
        edge_tags=tags,
        # stored at file precision so a save/load round trip is exact
        features=features.astype(np.float32),
        feature_manifest=list(manifest) if manifest is not None else
        [{"name": f"f{k}", "category": "GENERAL", "range": [-1, 1]} for k in range(features.shape[1])],
        labels=labels.astype(np.int64),
        onset_group=onset_group,
        beat_group=beat_group,
        piece_id=score.piece_id,
        onsets=[note.onset for note in score.notes],
        classes=tuple(classes),
    )


def disjoint_union(graphs: list[ScoreGraph]) -> tuple[ScoreGraph, np.ndarray]:
    """Merge graphs without inter-piece edges.  Returns the union and, per
    node, the index of the source graph."""
    if not graphs:
        raise ValueError("no graphs to merge")
    d = graphs[0].d
    if any(g.d != d for g in graphs):
        raise ValueError("feature widths differ between graphs")
    offs = [np.zeros(1, dtype=np.int64)]
    nbrs, tags, onset_g, beat_g = [], [], [], []
    node_base = edge_base = og_base = bg_base = 0
    for g in graphs:
        offs.append(g.csr_offsets[1:] + edge_base)
        nbrs.append(g.csr_neighbors + node_base)
        tags.append(g.edge_tags)
        onset_g.append(g.onset_group + og_base)
        beat_g.append(g.beat_group + bg_base)
        node_base += g.n
        edge_base += len(g.csr_neighbors)
        og_base += int(g.onset_group.max(initial=-1)) + 1
        bg_base += int(g.beat_group.max(initial=-1)) + 1
    merged = ScoreGraph(
        n=node_base,
        csr_offsets=np.concatenate(offs),
        csr_neighbors=np.concatenate(nbrs),
        edge_tags=np.concatenate(tags),
        features=np.concatenate([g.features for g in graphs]),
        feature_manifest=graphs[0].feature_manifest,
        labels=np.concatenate([g.labels for g in graphs]),
        onset_group=np.concatenate(onset_g),
        beat_group=np.concatenate(beat_g),
        piece_id="+".join(g.piece_id for g in graphs),
        onsets=[o for g in graphs for o in g.onsets],
        classes=graphs[0].classes,
    )
    owner = np.repeat(np.arange(len(graphs)), [g.n for g in graphs])
    return merged, owner


# -- SGGR binary file ----------------------------------------------------------

def save_graph(g: ScoreGraph, path) -> None:
    nnz = len(g.csr_neighbors)
    if g.labels.size and (g.labels.min() < 0 or g.labels.max() > 255):
        raise ValueError("labels must fit in u8")
    trailer = json.dumps({
        "piece_id": g.piece_id,
        "feature_manifest": g.feature_manifest,
        "classes": list(g.classes),
        "onsets": [format_rational(o) for o in g.onsets],
    }, sort_keys=True).encode("utf-8")
    parts = [
        _HEADER.pack(MAGIC, VERSION, g.n, g.d, nnz),
        g.csr_offsets.astype("<u4").tobytes(),
        g.csr_neighbors.astype("<u4").tobytes(),
        g.edge_tags.astype("u1").tobytes(),
        np.ascontiguousarray(g.features, dtype="<f4").tobytes(),
        g.labels.astype("u1").tobytes(),
        g.onset_group.astype("<u4").tobytes(),
        g.beat_group.astype("<u4").tobytes(),
        struct.pack("<I", len(trailer)),
        trailer,
    ]
    Path(path).write_bytes(b"".join(parts))


def load_graph(path) -> ScoreGraph:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise GraphFormatError(f"{path}: truncated header")
    magic, version, n, d, nnz = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise GraphFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise GraphFormatError(f"{path}: unsupported version {version}")
    pos = _HEADER.size

    def take(dtype, count):
        nonlocal pos
        size = np.dtype(dtype).itemsize * count
        if pos + size > len(buf):
            raise GraphFormatError(f"{path}: truncated file")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
        pos += size
        return arr

    offsets = take("<u4", n + 1).astype(np.int64)
    nbrs = take("<u4", nnz).astype(np.int64)
    tags = take("u1", nnz).copy()
    feats = take("<f4", n * d).reshape(n, d).astype(np.float32)
    labels = take("u1", n).astype(np.int64)
    onset_group = take("<u4", n).astype(np.int64)
    beat_group = take("<u4", n).astype(np.int64)
    (tlen,) = take("<u4", 1)
    raw = take("u1", int(tlen)).tobytes()
    if pos != len(buf):
        raise GraphFormatError(f"{path}: trailing bytes")
    try:
        meta = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GraphFormatError(f"{path}: corrupt trailer") from exc
    if offsets[-1] != nnz:
        raise GraphFormatError(f"{path}: CSR offsets inconsistent with edge count")
    return ScoreGraph(
        n=n,
        csr_offsets=offsets,
        csr_neighbors=nbrs,
        edge_tags=tags,
        features=feats,
        feature_manifest=meta["feature_manifest"],
        labels=labels,
        onset_group=onset_group,
        beat_group=beat_group,
        piece_id=meta["piece_id"],
        onsets=[parse_rational(o) for o in meta.get("onsets", [])],
        classes=tuple(meta.get("classes", ("none", "PAC"))),
    )


def graphs_equal(a: ScoreGraph, b: ScoreGraph) -> bool:
    return (
        a.n == b.n and a.piece_id == b.piece_id and a.classes == b.classes
        and a.feature_manifest == b.feature_manifest and a.onsets == b.onsets
        and all(np.array_equal(getattr(a, k), getattr(b, k)) for k in
                ("csr_offsets", "csr_neighbors", "edge_tags", "features", "labels",
                 "onset_group", "beat_group"))
    )
